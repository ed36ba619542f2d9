//! In-memory mock segment: per-transaction staging and commit-time visibility.
//!
//! This is the protocol state machine only. Latencies are applied by whoever
//! drives it (the TCP daemon sleeps, the simulator schedules events).

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::proto::ErrorReason;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentEndpoint {
    pub host: String,
    pub port: u16,
    pub segment_id: String,
}

impl SegmentEndpoint {
    pub fn new(segment_id: impl Into<String>, host: impl Into<String>, port: u16) -> Self {
        Self {
            host: host.into(),
            port,
            segment_id: segment_id.into(),
        }
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl fmt::Display for SegmentEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}:{}", self.segment_id, self.host, self.port)
    }
}

/// Simulated transaction costs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub begin_latency_ms: u64,
    pub commit_fixed_ms: u64,
    pub commit_per_row_us: u64,
}

impl LatencyModel {
    pub fn begin_latency(&self) -> Duration {
        Duration::from_millis(self.begin_latency_ms)
    }

    pub fn commit_latency(&self, rows: u64) -> Duration {
        Duration::from_millis(self.commit_fixed_ms)
            + Duration::from_micros(rows.saturating_mul(self.commit_per_row_us))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TxnState {
    Begun,
    Streaming,
    Committing,
    Committed,
    Aborted,
}

impl TxnState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TxnState::Committed | TxnState::Aborted)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentTxn {
    pub txn_id: String,
    pub table: String,
    pub state: TxnState,
    pub received_rows: Vec<String>,
    pub begun_at_us: u64,
    pub committed_at_us: Option<u64>,
}

/// Latest committed row for a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeResult {
    pub timestamp: i64,
    /// Measurement fields as they appeared on the wire.
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedRow {
    pub txn_id: String,
    pub row: String,
}

#[derive(Default)]
struct Inner {
    txns: HashMap<String, SegmentTxn>,
    latest: HashMap<String, ProbeResult>,
    visible_by_txn: HashMap<String, u64>,
    committed: Vec<CommittedRow>,
    committed_rows_total: u64,
    commits: u64,
    last_commit_at_us: Option<u64>,
}

/// Transaction table and committed-row store of one segment.
pub struct SegmentStore {
    segment_id: String,
    retain_rows: bool,
    inner: RwLock<Inner>,
    dump: Option<Mutex<std::fs::File>>,
}

impl SegmentStore {
    pub fn new(segment_id: impl Into<String>) -> Self {
        Self {
            segment_id: segment_id.into(),
            retain_rows: true,
            inner: RwLock::new(Inner::default()),
            dump: None,
        }
    }

    /// Keeps only counters and the per-device latest row, not every row.
    pub fn without_row_retention(mut self) -> Self {
        self.retain_rows = false;
        self
    }

    /// Appends `<txn-id>\t<row>` for every committed row to `path`.
    pub fn with_dump(mut self, path: &Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.dump = Some(Mutex::new(f));
        Ok(self)
    }

    pub fn segment_id(&self) -> &str {
        &self.segment_id
    }

    pub fn handle_begin(&self, txn: &str, table: &str, now_us: u64) -> Result<(), ErrorReason> {
        let mut inner = self.inner.write().unwrap();
        if inner.txns.contains_key(txn) {
            return Err(ErrorReason::DuplicateTxn);
        }
        inner.txns.insert(
            txn.to_string(),
            SegmentTxn {
                txn_id: txn.to_string(),
                table: table.to_string(),
                state: TxnState::Begun,
                received_rows: Vec::new(),
                begun_at_us: now_us,
                committed_at_us: None,
            },
        );
        Ok(())
    }

    /// Stages a row. It stays invisible until the transaction commits.
    pub fn handle_data(&self, txn: &str, row: &str) -> Result<(), ErrorReason> {
        let mut inner = self.inner.write().unwrap();
        let t = inner.txns.get_mut(txn).ok_or(ErrorReason::UnknownTxn)?;
        match t.state {
            TxnState::Begun | TxnState::Streaming => {
                t.state = TxnState::Streaming;
                t.received_rows.push(row.to_string());
                Ok(())
            }
            _ => Err(ErrorReason::ProtocolOrder),
        }
    }

    /// Moves the transaction to `Committing` and returns its row count.
    pub fn handle_eof(&self, txn: &str) -> Result<u64, ErrorReason> {
        let mut inner = self.inner.write().unwrap();
        let t = inner.txns.get_mut(txn).ok_or(ErrorReason::UnknownTxn)?;
        match t.state {
            TxnState::Begun | TxnState::Streaming => {
                t.state = TxnState::Committing;
                Ok(t.received_rows.len() as u64)
            }
            _ => Err(ErrorReason::ProtocolOrder),
        }
    }

    /// Publishes every staged row of `txn` in one step.
    pub fn complete_commit(&self, txn: &str, now_us: u64) -> Result<u64, ErrorReason> {
        let mut inner = self.inner.write().unwrap();
        let inner = &mut *inner;
        let t = inner.txns.get_mut(txn).ok_or(ErrorReason::UnknownTxn)?;
        if t.state != TxnState::Committing {
            return Err(ErrorReason::ProtocolOrder);
        }
        t.state = TxnState::Committed;
        t.committed_at_us = Some(now_us);
        let rows = std::mem::take(&mut t.received_rows);
        let count = rows.len() as u64;
        for row in &rows {
            if let Some((device, probe)) = split_row(row) {
                match inner.latest.get(device) {
                    Some(cur) if cur.timestamp >= probe.timestamp => {}
                    _ => {
                        inner.latest.insert(device.to_string(), probe);
                    }
                }
            }
        }
        if let Some(dump) = &self.dump {
            let mut f = dump.lock().unwrap();
            for row in &rows {
                let _ = writeln!(f, "{txn}\t{row}");
            }
        }
        if self.retain_rows {
            inner.committed.extend(rows.into_iter().map(|row| CommittedRow {
                txn_id: txn.to_string(),
                row,
            }));
        }
        inner.visible_by_txn.insert(txn.to_string(), count);
        inner.committed_rows_total += count;
        inner.commits += 1;
        inner.last_commit_at_us = Some(now_us);
        Ok(count)
    }

    /// Drops a non-terminal transaction and its staged rows.
    pub fn abort(&self, txn: &str) -> bool {
        let mut inner = self.inner.write().unwrap();
        match inner.txns.get_mut(txn) {
            Some(t) if !t.state.is_terminal() => {
                t.state = TxnState::Aborted;
                t.received_rows = Vec::new();
                true
            }
            _ => false,
        }
    }

    /// Latest committed row for `device`, by timestamp.
    pub fn visibility_probe(&self, device: &str) -> Option<ProbeResult> {
        self.inner.read().unwrap().latest.get(device).cloned()
    }

    /// Rows of `txn` visible to readers: zero until commit, then all of them.
    pub fn visible_rows(&self, txn: &str) -> u64 {
        self.inner
            .read()
            .unwrap()
            .visible_by_txn
            .get(txn)
            .copied()
            .unwrap_or(0)
    }

    pub fn txn_state(&self, txn: &str) -> Option<TxnState> {
        self.inner.read().unwrap().txns.get(txn).map(|t| t.state)
    }

    pub fn staged_rows(&self, txn: &str) -> usize {
        self.inner
            .read()
            .unwrap()
            .txns
            .get(txn)
            .map_or(0, |t| t.received_rows.len())
    }

    pub fn committed_rows_total(&self) -> u64 {
        self.inner.read().unwrap().committed_rows_total
    }

    pub fn commits(&self) -> u64 {
        self.inner.read().unwrap().commits
    }

    pub fn last_commit_at_us(&self) -> Option<u64> {
        self.inner.read().unwrap().last_commit_at_us
    }

    /// Copy of every retained committed row.
    pub fn committed_rows(&self) -> Vec<CommittedRow> {
        self.inner.read().unwrap().committed.clone()
    }

    /// Calls `f` on every retained committed row without copying them.
    pub fn for_each_committed(&self, mut f: impl FnMut(&CommittedRow)) {
        for row in &self.inner.read().unwrap().committed {
            f(row);
        }
    }
}

fn split_row(row: &str) -> Option<(&str, ProbeResult)> {
    let mut fields = row.split(',');
    let device = fields.next()?;
    let timestamp = fields.next()?.trim().parse().ok()?;
    Some((
        device,
        ProbeResult {
            timestamp,
            values: fields.map(str::to_string).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_begin_is_refused() {
        let s = SegmentStore::new("seg0");
        assert_eq!(s.handle_begin("t1", "readings", 0), Ok(()));
        assert_eq!(s.handle_begin("t1", "readings", 0), Err(ErrorReason::DuplicateTxn));
    }

    #[test]
    fn staged_rows_are_invisible() {
        let s = SegmentStore::new("seg0");
        s.handle_begin("t1", "r", 0).unwrap();
        s.handle_data("t1", "dev1,5,1.0").unwrap();
        assert_eq!(s.txn_state("t1"), Some(TxnState::Streaming));
        assert_eq!(s.visibility_probe("dev1"), None);
        assert_eq!(s.handle_data("nope", "dev1,5,1.0"), Err(ErrorReason::UnknownTxn));
    }

    #[test]
    fn ten_thousand_rows_stay_staged() {
        let s = SegmentStore::new("seg0");
        s.handle_begin("t1", "r", 0).unwrap();
        for i in 0..10_000 {
            s.handle_data("t1", &format!("dev{},{i},1", i % 7)).unwrap();
        }
        assert_eq!(s.staged_rows("t1"), 10_000);
        assert_eq!(s.visible_rows("t1"), 0);
        assert_eq!(s.committed_rows_total(), 0);
    }

    #[test]
    fn eof_then_commit_publishes_all_rows() {
        let s = SegmentStore::new("seg0");
        s.handle_begin("t1", "r", 0).unwrap();
        for i in 0..100 {
            s.handle_data("t1", &format!("dev1,{i},{i}")).unwrap();
        }
        assert_eq!(s.handle_eof("t1"), Ok(100));
        assert_eq!(s.handle_eof("t1"), Err(ErrorReason::ProtocolOrder));
        assert_eq!(s.handle_data("t1", "dev1,1,1"), Err(ErrorReason::ProtocolOrder));
        assert_eq!(s.visible_rows("t1"), 0);
        assert_eq!(s.complete_commit("t1", 42), Ok(100));
        assert_eq!(s.visible_rows("t1"), 100);
        assert_eq!(s.last_commit_at_us(), Some(42));
        assert_eq!(s.visibility_probe("dev1").unwrap().timestamp, 99);
        assert_eq!(s.handle_eof("t1"), Err(ErrorReason::ProtocolOrder));
    }

    #[test]
    fn empty_transaction_commits_zero_rows() {
        let s = SegmentStore::new("seg0");
        s.handle_begin("t1", "r", 0).unwrap();
        assert_eq!(s.handle_eof("t1"), Ok(0));
        assert_eq!(s.complete_commit("t1", 1), Ok(0));
        assert_eq!(s.handle_eof("unknown"), Err(ErrorReason::UnknownTxn));
    }

    #[test]
    fn probe_returns_max_timestamp_committed_row() {
        let s = SegmentStore::new("seg0");
        assert_eq!(s.visibility_probe("dev1"), None);
        s.handle_begin("a", "r", 0).unwrap();
        s.handle_data("a", "dev1,9,nine").unwrap();
        s.handle_data("a", "dev1,5,five").unwrap();
        s.handle_eof("a").unwrap();
        s.complete_commit("a", 1).unwrap();
        let p = s.visibility_probe("dev1").unwrap();
        assert_eq!((p.timestamp, p.values), (9, vec!["nine".to_string()]));

        s.handle_begin("b", "r", 0).unwrap();
        s.handle_data("b", "dev1,20,twenty").unwrap();
        assert_eq!(s.visibility_probe("dev1").unwrap().timestamp, 9);
        s.handle_eof("b").unwrap();
        assert_eq!(s.visibility_probe("dev1").unwrap().timestamp, 9);
        s.complete_commit("b", 2).unwrap();
        assert_eq!(s.visibility_probe("dev1").unwrap().timestamp, 20);
    }

    #[test]
    fn abort_discards_rows() {
        let s = SegmentStore::new("seg0");
        s.handle_begin("t", "r", 0).unwrap();
        s.handle_data("t", "dev1,1,1").unwrap();
        assert!(s.abort("t"));
        assert!(!s.abort("t"));
        assert_eq!(s.txn_state("t"), Some(TxnState::Aborted));
        assert_eq!(s.handle_eof("t"), Err(ErrorReason::ProtocolOrder));
        assert_eq!(s.visibility_probe("dev1"), None);
    }

    #[test]
    fn latency_arithmetic() {
        let m = LatencyModel {
            begin_latency_ms: 50,
            commit_fixed_ms: 10,
            commit_per_row_us: 100,
        };
        assert_eq!(m.begin_latency(), Duration::from_millis(50));
        assert_eq!(m.commit_latency(100), Duration::from_millis(20));
        assert_eq!(m.commit_latency(0), Duration::from_millis(10));
    }
}
