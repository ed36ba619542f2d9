//! Slot lifecycle: Connect, Wait, Send, Commit, and the terminal Retired.
//!
//! A [`Slot`] is a sans-IO state machine. Its operations validate the phase,
//! perform the transition and tell the caller which frames to write; the
//! caller owns the sockets (or the simulated segments).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proto::Request;
use crate::record::Record;
use crate::segment::SegmentEndpoint;

pub type SlotId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotPhase {
    Connect,
    Wait,
    Send,
    Commit,
    Retired,
}

impl fmt::Display for SlotPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Why a transition happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cause {
    /// Normal cycle progress.
    Cycle,
    /// Scheduler-ordered abort.
    Abort,
    /// Connection or protocol failure.
    Fault,
}

/// Who drives a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Initiator {
    Scheduler,
    Slot,
}

impl SlotPhase {
    /// The transition table.
    ///
    /// The cycle is Connect -> Wait -> Send -> Commit -> Connect. Aborts
    /// retire a slot from Wait or at the end of Commit. Faults retire from
    /// any live phase.
    pub fn allows(self, to: SlotPhase, cause: Cause) -> bool {
        use SlotPhase::*;
        match cause {
            Cause::Cycle => matches!(
                (self, to),
                (Connect, Wait) | (Wait, Send) | (Send, Commit) | (Commit, Connect)
            ),
            Cause::Abort => matches!((self, to), (Wait, Retired) | (Commit, Retired)),
            Cause::Fault => self != Retired && to == Retired,
        }
    }

    /// Only the end of Send is driven by the slot itself.
    pub fn initiator(self, to: SlotPhase) -> Initiator {
        if (self, to) == (SlotPhase::Send, SlotPhase::Commit) {
            Initiator::Slot
        } else {
            Initiator::Scheduler
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub slot: SlotId,
    pub from: SlotPhase,
    pub to: SlotPhase,
    pub cause: Cause,
    pub by: Initiator,
    pub at_us: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlotError {
    #[error("slot {slot}: {op} not allowed in phase {phase}")]
    IllegalPhase {
        slot: SlotId,
        op: &'static str,
        phase: SlotPhase,
    },
    #[error("slot {slot}: expected txn {expected:?}, got {got}")]
    TxnMismatch {
        slot: SlotId,
        expected: Option<String>,
        got: String,
    },
    #[error("slot {0}: no segments to connect to")]
    NoSegments(SlotId),
    #[error("slot {slot}: segment index {index} out of range")]
    BadSegment { slot: SlotId, index: usize },
}

/// The set of records a slot streams during one interval; committed as one
/// transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroBatch {
    pub txn_id: String,
    pub records: Vec<Record>,
    pub interval_ms: u64,
}

/// What the owner should do after a commit is acknowledged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitOutcome {
    /// Back in Connect; call [`Slot::begin_connect`] with a new transaction.
    Reconnect,
    Retired,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Index of the segment connection a device's rows go to.
pub fn route(device_id: &str, segments: usize) -> usize {
    (fnv1a(device_id.as_bytes()) % segments as u64) as usize
}

#[derive(Debug, Clone)]
pub struct Slot {
    id: SlotId,
    phase: SlotPhase,
    segments: Vec<SegmentEndpoint>,
    txn_id: Option<String>,
    pending_txn: Option<String>,
    ready_acks: Vec<bool>,
    commit_acks: Vec<Option<u64>>,
    batch_row_count: u64,
    rows_per_segment: Vec<u64>,
    phase_entered_at: u64,
    last_send_ended_at: Option<u64>,
    history: Vec<Transition>,
}

impl Slot {
    /// A fresh slot: phase Connect with no transaction pending.
    pub fn new(id: SlotId, now_us: u64) -> Self {
        Self {
            id,
            phase: SlotPhase::Connect,
            segments: Vec::new(),
            txn_id: None,
            pending_txn: None,
            ready_acks: Vec::new(),
            commit_acks: Vec::new(),
            batch_row_count: 0,
            rows_per_segment: Vec::new(),
            phase_entered_at: now_us,
            last_send_ended_at: None,
            history: Vec::new(),
        }
    }

    pub fn id(&self) -> SlotId {
        self.id
    }

    pub fn phase(&self) -> SlotPhase {
        self.phase
    }

    pub fn txn_id(&self) -> Option<&str> {
        self.txn_id.as_deref()
    }

    pub fn pending_txn(&self) -> Option<&str> {
        self.pending_txn.as_deref()
    }

    pub fn segments(&self) -> &[SegmentEndpoint] {
        &self.segments
    }

    pub fn batch_row_count(&self) -> u64 {
        self.batch_row_count
    }

    /// Rows routed to each segment in the current micro-batch.
    pub fn rows_per_segment(&self) -> &[u64] {
        &self.rows_per_segment
    }

    pub fn phase_entered_at(&self) -> u64 {
        self.phase_entered_at
    }

    pub fn last_send_ended_at(&self) -> Option<u64> {
        self.last_send_ended_at
    }

    pub fn history(&self) -> &[Transition] {
        &self.history
    }

    fn illegal(&self, op: &'static str) -> SlotError {
        SlotError::IllegalPhase {
            slot: self.id,
            op,
            phase: self.phase,
        }
    }

    fn transition(&mut self, to: SlotPhase, cause: Cause, now_us: u64) -> Transition {
        debug_assert!(self.phase.allows(to, cause), "{} -> {to} ({cause:?})", self.phase);
        let t = Transition {
            slot: self.id,
            from: self.phase,
            to,
            cause,
            by: self.phase.initiator(to),
            at_us: now_us,
        };
        self.phase = to;
        self.phase_entered_at = now_us;
        self.history.push(t);
        t
    }

    /// Issues `BEGIN` to every segment. The slot stays in Connect until all
    /// of them answer `READY` (see [`segment_ready`](Self::segment_ready)).
    pub fn begin_connect(
        &mut self,
        segments: Vec<SegmentEndpoint>,
        txn_id: String,
        table: &str,
    ) -> Result<Vec<Request>, SlotError> {
        if self.phase != SlotPhase::Connect || self.pending_txn.is_some() {
            return Err(self.illegal("begin_connect"));
        }
        if segments.is_empty() {
            return Err(SlotError::NoSegments(self.id));
        }
        let frames = segments
            .iter()
            .map(|_| Request::Begin {
                txn: txn_id.clone(),
                table: table.to_string(),
            })
            .collect();
        self.ready_acks = vec![false; segments.len()];
        self.segments = segments;
        self.pending_txn = Some(txn_id);
        Ok(frames)
    }

    /// Records `READY` from segment `index`. Returns the Connect -> Wait
    /// transition once every segment has answered.
    pub fn segment_ready(
        &mut self,
        index: usize,
        txn: &str,
        now_us: u64,
    ) -> Result<Option<Transition>, SlotError> {
        if self.phase != SlotPhase::Connect {
            return Err(self.illegal("segment_ready"));
        }
        if self.pending_txn.as_deref() != Some(txn) {
            return Err(SlotError::TxnMismatch {
                slot: self.id,
                expected: self.pending_txn.clone(),
                got: txn.to_string(),
            });
        }
        *self
            .ready_acks
            .get_mut(index)
            .ok_or(SlotError::BadSegment { slot: self.id, index })? = true;
        if self.ready_acks.iter().all(|&a| a) {
            self.txn_id = self.pending_txn.take();
            return Ok(Some(self.transition(SlotPhase::Wait, Cause::Cycle, now_us)));
        }
        Ok(None)
    }

    /// Wait -> Send on the scheduler's order.
    pub fn dispatch(&mut self, now_us: u64) -> Result<Transition, SlotError> {
        if self.phase != SlotPhase::Wait {
            return Err(self.illegal("dispatch"));
        }
        self.batch_row_count = 0;
        self.rows_per_segment = vec![0; self.segments.len()];
        Ok(self.transition(SlotPhase::Send, Cause::Cycle, now_us))
    }

    /// Frames each record onto exactly one segment connection, appending
    /// newline-terminated CSV to `out[route(device)]`.
    pub fn send_records(&mut self, records: &[Record], out: &mut [String]) -> Result<u64, SlotError> {
        if self.phase != SlotPhase::Send {
            return Err(self.illegal("send_records"));
        }
        let n = self.segments.len();
        if out.len() < n {
            return Err(SlotError::BadSegment { slot: self.id, index: out.len() });
        }
        for r in records {
            let idx = route(&r.device_id, n);
            r.write_csv(&mut out[idx]);
            out[idx].push('\n');
            self.rows_per_segment[idx] += 1;
        }
        self.batch_row_count += records.len() as u64;
        Ok(self.batch_row_count)
    }

    /// Records that rows were streamed without framing them here (used by
    /// the simulator, which moves row counts rather than records).
    pub fn account_rows(&mut self, rows: u64) -> Result<u64, SlotError> {
        if self.phase != SlotPhase::Send {
            return Err(self.illegal("account_rows"));
        }
        self.batch_row_count += rows;
        if let Some(first) = self.rows_per_segment.first_mut() {
            *first += rows;
        }
        Ok(self.batch_row_count)
    }

    /// Send -> Commit, driven by the slot when its interval is over. The
    /// caller writes one `EOF` per segment connection.
    pub fn finish_send(&mut self, now_us: u64) -> Result<Transition, SlotError> {
        if self.phase != SlotPhase::Send {
            return Err(self.illegal("finish_send"));
        }
        self.last_send_ended_at = Some(now_us);
        self.commit_acks = vec![None; self.segments.len()];
        Ok(self.transition(SlotPhase::Commit, Cause::Cycle, now_us))
    }

    /// Records `COMMITTED` from segment `index`; true once every segment has
    /// acknowledged.
    pub fn segment_committed(&mut self, index: usize, txn: &str, rows: u64) -> Result<bool, SlotError> {
        if self.phase != SlotPhase::Commit {
            return Err(self.illegal("segment_committed"));
        }
        if self.txn_id.as_deref() != Some(txn) {
            return Err(SlotError::TxnMismatch {
                slot: self.id,
                expected: self.txn_id.clone(),
                got: txn.to_string(),
            });
        }
        *self
            .commit_acks
            .get_mut(index)
            .ok_or(SlotError::BadSegment { slot: self.id, index })? = Some(rows);
        Ok(self.commit_acks.iter().all(Option::is_some))
    }

    /// Completes the commit. With `abort` set the slot retires, otherwise it
    /// returns to Connect ready for a new transaction. A mismatched txn id
    /// retires the slot and is reported as an error.
    pub fn on_commit_ack(&mut self, txn: &str, abort: bool, now_us: u64) -> Result<CommitOutcome, SlotError> {
        if self.phase != SlotPhase::Commit {
            return Err(self.illegal("on_commit_ack"));
        }
        if self.txn_id.as_deref() != Some(txn) {
            let err = SlotError::TxnMismatch {
                slot: self.id,
                expected: self.txn_id.clone(),
                got: txn.to_string(),
            };
            tracing::error!(slot = self.id, error = %err, "commit acknowledgement for wrong transaction");
            self.fail(now_us);
            return Err(err);
        }
        self.txn_id = None;
        if abort {
            self.transition(SlotPhase::Retired, Cause::Abort, now_us);
            Ok(CommitOutcome::Retired)
        } else {
            self.transition(SlotPhase::Connect, Cause::Cycle, now_us);
            Ok(CommitOutcome::Reconnect)
        }
    }

    /// Scheduler-ordered abort of a waiting slot. The caller drops the
    /// segment connections, which aborts the open transactions.
    pub fn abort(&mut self, now_us: u64) -> Result<Transition, SlotError> {
        if self.phase != SlotPhase::Wait {
            return Err(self.illegal("abort"));
        }
        self.txn_id = None;
        Ok(self.transition(SlotPhase::Retired, Cause::Abort, now_us))
    }

    /// Retires the slot after a connection or protocol failure.
    pub fn fail(&mut self, now_us: u64) -> Option<Transition> {
        if self.phase == SlotPhase::Retired {
            return None;
        }
        self.txn_id = None;
        self.pending_txn = None;
        Some(self.transition(SlotPhase::Retired, Cause::Fault, now_us))
    }
}
