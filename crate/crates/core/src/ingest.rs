//! Turning posted request bodies into queued records.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::metrics::Counters;
use crate::pipeline::LockFreeQueue;
use crate::record::{parse_record, truncate_raw, Record, RejectReason, Schema};

/// A refused input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestError {
    /// 1-based line number within the request body.
    pub line_number: usize,
    pub raw_line: String,
    pub reason: RejectReason,
    /// Unix epoch microseconds.
    pub at: u64,
}

/// Append-only log of refused lines.
///
/// Keeps the most recent `retain` entries in memory and optionally mirrors
/// every entry to a JSON-lines file.
pub struct ErrorLog {
    recent: Mutex<VecDeque<IngestError>>,
    retain: usize,
    total: AtomicU64,
    sink: Option<Mutex<std::fs::File>>,
}

impl Default for ErrorLog {
    fn default() -> Self {
        Self::new(10_000)
    }
}

impl ErrorLog {
    pub fn new(retain: usize) -> Self {
        Self {
            recent: Mutex::new(VecDeque::new()),
            retain,
            total: AtomicU64::new(0),
            sink: None,
        }
    }

    pub fn with_file(retain: usize, path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            sink: Some(Mutex::new(file)),
            ..Self::new(retain)
        })
    }

    pub fn append(&self, err: IngestError) {
        tracing::warn!(line = err.line_number, reason = %err.reason, raw = %err.raw_line, "rejected input line");
        if let Some(sink) = &self.sink {
            if let Ok(json) = serde_json_line(&err) {
                let mut f = sink.lock().unwrap();
                let _ = f.write_all(json.as_bytes());
            }
        }
        self.total.fetch_add(1, Ordering::Relaxed);
        let mut recent = self.recent.lock().unwrap();
        if recent.len() == self.retain {
            recent.pop_front();
        }
        if self.retain > 0 {
            recent.push_back(err);
        }
    }

    pub fn total(&self) -> u64 {
        self.total.load(Ordering::Relaxed)
    }

    pub fn recent(&self) -> Vec<IngestError> {
        self.recent.lock().unwrap().iter().cloned().collect()
    }
}

fn serde_json_line(err: &IngestError) -> Result<String, std::fmt::Error> {
    // Hand-rolled to keep serde_json out of the core crate.
    use std::fmt::Write as _;
    let mut out = String::new();
    write!(
        out,
        "{{\"line_number\":{},\"reason\":\"{}\",\"at\":{},\"raw_line\":\"",
        err.line_number, err.reason, err.at
    )?;
    for c in err.raw_line.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if (c as u32) < 0x20 => write!(out, "\\u{:04x}", c as u32)?,
            c => out.push(c),
        }
    }
    out.push_str("\"}\n");
    Ok(out)
}

/// Per-request outcome. `accepted + rejected + backpressured` equals the
/// number of lines in the body.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: u64,
    pub rejected: u64,
    pub backpressured: u64,
    /// 1-based line numbers refused for lack of queue space; resend these.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub retry_lines: Vec<usize>,
}

impl IngestReport {
    pub fn lines(&self) -> u64 {
        self.accepted + self.rejected + self.backpressured
    }
}

/// Shared front end of the pipeline. Cheap to clone; clones share the
/// sequence counter.
#[derive(Clone)]
pub struct Ingestor {
    schema: Arc<Schema>,
    pipeline: Arc<LockFreeQueue<Record>>,
    next_seq: Arc<AtomicU64>,
    errors: Arc<ErrorLog>,
    counters: Arc<Counters>,
}

impl Ingestor {
    pub fn new(
        schema: Schema,
        pipeline: Arc<LockFreeQueue<Record>>,
        errors: Arc<ErrorLog>,
        counters: Arc<Counters>,
    ) -> Self {
        Self {
            schema: Arc::new(schema),
            pipeline,
            next_seq: Arc::new(AtomicU64::new(1)),
            errors,
            counters,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn pipeline(&self) -> &Arc<LockFreeQueue<Record>> {
        &self.pipeline
    }

    pub fn errors(&self) -> &Arc<ErrorLog> {
        &self.errors
    }

    /// Parses every line of `body`, queueing the valid ones.
    ///
    /// A bad line is logged and counted but never affects its neighbours.
    pub fn handle_post(&self, body: &str) -> IngestReport {
        let mut report = IngestReport::default();
        for (idx, line) in body.lines().enumerate() {
            let line_number = idx + 1;
            match parse_record(line, &self.schema) {
                Ok(mut record) => {
                    // Sequence numbers are drawn only once space is reserved,
                    // so accepted records carry dense numbers.
                    let queued = self.pipeline.enqueue_with(|| {
                        record.seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
                        record
                    });
                    if queued {
                        report.accepted += 1;
                    } else {
                        report.backpressured += 1;
                        report.retry_lines.push(line_number);
                    }
                }
                Err(reason) => {
                    report.rejected += 1;
                    self.errors.append(IngestError {
                        line_number,
                        raw_line: truncate_raw(line),
                        reason,
                        at: epoch_micros(),
                    });
                }
            }
        }
        Counters::add(&self.counters.rows_accepted, report.accepted);
        Counters::add(&self.counters.rows_rejected, report.rejected);
        Counters::add(&self.counters.rows_backpressured, report.backpressured);
        report
    }
}

pub fn epoch_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::ColumnType;
    use proptest::prelude::*;

    fn ingestor(capacity: Option<usize>) -> Ingestor {
        Ingestor::new(
            Schema::from_types(&[ColumnType::Float, ColumnType::Int]),
            Arc::new(LockFreeQueue::with_capacity(capacity)),
            Arc::new(ErrorLog::default()),
            Arc::new(Counters::default()),
        )
    }

    #[test]
    fn three_valid_lines() {
        let ing = ingestor(None);
        let report = ing.handle_post("a,1,1.0,1\nb,2,2.0,2\nc,3,3.0,3\n");
        assert_eq!((report.accepted, report.rejected, report.backpressured), (3, 0, 0));
        assert_eq!(ing.pipeline().approx_len(), 3);
    }

    #[test]
    fn malformed_line_is_isolated_and_logged() {
        let ing = ingestor(None);
        let report = ing.handle_post("a,1,1.0,1\nb,2,oops,2\nc,3,3.0,3");
        assert_eq!((report.accepted, report.rejected, report.backpressured), (2, 1, 0));
        let log = ing.errors().recent();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].line_number, 2);
        assert_eq!(log[0].reason, RejectReason::Type);
        assert_eq!(log[0].raw_line, "b,2,oops,2");
        let devices: Vec<String> = ing.pipeline().drain_up_to(10).into_iter().map(|r| r.device_id).collect();
        assert_eq!(devices, vec!["a", "c"]);
    }

    #[test]
    fn full_queue_backpressures_the_rest() {
        let ing = ingestor(Some(2));
        let body: String = (1..=5).map(|i| format!("d{i},{i},1.0,{i}\n")).collect();
        let report = ing.handle_post(&body);
        // Oracle: with nothing draining, exactly `capacity` lines fit.
        assert_eq!((report.accepted, report.rejected, report.backpressured), (2, 0, 3));
        assert_eq!(report.retry_lines, vec![3, 4, 5]);
    }

    #[test]
    fn sequence_numbers_are_dense() {
        let ing = ingestor(Some(3));
        ing.handle_post("a,1,1.0,1\nbad\nb,2,2.0,2\nc,3,3.0,3\nd,4,4.0,4");
        ing.pipeline().dequeue();
        ing.handle_post("e,5,5.0,5");
        let seqs: Vec<u64> = ing.pipeline().drain_up_to(10).into_iter().map(|r| r.seq).collect();
        assert_eq!(seqs, vec![2, 3, 4]);
    }

    #[test]
    fn error_log_file_sink() {
        let dir = std::env::temp_dir().join(format!("gateflow-errlog-{}", std::process::id()));
        let log = ErrorLog::with_file(1, &dir).unwrap();
        for n in 1..=2 {
            log.append(IngestError {
                line_number: n,
                raw_line: "x\"y".into(),
                reason: RejectReason::Arity,
                at: 0,
            });
        }
        assert_eq!(log.total(), 2);
        assert_eq!(log.recent().len(), 1);
        let text = std::fs::read_to_string(&dir).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"raw_line\":\"x\\\"y\""));
        let _ = std::fs::remove_file(dir);
    }

    fn line_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            (0u32..5, 0i64..1000, -10.0f64..10.0, 0i64..9).prop_map(|(d, t, f, i)| format!("d{d},{t},{f},{i}")),
            "[a-z0-9,. ]{0,12}",
        ]
    }

    proptest! {
        #[test]
        fn accepted_equals_linewise_parse(lines in proptest::collection::vec(line_strategy(), 0..30)) {
            let ing = ingestor(None);
            let body = lines.join("\n");
            let report = ing.handle_post(&body);
            prop_assert_eq!(report.lines() as usize, body.lines().count());
            let expected: Vec<Record> = body
                .lines()
                .filter_map(|l| parse_record(l, ing.schema()).ok())
                .collect();
            let got: Vec<Record> = ing
                .pipeline()
                .drain_up_to(usize::MAX)
                .into_iter()
                .map(|mut r| { r.seq = 0; r })
                .collect();
            prop_assert_eq!(got, expected);
        }
    }
}
