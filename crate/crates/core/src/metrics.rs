//! Ingestion speed, scaling efficiency, query latency and live counters.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("ingestion run has no elapsed time; rate is undefined")]
    UndefinedRate,
    #[error("completion time {completion} precedes start {start}")]
    CompletionBeforeStart { start: u64, completion: u64 },
    #[error("scalability needs 1 <= i < j, got i={i} j={j}")]
    NodeOrder { i: u32, j: u32 },
    #[error("baseline speed must be positive, got {0}")]
    NonPositiveSpeed(f64),
    #[error("query end {end} precedes start {start}")]
    NegativeLatency { start: u64, end: u64 },
}

/// One load run: `rows` loaded starting at `started_at_us`, with each segment
/// reporting when its share became queryable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestionRun {
    pub rows: u64,
    pub started_at_us: u64,
    pub completions_us: Vec<u64>,
    pub nodes: u32,
}

impl IngestionRun {
    pub fn elapsed_us(&self) -> Result<u64, MetricsError> {
        if let Some(&bad) = self
            .completions_us
            .iter()
            .find(|&&te| te < self.started_at_us)
        {
            return Err(MetricsError::CompletionBeforeStart {
                start: self.started_at_us,
                completion: bad,
            });
        }
        match self.completions_us.iter().max() {
            Some(&last) if last > self.started_at_us => Ok(last - self.started_at_us),
            _ => Err(MetricsError::UndefinedRate),
        }
    }
}

/// Rows per second: `N / max_i(te_i - ts)`.
pub fn ingestion_speed(run: &IngestionRun) -> Result<f64, MetricsError> {
    let elapsed = run.elapsed_us()?;
    Ok(run.rows as f64 * 1e6 / elapsed as f64)
}

/// Scaling efficiency going from `i` to `j` nodes: `(i * V_j) / (j * V_i)`.
pub fn scalability(i: u32, j: u32, speed_i: f64, speed_j: f64) -> Result<f64, MetricsError> {
    if i == 0 || i >= j {
        return Err(MetricsError::NodeOrder { i, j });
    }
    if speed_i.is_nan() || speed_i <= 0.0 {
        return Err(MetricsError::NonPositiveSpeed(speed_i));
    }
    Ok((i as f64 * speed_j) / (j as f64 * speed_i))
}

/// `de - ds`, both in microseconds.
pub fn query_latency(started_us: u64, answered_us: u64) -> Result<Duration, MetricsError> {
    answered_us
        .checked_sub(started_us)
        .map(Duration::from_micros)
        .ok_or(MetricsError::NegativeLatency {
            start: started_us,
            end: answered_us,
        })
}

/// Live gateway counters.
///
/// Each counter is updated atomically; a snapshot reads them one by one, so
/// there is no consistency guarantee across counters.
#[derive(Debug, Default)]
pub struct Counters {
    pub rows_accepted: AtomicU64,
    pub rows_committed: AtomicU64,
    pub rows_rejected: AtomicU64,
    pub rows_backpressured: AtomicU64,
    pub active_slots: AtomicU64,
    pub slots_activated_total: AtomicU64,
    pub slots_aborted_total: AtomicU64,
    /// Unix epoch milliseconds of the most recent completed commit.
    pub last_commit_ms: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountersSnapshot {
    pub rows_accepted: u64,
    pub rows_committed: u64,
    pub rows_rejected: u64,
    pub rows_backpressured: u64,
    pub active_slots: u64,
    pub slots_activated_total: u64,
    pub slots_aborted_total: u64,
    pub last_commit_ms: u64,
}

impl Counters {
    pub fn add(counter: &AtomicU64, n: u64) {
        counter.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CountersSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CountersSnapshot {
            rows_accepted: get(&self.rows_accepted),
            rows_committed: get(&self.rows_committed),
            rows_rejected: get(&self.rows_rejected),
            rows_backpressured: get(&self.rows_backpressured),
            active_slots: get(&self.active_slots),
            slots_activated_total: get(&self.slots_activated_total),
            slots_aborted_total: get(&self.slots_aborted_total),
            last_commit_ms: get(&self.last_commit_ms),
        }
    }
}

impl CountersSnapshot {
    /// Flat `key=value` lines, one per counter.
    pub fn render(&self) -> String {
        format!(
            "rows_accepted={}\nrows_committed={}\nrows_rejected={}\nrows_backpressured={}\n\
             active_slots={}\nslots_activated_total={}\nslots_aborted_total={}\nlast_commit_ms={}\n",
            self.rows_accepted,
            self.rows_committed,
            self.rows_rejected,
            self.rows_backpressured,
            self.active_slots,
            self.slots_activated_total,
            self.slots_aborted_total,
            self.last_commit_ms,
        )
    }

    /// Inverse of [`render`](Self::render); unknown keys are ignored.
    pub fn parse(text: &str) -> Option<Self> {
        let mut s = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=')?;
            let v: u64 = v.trim().parse().ok()?;
            match k.trim() {
                "rows_accepted" => s.rows_accepted = v,
                "rows_committed" => s.rows_committed = v,
                "rows_rejected" => s.rows_rejected = v,
                "rows_backpressured" => s.rows_backpressured = v,
                "active_slots" => s.active_slots = v,
                "slots_activated_total" => s.slots_activated_total = v,
                "slots_aborted_total" => s.slots_aborted_total = v,
                "last_commit_ms" => s.last_commit_ms = v,
                _ => {}
            }
        }
        Some(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const S: u64 = 1_000_000;

    fn run(rows: u64, ts: u64, te: &[u64]) -> IngestionRun {
        IngestionRun {
            rows,
            started_at_us: ts,
            completions_us: te.to_vec(),
            nodes: 1,
        }
    }

    #[test]
    fn speed_single_segment() {
        let v = ingestion_speed(&run(1_000_000, 10 * S, &[12 * S])).unwrap();
        assert_eq!(v, 500_000.0);
    }

    #[test]
    fn speed_uses_slowest_segment() {
        let ts = 5 * S;
        let v = ingestion_speed(&run(4_000_000, ts, &[ts + S, ts + 2 * S, ts + 4 * S])).unwrap();
        assert_eq!(v, 1_000_000.0);
    }

    #[test]
    fn speed_zero_rows_and_errors() {
        assert_eq!(ingestion_speed(&run(0, 0, &[S])).unwrap(), 0.0);
        assert_eq!(ingestion_speed(&run(5, S, &[S])), Err(MetricsError::UndefinedRate));
        assert_eq!(ingestion_speed(&run(5, S, &[])), Err(MetricsError::UndefinedRate));
        assert!(matches!(
            ingestion_speed(&run(5, 2 * S, &[S, 3 * S])),
            Err(MetricsError::CompletionBeforeStart { .. })
        ));
    }

    #[test]
    fn scalability_reported_ratios() {
        let p13 = scalability(1, 3, 3.75e6, 10.05e6).unwrap();
        assert!((p13 - 0.893).abs() < 0.005, "{p13}");
        let p18 = scalability(1, 8, 1.0, 7.59).unwrap();
        assert!((p18 - 0.949).abs() < 0.005, "{p18}");
        assert_eq!(scalability(2, 6, 1.5, 4.5).unwrap(), 1.0);
    }

    #[test]
    fn scalability_rejects_bad_parameters() {
        assert!(matches!(scalability(3, 3, 1.0, 1.0), Err(MetricsError::NodeOrder { .. })));
        assert!(matches!(scalability(4, 2, 1.0, 1.0), Err(MetricsError::NodeOrder { .. })));
        assert!(matches!(scalability(1, 2, 0.0, 1.0), Err(MetricsError::NonPositiveSpeed(_))));
    }

    #[test]
    fn latency() {
        assert_eq!(query_latency(100_000, 250_000).unwrap(), Duration::from_millis(150));
        assert_eq!(query_latency(7, 7).unwrap(), Duration::ZERO);
        assert!(query_latency(8, 7).is_err());
    }

    #[test]
    fn counters_render_and_parse() {
        let c = Counters::default();
        Counters::add(&c.rows_accepted, 3);
        Counters::add(&c.rows_committed, 2);
        let snap = c.snapshot();
        let text = snap.render();
        assert!(text.starts_with("rows_accepted=3\nrows_committed=2\n"));
        assert_eq!(CountersSnapshot::parse(&text), Some(snap));
    }

    proptest! {
        #[test]
        fn speed_ignores_completion_order(
            rows in 0u64..10_000_000,
            mut te in proptest::collection::vec(1u64..10_000_000, 1..8),
            seed in any::<u64>(),
        ) {
            let a = ingestion_speed(&run(rows, 0, &te)).unwrap();
            let n = te.len();
            te.rotate_left((seed as usize) % n);
            te.reverse();
            prop_assert_eq!(a, ingestion_speed(&run(rows, 0, &te)).unwrap());
        }

        #[test]
        fn scalability_composes(
            vi in 1.0f64..1e7, vj in 1.0f64..1e7, vk in 1.0f64..1e7,
            i in 1u32..4, dj in 1u32..4, dk in 1u32..4,
        ) {
            let j = i + dj;
            let k = j + dk;
            let direct = scalability(i, k, vi, vk).unwrap();
            let chained = scalability(i, j, vi, vj).unwrap() * scalability(j, k, vj, vk).unwrap();
            prop_assert!((direct - chained).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }
}
