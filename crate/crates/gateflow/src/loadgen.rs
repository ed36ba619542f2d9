//! HTTP load generator: replays a CSV file or synthesizes sequence-numbered
//! rows at a paced rate. Lines refused for backpressure are resent.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use gateflow_core::ingest::{epoch_micros, IngestReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    File(PathBuf),
    /// `rows_per_sec` for `duration`, or `total` rows as fast as possible
    /// when `rows_per_sec` is `None`.
    Synthetic {
        rows_per_sec: Option<u64>,
        duration: Option<Duration>,
        total: Option<u64>,
        devices: u32,
    },
}

#[derive(Debug, Clone)]
pub struct LoadgenOptions {
    /// Gateway base URL, e.g. `http://127.0.0.1:8080`.
    pub target: String,
    pub source: Source,
    /// Lines per POST.
    pub batch_lines: usize,
    /// Pacing for file replay; unpaced when `None`.
    pub file_rows_per_sec: Option<u64>,
    /// First sequence number for synthetic rows.
    pub first_seq: u64,
    /// Give up on a line after this long of continuous backpressure.
    pub retry_budget: Duration,
}

impl LoadgenOptions {
    pub fn new(target: impl Into<String>, source: Source) -> Self {
        Self {
            target: target.into(),
            source,
            batch_lines: 1000,
            file_rows_per_sec: None,
            first_seq: 0,
            retry_budget: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadgenReport {
    /// Distinct lines sent at least once.
    pub lines: u64,
    pub accepted: u64,
    pub rejected: u64,
    /// Backpressure refusals, counting each resend.
    pub backpressured: u64,
    /// Lines dropped after the retry budget ran out.
    pub abandoned: u64,
    pub posts: u64,
    pub connection_errors: u64,
    pub elapsed_s: f64,
    pub rows_per_sec: f64,
}

#[derive(Debug, Error)]
pub enum LoadgenError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("http client: {0}")]
    Client(#[from] reqwest::Error),
    #[error("synthetic load needs a rate with a duration, or a total")]
    Unbounded,
}

/// Synthetic row for the default `seq:int,value:float` schema.
pub fn synthetic_line(seq: u64, devices: u32) -> String {
    let device = seq % devices.max(1) as u64;
    let ts = epoch_micros();
    format!("dev{device},{ts},{seq},{}.5", seq % 1000)
}

struct Poster {
    client: reqwest::Client,
    url: String,
    report: LoadgenReport,
    retry_budget: Duration,
}

impl Poster {
    /// Posts `lines` until each one is either accepted or rejected.
    async fn post_all(&mut self, mut lines: Vec<String>) {
        let mut stalled_since: Option<Instant> = None;
        while !lines.is_empty() {
            let body = lines.join("\n");
            self.report.posts += 1;
            let resp = match self.client.post(&self.url).body(body).send().await {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(error = %e, "post failed");
                    self.report.connection_errors += 1;
                    if self.give_up(&mut stalled_since, lines.len()) {
                        return;
                    }
                    tokio::time::sleep(Duration::from_millis(50)).await;
                    continue;
                }
            };
            let report: IngestReport = match resp.bytes().await.map(|b| serde_json::from_slice(&b)) {
                Ok(Ok(r)) => r,
                _ => {
                    self.report.connection_errors += 1;
                    if self.give_up(&mut stalled_since, lines.len()) {
                        return;
                    }
                    continue;
                }
            };
            self.report.accepted += report.accepted;
            self.report.rejected += report.rejected;
            self.report.backpressured += report.backpressured;
            if report.backpressured == 0 {
                return;
            }
            if report.accepted > 0 {
                stalled_since = None;
            }
            if self.give_up(&mut stalled_since, report.retry_lines.len()) {
                return;
            }
            lines = report
                .retry_lines
                .iter()
                .filter_map(|&n| lines.get(n - 1).cloned())
                .collect();
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
    }

    fn give_up(&mut self, stalled_since: &mut Option<Instant>, pending: usize) -> bool {
        let since = *stalled_since.get_or_insert_with(Instant::now);
        if since.elapsed() > self.retry_budget {
            self.report.abandoned += pending as u64;
            return true;
        }
        false
    }
}

pub async fn run(opts: LoadgenOptions) -> Result<LoadgenReport, LoadgenError> {
    let client = reqwest::Client::builder().timeout(Duration::from_secs(30)).build()?;
    let mut poster = Poster {
        client,
        url: format!("{}/ingest", opts.target.trim_end_matches('/')),
        report: LoadgenReport::default(),
        retry_budget: opts.retry_budget,
    };
    let batch = opts.batch_lines.max(1);
    let started = Instant::now();
    match &opts.source {
        Source::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| LoadgenError::Read {
                path: path.clone(),
                source,
            })?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
            for (k, chunk) in lines.chunks(batch).enumerate() {
                if let Some(rate) = opts.file_rows_per_sec {
                    pace(started, (k * batch) as u64, rate).await;
                }
                poster.report.lines += chunk.len() as u64;
                poster.post_all(chunk.iter().map(|s| s.to_string()).collect()).await;
            }
        }
        Source::Synthetic { rows_per_sec, duration, total, devices } => {
            let limit = match (rows_per_sec, duration, total) {
                (_, _, Some(t)) => *t,
                (Some(r), Some(d), None) => (*r as f64 * d.as_secs_f64()).round() as u64,
                _ => return Err(LoadgenError::Unbounded),
            };
            let mut seq = opts.first_seq;
            let mut sent = 0u64;
            while sent < limit {
                let n = match rows_per_sec {
                    Some(rate) => {
                        let due = (*rate as f64 * started.elapsed().as_secs_f64()) as u64;
                        let due = due.min(limit);
                        if due <= sent {
                            tokio::time::sleep(Duration::from_millis(5)).await;
                            continue;
                        }
                        (due - sent).min(batch as u64)
                    }
                    None => (limit - sent).min(batch as u64),
                };
                let lines: Vec<String> = (0..n).map(|i| synthetic_line(seq + i, *devices)).collect();
                seq += n;
                sent += n;
                poster.report.lines += n;
                poster.post_all(lines).await;
            }
        }
    }
    let mut report = poster.report;
    report.elapsed_s = started.elapsed().as_secs_f64();
    if report.elapsed_s > 0.0 {
        report.rows_per_sec = report.accepted as f64 / report.elapsed_s;
    }
    Ok(report)
}

async fn pace(started: Instant, rows_so_far: u64, rate: u64) {
    if rate == 0 {
        return;
    }
    let due = started + Duration::from_secs_f64(rows_so_far as f64 / rate as f64);
    tokio::time::sleep_until(due.into()).await;
}
