//! Scalability benchmark: for each node count, start that many independent
//! gateway + segment groups in process, load every node with the same
//! number of rows, and measure aggregate ingestion speed.

use std::path::Path;
use std::time::{Duration, Instant};

use gateflow_core::ingest::epoch_micros;
use gateflow_core::metrics::{ingestion_speed, scalability, IngestionRun};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, GatewayConfig, SegmentSpec};
use crate::gateway::Gateway;
use crate::loadgen::{self, LoadgenOptions, Source};
use crate::segmentd::{DaemonOptions, SegmentDaemon};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCost {
    #[serde(default)]
    pub begin_latency_ms: u64,
    #[serde(default)]
    pub commit_fixed_ms: u64,
    pub commit_per_row_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchScenario {
    /// Node counts to run, strictly increasing.
    pub nodes: Vec<u32>,
    pub rows_per_node: u64,
    #[serde(default = "default_segments")]
    pub segments_per_node: usize,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    #[serde(default = "default_max_slots")]
    pub max_slots: usize,
    /// Defaults to `rows_per_node`, so loading never backpressures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_capacity: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_lines: usize,
    #[serde(default = "default_devices")]
    pub devices: u32,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    pub segment: SegmentCost,
}

fn default_segments() -> usize {
    2
}
fn default_interval() -> u64 {
    50
}
fn default_max_slots() -> usize {
    32
}
fn default_batch() -> usize {
    2000
}
fn default_devices() -> u32 {
    1000
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl BenchScenario {
    pub fn parse(text: &str) -> Result<Self, BenchError> {
        let s: Self = toml::from_str(text).map_err(ConfigError::from)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.nodes.is_empty() {
            return bad("nodes must not be empty");
        }
        if self.nodes[0] == 0 {
            return bad("node counts must be at least 1");
        }
        if self.nodes.windows(2).any(|w| w[0] >= w[1]) {
            return bad("node counts must be strictly increasing");
        }
        if self.rows_per_node == 0 || self.segments_per_node == 0 || self.interval_ms == 0 {
            return bad("rows_per_node, segments_per_node and interval_ms must be positive");
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization.
    pub fn config_hash(&self) -> String {
        let canonical = toml::to_string(self).expect("scenario serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub nodes: u32,
    pub rows: u64,
    pub elapsed_s: f64,
    pub rows_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub i: u32,
    pub j: u32,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub runs: Vec<RunResult>,
    pub scalability: Vec<Efficiency>,
}

impl BenchReport {
    pub fn efficiency(&self, i: u32, j: u32) -> Option<f64> {
        self.scalability.iter().find(|e| e.i == i && e.j == j).map(|e| e.p)
    }
}

pub async fn run_bench(scenario: &BenchScenario) -> BenchReport {
    let mut report = BenchReport {
        config_hash: scenario.config_hash(),
        complete: false,
        error: None,
        runs: Vec::new(),
        scalability: Vec::new(),
    };
    for &n in &scenario.nodes {
        match run_nodes(scenario, n).await {
            Ok(run) => {
                tracing::info!(nodes = n, rows_per_sec = run.rows_per_sec, "bench run done");
                report.runs.push(run);
            }
            Err(e) => {
                report.error = Some(format!("{n} nodes: {e}"));
                break;
            }
        }
    }
    for (a, ra) in report.runs.iter().enumerate() {
        for rb in &report.runs[a + 1..] {
            if let Ok(p) = scalability(ra.nodes, rb.nodes, ra.rows_per_sec, rb.rows_per_sec) {
                report.scalability.push(Efficiency { i: ra.nodes, j: rb.nodes, p });
            }
        }
    }
    report.complete = report.error.is_none();
    report
}

struct Node {
    daemon: SegmentDaemon,
    gateway: Gateway,
}

async fn run_nodes(s: &BenchScenario, n: u32) -> Result<RunResult, String> {
    let mut nodes = Vec::new();
    for k in 0..n {
        let specs: Vec<SegmentSpec> = (0..s.segments_per_node)
            .map(|i| SegmentSpec {
                id: format!("n{k}s{i}"),
                host: "127.0.0.1".into(),
                port: 0,
                begin_latency_ms: s.segment.begin_latency_ms,
                commit_fixed_ms: s.segment.commit_fixed_ms,
                commit_per_row_us: s.segment.commit_per_row_us,
            })
            .collect();
        let daemon = SegmentDaemon::start(&specs, DaemonOptions::default(), None)
            .await
            .map_err(|e| e.to_string())?;
        let cfg = GatewayConfig {
            listen_addr: "127.0.0.1:0".into(),
            schema: vec!["seq:int".into(), "value:float".into()],
            table: "bench".into(),
            interval_ms: s.interval_ms,
            dispatch_cycle_ms: 10_000.max(s.interval_ms),
            max_slots: s.max_slots,
            queue_capacity: s.queue_capacity.unwrap_or(s.rows_per_node as usize),
            listeners: 1,
            ewma_window: 8,
            connect_retries: 3,
            error_log: None,
            segments: daemon.specs(),
        };
        let gateway = Gateway::start(cfg).await.map_err(|e| e.to_string())?;
        nodes.push(Node { daemon, gateway });
    }

    let started_at_us = epoch_micros();
    let mut loaders = Vec::new();
    for (k, node) in nodes.iter().enumerate() {
        let mut opts = LoadgenOptions::new(
            format!("http://{}", node.gateway.addr()),
            Source::Synthetic { rows_per_sec: None, duration: None, total: Some(s.rows_per_node), devices: s.devices },
        );
        opts.batch_lines = s.batch_lines;
        opts.first_seq = k as u64 * s.rows_per_node;
        loaders.push(tokio::spawn(loadgen::run(opts)));
    }
    for l in loaders {
        let r = l.await.map_err(|e| e.to_string())?.map_err(|e| e.to_string())?;
        if r.accepted != s.rows_per_node {
            return Err(format!("loadgen accepted {} of {} rows", r.accepted, s.rows_per_node));
        }
    }

    let deadline = Instant::now() + Duration::from_secs(s.timeout_s);
    while nodes.iter().any(|nd| nd.daemon.committed_rows_total() < s.rows_per_node) {
        if Instant::now() >= deadline {
            return Err("timed out waiting for commits".into());
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let run = IngestionRun {
        rows: s.rows_per_node * n as u64,
        started_at_us,
        completions_us: nodes.iter().filter_map(|nd| nd.daemon.last_commit_at_us()).collect(),
        nodes: n,
    };
    let speed = ingestion_speed(&run).map_err(|e| e.to_string())?;
    let elapsed = run.elapsed_us().map_err(|e| e.to_string())?;
    for node in nodes {
        node.gateway.shutdown().await;
        node.daemon.shutdown();
    }
    Ok(RunResult {
        nodes: n,
        rows: run.rows,
        elapsed_s: elapsed as f64 / 1e6,
        rows_per_sec: speed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENARIO: &str = r#"
nodes = [1, 2]
rows_per_node = 1000

[segment]
commit_per_row_us = 10
"#;

    #[test]
    fn parses_with_defaults_and_hashes_stably() {
        let s = BenchScenario::parse(SCENARIO).unwrap();
        assert_eq!(s.segments_per_node, 2);
        assert_eq!(s.config_hash().len(), 64);
        assert_eq!(s.config_hash(), BenchScenario::parse(SCENARIO).unwrap().config_hash());
        let other = SCENARIO.replace("1000", "1001");
        assert_ne!(s.config_hash(), BenchScenario::parse(&other).unwrap().config_hash());
    }

    #[test]
    fn node_order_is_enforced() {
        for bad in ["[2, 1]", "[1, 1]", "[]", "[0, 1]"] {
            let text = SCENARIO.replace("[1, 2]", bad);
            assert!(BenchScenario::parse(&text).is_err(), "{bad}");
        }
    }
}
