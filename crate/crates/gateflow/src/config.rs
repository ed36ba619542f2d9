//! TOML configuration shared by `serve` and `segmentd`.
//!
//! ```toml
//! listen_addr = "127.0.0.1:8080"
//! schema = ["temperature:float", "status:int"]
//! table = "readings"
//! interval_ms = 100
//!
//! [[segments]]
//! id = "seg0"
//! host = "127.0.0.1"
//! port = 7000
//! commit_per_row_us = 5
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use gateflow_core::record::Schema;
use gateflow_core::segment::{LatencyModel, SegmentEndpoint};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub id: String,
    #[serde(default = "default_host")]
    pub host: String,
    pub port: u16,
    #[serde(default)]
    pub begin_latency_ms: u64,
    #[serde(default)]
    pub commit_fixed_ms: u64,
    #[serde(default)]
    pub commit_per_row_us: u64,
}

impl SegmentSpec {
    pub fn endpoint(&self) -> SegmentEndpoint {
        SegmentEndpoint::new(&self.id, &self.host, self.port)
    }

    pub fn latency(&self) -> LatencyModel {
        LatencyModel {
            begin_latency_ms: self.begin_latency_ms,
            commit_fixed_ms: self.commit_fixed_ms,
            commit_per_row_us: self.commit_per_row_us,
        }
    }
}

fn default_host() -> String {
    "127.0.0.1".into()
}
fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_table() -> String {
    "readings".into()
}
fn default_interval() -> u64 {
    100
}
fn default_cycle() -> u64 {
    10_000
}
fn default_max_slots() -> usize {
    16
}
fn default_queue() -> usize {
    100_000
}
fn default_listeners() -> usize {
    4
}
fn default_window() -> usize {
    8
}
fn default_retries() -> u32 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen_addr: String,
    /// Measurement columns as `name:type`; every row is prefixed with
    /// `device_id,timestamp`.
    pub schema: Vec<String>,
    #[serde(default = "default_table")]
    pub table: String,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    #[serde(default = "default_cycle")]
    pub dispatch_cycle_ms: u64,
    #[serde(default = "default_max_slots")]
    pub max_slots: usize,
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
    /// Worker threads serving HTTP and slots.
    #[serde(default = "default_listeners")]
    pub listeners: usize,
    #[serde(default = "default_window")]
    pub ewma_window: usize,
    /// Attempts per segment at startup before giving up.
    #[serde(default = "default_retries")]
    pub connect_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_log: Option<PathBuf>,
    pub segments: Vec<SegmentSpec>,
}

impl GatewayConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn parsed_schema(&self) -> Result<Schema, ConfigError> {
        Schema::try_from(self.schema.clone()).map_err(|e| invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.interval_ms == 0 {
            return Err(invalid("interval_ms must be positive"));
        }
        if self.dispatch_cycle_ms < self.interval_ms {
            return Err(invalid("dispatch_cycle_ms must be at least interval_ms"));
        }
        if self.max_slots == 0 {
            return Err(invalid("max_slots must be at least 1"));
        }
        if self.queue_capacity == 0 {
            return Err(invalid("queue_capacity must be positive"));
        }
        if self.listeners == 0 {
            return Err(invalid("listeners must be at least 1"));
        }
        if self.table.is_empty() || self.table.contains(char::is_whitespace) {
            return Err(invalid("table must be a single word"));
        }
        self.parsed_schema()?;
        validate_segments(&self.segments)
    }
}

/// Configuration read by `segmentd`. Accepts the gateway file as is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentdConfig {
    pub segments: Vec<SegmentSpec>,
    /// Directory for per-segment committed-row dumps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl SegmentdConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        validate_segments(&cfg.segments)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn validate_segments(segments: &[SegmentSpec]) -> Result<(), ConfigError> {
    if segments.is_empty() {
        return Err(invalid("at least one segment is required"));
    }
    let mut ids = HashSet::new();
    let mut addrs = HashSet::new();
    for s in segments {
        if s.id.is_empty() || s.id.contains(char::is_whitespace) {
            return Err(invalid(format!("bad segment id {:?}", s.id)));
        }
        if !ids.insert(&s.id) {
            return Err(invalid(format!("duplicate segment id {}", s.id)));
        }
        if s.port != 0 && !addrs.insert((&s.host, s.port)) {
            return Err(invalid(format!("duplicate segment address {}:{}", s.host, s.port)));
        }
    }
    Ok(())
}
