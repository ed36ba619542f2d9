#![allow(dead_code)]

use gateflow::config::{GatewayConfig, SegmentSpec};

pub fn segments(n: usize, begin_ms: u64, commit_fixed_ms: u64, commit_per_row_us: u64) -> Vec<SegmentSpec> {
    (0..n)
        .map(|i| SegmentSpec {
            id: format!("seg{i}"),
            host: "127.0.0.1".into(),
            port: 0,
            begin_latency_ms: begin_ms,
            commit_fixed_ms,
            commit_per_row_us,
        })
        .collect()
}

/// Gateway on an ephemeral port for the synthetic `seq:int,value:float` rows.
pub fn gateway_config(segments: Vec<SegmentSpec>) -> GatewayConfig {
    GatewayConfig {
        listen_addr: "127.0.0.1:0".into(),
        schema: vec!["seq:int".into(), "value:float".into()],
        table: "readings".into(),
        interval_ms: 50,
        dispatch_cycle_ms: 10_000,
        max_slots: 16,
        queue_capacity: 100_000,
        listeners: 1,
        ewma_window: 8,
        connect_retries: 2,
        error_log: None,
        segments,
    }
}

/// Third column of a synthetic row.
pub fn seq_of(row: &str) -> u64 {
    row.split(',').nth(2).and_then(|s| s.parse().ok()).unwrap_or_else(|| panic!("no seq in {row:?}"))
}
