//! Runnable pieces of the gateway: configuration, the HTTP/TCP runtime, a
//! mock segment daemon, a load generator and the scalability bench.

pub mod bench;
pub mod config;
pub mod gateway;
pub mod loadgen;
pub mod segmentd;

pub use config::{GatewayConfig, SegmentSpec};
pub use gateway::Gateway;
pub use segmentd::SegmentDaemon;
