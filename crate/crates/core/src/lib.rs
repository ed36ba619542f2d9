//! Core of the gateflow micro-batch ingestion gateway: the lock-free record
//! pipeline, slot state machines, the pool scheduler, the segment protocol,
//! metrics and a discrete-event simulator.

pub mod clock;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod proto;
pub mod record;
pub mod scheduler;
pub mod segment;
pub mod sim;
pub mod slot;

pub use ingest::{IngestReport, Ingestor};
pub use pipeline::{EnqueueResult, LockFreeQueue};
pub use record::{Record, Schema};
pub use scheduler::{optimal_slots, Action, Input, PoolMode, Scheduler, SchedulerConfig};
pub use slot::{Slot, SlotId, SlotPhase};
