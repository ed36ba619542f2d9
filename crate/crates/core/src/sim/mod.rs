//! Discrete-event simulation of the slot pool on a virtual clock.
//!
//! The simulator drives the real [`Scheduler`] and real [`Slot`] state
//! machines against latency-model segments. Time is integer microseconds.
//! Arrivals are generated once per quantum; at every instant the simulator
//! first applies arrivals, then delivers due slot events, then ticks the
//! scheduler, repeating until nothing more happens at that instant.

mod arrivals;
mod gantt;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use arrivals::RateStep;
pub use gantt::{render_gantt, render_gantt_with, GanttOptions};

use crate::scheduler::{
    optimal_slots, Action, Input, PoolMode, Scheduler, SchedulerConfig, SchedulerError, Strategy,
};
use crate::segment::SegmentEndpoint;
use crate::slot::{Cause, CommitOutcome, Slot, SlotId, SlotPhase};
use arrivals::Arrivals;

const TABLE: &str = "sim";

/// Commit cost: a fixed part plus a per-row part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitModel {
    pub fixed_us: u64,
    #[serde(default)]
    pub per_row_ns: u64,
}

impl CommitModel {
    pub fn fixed(us: u64) -> Self {
        Self { fixed_us: us, per_row_ns: 0 }
    }

    pub fn latency_us(&self, rows: u64) -> u64 {
        self.fixed_us + rows * self.per_row_ns / 1000
    }
}

fn default_quantum() -> u64 {
    1000
}
fn default_cycle() -> u64 {
    10_000_000
}
fn default_max_slots() -> usize {
    64
}
fn default_window() -> usize {
    8
}
fn default_pool() -> PoolMode {
    PoolMode::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Send interval t_d.
    pub interval_us: u64,
    /// Transaction start latency t_s.
    pub start_us: u64,
    pub commit: CommitModel,
    pub arrivals: Vec<RateStep>,
    pub duration_us: u64,
    #[serde(default)]
    pub seed: u64,
    /// Draw Poisson counts instead of the deterministic fluid.
    #[serde(default)]
    pub poisson: bool,
    /// Arrival granularity; also the scheduler tick period.
    #[serde(default = "default_quantum")]
    pub quantum_us: u64,
    #[serde(default = "default_cycle")]
    pub dispatch_cycle_us: u64,
    #[serde(default = "default_max_slots")]
    pub max_slots: usize,
    #[serde(default = "default_window")]
    pub ewma_window: usize,
    #[serde(default = "default_pool")]
    pub pool: PoolMode,
}

impl SimConfig {
    /// Constant `rows_per_sec` arrivals with a fixed commit latency, all
    /// times in milliseconds.
    pub fn steady(t_d_ms: u64, t_s_ms: u64, t_c_ms: u64, rows_per_sec: u64, duration_ms: u64) -> Self {
        Self {
            interval_us: t_d_ms * 1000,
            start_us: t_s_ms * 1000,
            commit: CommitModel::fixed(t_c_ms * 1000),
            arrivals: vec![RateStep { at_us: 0, rows_per_sec }],
            duration_us: duration_ms * 1000,
            seed: 0,
            poisson: false,
            quantum_us: default_quantum(),
            dispatch_cycle_us: default_cycle().max(t_d_ms * 1000),
            max_slots: default_max_slots(),
            ewma_window: default_window(),
            pool: PoolMode::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.quantum_us == 0 {
            return Err(SimError::ZeroQuantum);
        }
        if self.duration_us == 0 {
            return Err(SimError::ZeroDuration);
        }
        if self.arrivals.windows(2).any(|w| w[0].at_us >= w[1].at_us) {
            return Err(SimError::UnsortedArrivals);
        }
        self.scheduler_config().validate()?;
        Ok(())
    }

    fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            interval_us: self.interval_us,
            dispatch_cycle_us: self.dispatch_cycle_us,
            max_slots: self.max_slots,
            ewma_window: self.ewma_window,
            pool: self.pool,
        }
    }

    /// Pool size for the highest configured rate.
    pub fn optimal_slots(&self) -> u64 {
        let peak = self.arrivals.iter().map(|s| s.rows_per_sec).max().unwrap_or(0);
        let rows = peak * self.interval_us / 1_000_000;
        optimal_slots(self.interval_us, self.start_us, self.commit.latency_us(rows)).unwrap_or(1)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("quantum must be positive")]
    ZeroQuantum,
    #[error("duration must be positive")]
    ZeroDuration,
    #[error("arrival steps must be strictly increasing in time")]
    UnsortedArrivals,
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimEventKind {
    Activated,
    Dispatched,
    Aborted,
    Transition { from: SlotPhase, to: SlotPhase, cause: Cause },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at_us: u64,
    pub slot: SlotId,
    pub kind: SimEventKind,
}

/// One committed micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub slot: SlotId,
    pub rows: u64,
    pub send_started_us: u64,
    pub send_ended_us: u64,
    pub committed_us: u64,
    /// Arrival time of the oldest row; `None` for an empty batch.
    pub oldest_arrival_us: Option<u64>,
}

impl BatchRecord {
    /// Arrival-to-visibility time of the batch's oldest row.
    pub fn latency_us(&self) -> Option<u64> {
        self.oldest_arrival_us.map(|a| self.committed_us - a)
    }
}

/// A stretch of time during which data was waiting and no slot was sending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub start_us: u64,
    pub end_us: u64,
}

/// A scheduler input and the actions it produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub input: Input,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub slot: SlotId,
    pub phase: SlotPhase,
    pub start_us: u64,
    pub end_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub strategy: Strategy,
    pub interval_us: u64,
    pub duration_us: u64,
    pub events: Vec<SimEvent>,
    /// Live slots at each interval boundary `k * interval_us`.
    pub slot_counts: Vec<u32>,
    pub batches: Vec<BatchRecord>,
    pub gaps: Vec<Gap>,
    pub rows_arrived: u64,
    pub rows_committed: u64,
    /// Arrived but not committed when the run ended.
    pub rows_in_flight: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub decisions: Vec<Decision>,
}

impl SimTrace {
    pub fn activations(&self) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(|e| e.kind == SimEventKind::Activated)
    }

    pub fn aborts(&self) -> impl Iterator<Item = &SimEvent> {
        self.events.iter().filter(|e| e.kind == SimEventKind::Aborted)
    }

    /// Per-slot phase intervals reconstructed from the events. Phases still
    /// open at the end of the run are closed at `duration_us`.
    pub fn phase_spans(&self) -> Vec<Span> {
        let mut open: BTreeMap<SlotId, (SlotPhase, u64)> = BTreeMap::new();
        let mut spans = Vec::new();
        for e in &self.events {
            match e.kind {
                SimEventKind::Activated => {
                    open.insert(e.slot, (SlotPhase::Connect, e.at_us));
                }
                SimEventKind::Transition { from, to, .. } => {
                    if let Some((phase, start)) = open.remove(&e.slot) {
                        debug_assert_eq!(phase, from);
                        spans.push(Span { slot: e.slot, phase, start_us: start, end_us: e.at_us });
                    }
                    if to != SlotPhase::Retired {
                        open.insert(e.slot, (to, e.at_us));
                    }
                }
                _ => {}
            }
        }
        for (slot, (phase, start)) in open {
            spans.push(Span { slot, phase, start_us: start, end_us: self.duration_us.max(start) });
        }
        spans.sort_by_key(|s| (s.slot, s.start_us));
        spans
    }

    /// Send intervals in start order.
    pub fn send_spans(&self) -> Vec<Span> {
        let mut v: Vec<Span> = self.phase_spans().into_iter().filter(|s| s.phase == SlotPhase::Send).collect();
        v.sort_by_key(|s| (s.start_us, s.slot));
        v
    }

    /// Mean batch latency over non-empty batches whose Send started at or
    /// after `from_us`.
    pub fn mean_latency_us(&self, from_us: u64) -> Option<f64> {
        let lat: Vec<u64> = self
            .batches
            .iter()
            .filter(|b| b.send_started_us >= from_us)
            .filter_map(BatchRecord::latency_us)
            .collect();
        (!lat.is_empty()).then(|| lat.iter().sum::<u64>() as f64 / lat.len() as f64)
    }

    /// Gaps that end after `from_us`.
    pub fn gaps_after(&self, from_us: u64) -> impl Iterator<Item = &Gap> {
        self.gaps.iter().filter(move |g| g.end_us > from_us)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Ready(SlotId),
    SendEnd(SlotId),
    CommitDone(SlotId),
}

struct InFlight {
    rows: u64,
    oldest: Option<u64>,
    send_started: u64,
    send_ended: u64,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    sched: Scheduler,
    slots: BTreeMap<SlotId, Slot>,
    synced: BTreeMap<SlotId, usize>,
    queue: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    seq: u64,
    txn_counter: u64,
    pending: VecDeque<(u64, u64)>,
    in_flight: BTreeMap<SlotId, InFlight>,
    segments: Vec<SegmentEndpoint>,
    trace: SimTrace,
    gap_open: Option<u64>,
}

/// Runs the slot pool under `config` and returns the full trace.
///
/// Panics if the run breaks an invariant (two senders at once, an illegal
/// phase transition); such a panic names the offending event.
pub fn run_sim(config: &SimConfig) -> Result<SimTrace, SimError> {
    config.validate()?;
    let mut sim = Sim {
        cfg: config,
        sched: Scheduler::new(config.scheduler_config())?,
        slots: BTreeMap::new(),
        synced: BTreeMap::new(),
        queue: BinaryHeap::new(),
        seq: 0,
        txn_counter: 0,
        pending: VecDeque::new(),
        in_flight: BTreeMap::new(),
        segments: vec![SegmentEndpoint::new("sim-0", "sim", 0)],
        trace: SimTrace {
            strategy: Strategy::Gate,
            interval_us: config.interval_us,
            duration_us: config.duration_us,
            events: Vec::new(),
            slot_counts: Vec::new(),
            batches: Vec::new(),
            gaps: Vec::new(),
            rows_arrived: 0,
            rows_committed: 0,
            rows_in_flight: 0,
            decisions: Vec::new(),
        },
        gap_open: None,
    };
    sim.run();
    Ok(sim.finish())
}

impl Sim<'_> {
    fn run(&mut self) {
        let mut arrivals = Arrivals::new(&self.cfg.arrivals, self.cfg.poisson, self.cfg.seed);
        let q = self.cfg.quantum_us;
        let mut next_quantum = 0u64;
        let mut now = 0u64;
        loop {
            let mut t = next_quantum;
            if let Some(Reverse((at, _, _))) = self.queue.peek() {
                t = t.min(*at);
            }
            if let Some(d) = self.sched.next_deadline(now) {
                t = t.min(d);
            }
            if t > self.cfg.duration_us {
                break;
            }
            now = t;
            if t == next_quantum {
                let rows = if t == 0 { 0 } else { arrivals.rows_between(t - q, t) };
                if rows > 0 {
                    self.pending.push_back((t, rows));
                    self.trace.rows_arrived += rows;
                }
                next_quantum += q;
            }
            loop {
                while let Some(&Reverse((at, _, ev))) = self.queue.peek() {
                    if at != t {
                        break;
                    }
                    self.queue.pop();
                    self.deliver(ev, t);
                }
                let input = Input::Tick { now: t, pipeline_nonempty: !self.pending.is_empty() };
                self.feed(input, t);
                if !matches!(self.queue.peek(), Some(Reverse((at, _, _))) if *at == t) {
                    break;
                }
            }
            self.track_gap(t);
        }
        if let Some(start) = self.gap_open.take() {
            self.trace.gaps.push(Gap { start_us: start, end_us: self.cfg.duration_us });
        }
    }

    fn finish(mut self) -> SimTrace {
        self.trace.rows_in_flight = self.trace.rows_arrived - self.trace.rows_committed;
        let d = self.cfg.interval_us;
        let mut counts = Vec::new();
        let mut k = 0u64;
        while k * d <= self.cfg.duration_us {
            let t = k * d;
            let live = self
                .trace
                .events
                .iter()
                .take_while(|e| e.at_us <= t)
                .fold(0i64, |n, e| match e.kind {
                    SimEventKind::Activated => n + 1,
                    SimEventKind::Transition { to: SlotPhase::Retired, .. } => n - 1,
                    _ => n,
                });
            counts.push(live as u32);
            k += 1;
        }
        self.trace.slot_counts = counts;
        self.trace
    }

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, ev)));
    }

    fn event(&mut self, at_us: u64, slot: SlotId, kind: SimEventKind) {
        self.trace.events.push(SimEvent { at_us, slot, kind });
    }

    /// Copies new slot transitions into the trace, checking each against the
    /// phase table.
    fn sync(&mut self, id: SlotId) {
        let slot = &self.slots[&id];
        let seen = self.synced.entry(id).or_insert(0);
        let fresh: Vec<_> = slot.history()[*seen..].to_vec();
        *seen = slot.history().len();
        for tr in fresh {
            assert!(
                tr.from.allows(tr.to, tr.cause),
                "simulation fault: illegal transition {tr:?}"
            );
            self.event(tr.at_us, id, SimEventKind::Transition { from: tr.from, to: tr.to, cause: tr.cause });
        }
    }

    fn slot(&mut self, id: SlotId) -> &mut Slot {
        self.slots.get_mut(&id).expect("simulation fault: unknown slot")
    }

    fn connect(&mut self, id: SlotId, t: u64) {
        self.txn_counter += 1;
        let txn = format!("s{id}-{}", self.txn_counter);
        let segments = self.segments.clone();
        self.slot(id)
            .begin_connect(segments, txn, TABLE)
            .expect("simulation fault: begin_connect");
        let at = t + self.cfg.start_us;
        self.schedule(at, Ev::Ready(id));
    }

    fn feed(&mut self, input: Input, t: u64) {
        let actions = self.sched.handle(input);
        self.trace.decisions.push(Decision { input, actions: actions.clone() });
        for a in actions {
            self.apply(a, t);
        }
    }

    fn apply(&mut self, action: Action, t: u64) {
        match action {
            Action::ActivateSlot(id) => {
                self.slots.insert(id, Slot::new(id, t));
                self.event(t, id, SimEventKind::Activated);
                self.connect(id, t);
            }
            Action::DispatchSender(id) => {
                if let Some(other) = self.slots.values().find(|s| s.phase() == SlotPhase::Send) {
                    panic!("simulation fault: slot {id} dispatched at {t} while slot {} sends", other.id());
                }
                self.slot(id).dispatch(t).expect("simulation fault: dispatch");
                self.event(t, id, SimEventKind::Dispatched);
                self.sync(id);
                self.in_flight.insert(
                    id,
                    InFlight { rows: 0, oldest: None, send_started: t, send_ended: t },
                );
                self.schedule(t + self.cfg.interval_us, Ev::SendEnd(id));
            }
            Action::AbortSlot(id) => {
                let slot = self.slot(id);
                match slot.phase() {
                    SlotPhase::Wait => {
                        slot.abort(t).expect("simulation fault: abort");
                    }
                    SlotPhase::Commit => {
                        let txn = slot.txn_id().expect("committing slot has a txn").to_string();
                        let out = slot.on_commit_ack(&txn, true, t).expect("simulation fault: commit ack");
                        debug_assert_eq!(out, CommitOutcome::Retired);
                    }
                    p => panic!("simulation fault: abort of slot {id} in {p}"),
                }
                self.event(t, id, SimEventKind::Aborted);
                self.sync(id);
            }
            Action::Reconnect(id) => {
                let slot = self.slot(id);
                let txn = slot.txn_id().expect("committing slot has a txn").to_string();
                slot.on_commit_ack(&txn, false, t).expect("simulation fault: commit ack");
                self.sync(id);
                self.connect(id, t);
            }
        }
    }

    fn deliver(&mut self, ev: Ev, t: u64) {
        match ev {
            Ev::Ready(id) => {
                let slot = self.slot(id);
                let txn = slot.pending_txn().expect("connecting slot has a txn").to_string();
                slot.segment_ready(0, &txn, t).expect("simulation fault: ready");
                self.sync(id);
                self.feed(Input::Ready { slot: id, now: t }, t);
            }
            Ev::SendEnd(id) => {
                let mut rows = 0;
                let mut oldest = None;
                while let Some(&(at, n)) = self.pending.front() {
                    if at >= t {
                        break;
                    }
                    oldest.get_or_insert(at);
                    rows += n;
                    self.pending.pop_front();
                }
                let slot = self.slot(id);
                slot.account_rows(rows).expect("simulation fault: send");
                slot.finish_send(t).expect("simulation fault: finish send");
                self.sync(id);
                let f = self.in_flight.get_mut(&id).expect("sending slot tracked");
                f.rows = rows;
                f.oldest = oldest;
                f.send_ended = t;
                self.feed(Input::SendEnded { slot: id, rows, now: t }, t);
                self.schedule(t + self.cfg.commit.latency_us(rows), Ev::CommitDone(id));
            }
            Ev::CommitDone(id) => {
                let slot = self.slot(id);
                let txn = slot.txn_id().expect("committing slot has a txn").to_string();
                let rows = slot.batch_row_count();
                slot.segment_committed(0, &txn, rows).expect("simulation fault: commit");
                let f = self.in_flight.remove(&id).expect("committing slot tracked");
                self.trace.rows_committed += f.rows;
                self.trace.batches.push(BatchRecord {
                    slot: id,
                    rows: f.rows,
                    send_started_us: f.send_started,
                    send_ended_us: f.send_ended,
                    committed_us: t,
                    oldest_arrival_us: f.oldest,
                });
                self.feed(Input::CommitAcked { slot: id, now: t }, t);
            }
        }
    }

    fn track_gap(&mut self, t: u64) {
        let waiting = !self.pending.is_empty() && self.sched.current_sender().is_none();
        match (waiting, self.gap_open) {
            (true, None) => self.gap_open = Some(t),
            (false, Some(start)) => {
                if t > start {
                    self.trace.gaps.push(Gap { start_us: start, end_us: t });
                }
                self.gap_open = None;
            }
            _ => {}
        }
    }
}

/// Collect-then-load baseline: each batch opens its transaction only when
/// the previous Send ends, so every Send is preceded by a full t_s during
/// which data waits.
pub fn run_naive(config: &SimConfig) -> Result<SimTrace, SimError> {
    config.validate()?;
    let mut arrivals = Arrivals::new(&config.arrivals, config.poisson, config.seed);
    let (d, s, q) = (config.interval_us, config.start_us, config.quantum_us);
    let mut trace = SimTrace {
        strategy: Strategy::Naive,
        interval_us: d,
        duration_us: config.duration_us,
        events: Vec::new(),
        slot_counts: Vec::new(),
        batches: Vec::new(),
        gaps: Vec::new(),
        rows_arrived: 0,
        rows_committed: 0,
        rows_in_flight: 0,
        decisions: Vec::new(),
    };
    let mut pending: VecDeque<(u64, u64)> = VecDeque::new();
    let mut t_quantum = q;
    let mut id: SlotId = 0;
    let mut connect_at = 0u64;
    loop {
        id += 1;
        let send_start = connect_at + s;
        let send_end = send_start + d;
        if send_end > config.duration_us {
            break;
        }
        while t_quantum < send_end {
            let rows = arrivals.rows_between(t_quantum - q, t_quantum);
            if rows > 0 {
                pending.push_back((t_quantum, rows));
                trace.rows_arrived += rows;
            }
            t_quantum += q;
        }
        let mut rows = 0;
        let mut oldest = None;
        while let Some(&(at, n)) = pending.front() {
            if at >= send_end {
                break;
            }
            oldest.get_or_insert(at);
            rows += n;
            pending.pop_front();
        }
        let committed = send_end + config.commit.latency_us(rows);
        let ev = |at_us, kind| SimEvent { at_us, slot: id, kind };
        let tr = |from, to| SimEventKind::Transition { from, to, cause: Cause::Cycle };
        trace.events.push(ev(connect_at, SimEventKind::Activated));
        trace.events.push(ev(send_start, tr(SlotPhase::Connect, SlotPhase::Wait)));
        trace.events.push(ev(send_start, SimEventKind::Dispatched));
        trace.events.push(ev(send_start, tr(SlotPhase::Wait, SlotPhase::Send)));
        trace.events.push(ev(send_end, tr(SlotPhase::Send, SlotPhase::Commit)));
        if committed <= config.duration_us {
            trace.events.push(SimEvent {
                at_us: committed,
                slot: id,
                kind: SimEventKind::Transition { from: SlotPhase::Commit, to: SlotPhase::Retired, cause: Cause::Cycle },
            });
            trace.rows_committed += rows;
            trace.batches.push(BatchRecord {
                slot: id,
                rows,
                send_started_us: send_start,
                send_ended_us: send_end,
                committed_us: committed,
                oldest_arrival_us: oldest,
            });
        }
        if s > 0 && oldest.is_some_and(|a| a < send_start) {
            trace.gaps.push(Gap { start_us: connect_at, end_us: send_start });
        }
        connect_at = send_end;
    }
    trace.events.sort_by_key(|e| e.at_us);
    trace.rows_in_flight = trace.rows_arrived - trace.rows_committed;
    Ok(trace)
}

/// Mean arrival-to-commit latency of both strategies on the same input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub naive_mean_us: f64,
    pub gate_mean_us: f64,
    pub naive_batches: usize,
    pub gate_batches: usize,
    /// Batches whose Send started before this were excluded.
    pub warmup_us: u64,
}

/// Runs both strategies and averages batch latency after the pool has had
/// time to settle.
pub fn compare_strategies(config: &SimConfig) -> Result<StrategyComparison, SimError> {
    let naive = run_naive(config)?;
    let gate = run_sim(config)?;
    let peak = config.arrivals.iter().map(|s| s.rows_per_sec).max().unwrap_or(0);
    let t_c = config.commit.latency_us(peak * config.interval_us / 1_000_000);
    let warmup_us = (config.optimal_slots() + 3) * config.interval_us + config.start_us + t_c;
    let count = |t: &SimTrace| {
        t.batches
            .iter()
            .filter(|b| b.send_started_us >= warmup_us && b.oldest_arrival_us.is_some())
            .count()
    };
    Ok(StrategyComparison {
        naive_mean_us: naive.mean_latency_us(warmup_us).unwrap_or(f64::NAN),
        gate_mean_us: gate.mean_latency_us(warmup_us).unwrap_or(f64::NAN),
        naive_batches: count(&naive),
        gate_batches: count(&gate),
        warmup_us,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs() {
        let mut c = SimConfig::steady(100, 50, 150, 1000, 1000);
        c.quantum_us = 0;
        assert_eq!(run_sim(&c).unwrap_err(), SimError::ZeroQuantum);
        let mut c = SimConfig::steady(100, 50, 150, 1000, 1000);
        c.arrivals.push(RateStep { at_us: 0, rows_per_sec: 1 });
        assert_eq!(run_sim(&c).unwrap_err(), SimError::UnsortedArrivals);
        let c = SimConfig::steady(0, 50, 150, 1000, 1000);
        assert!(matches!(run_sim(&c), Err(SimError::Scheduler(_))));
    }

    #[test]
    fn headline_pool_settles_at_three() {
        let trace = run_sim(&SimConfig::steady(100, 50, 150, 10_000, 3000)).unwrap();
        assert!(trace.slot_counts[5..].iter().all(|&n| n == 3), "{:?}", trace.slot_counts);
        assert_eq!(trace.aborts().count(), 0);
    }

    #[test]
    fn no_rows_are_lost() {
        let mut c = SimConfig::steady(100, 30, 80, 7000, 5000);
        c.poisson = true;
        c.seed = 11;
        let t = run_sim(&c).unwrap();
        let committed: u64 = t.batches.iter().map(|b| b.rows).sum();
        assert_eq!(committed, t.rows_committed);
        assert_eq!(t.rows_arrived, t.rows_committed + t.rows_in_flight);
        assert!(t.rows_in_flight <= 7000 * 400 / 1000 + 100);
    }

    #[test]
    fn naive_send_spans_have_start_gaps() {
        let t = run_naive(&SimConfig::steady(100, 40, 500, 1000, 2000)).unwrap();
        let spans = t.send_spans();
        assert!(spans.len() > 5);
        for w in spans.windows(2) {
            assert_eq!(w[1].start_us - w[0].end_us, 40_000);
        }
    }
}
