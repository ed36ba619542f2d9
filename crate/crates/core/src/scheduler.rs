//! Slot pool control: optimal pool size, sender dispatch and pool
//! auto-tuning.
//!
//! [`Scheduler`] is pure. It consumes [`Input`]s stamped with a caller-supplied
//! time and answers with [`Action`]s, so the live gateway (wall clock) and the
//! simulator (virtual clock) run exactly the same tuning code.
//!
//! Tuning rules:
//!
//! - Start: the pool starts with one slot.
//! - Grow: data is waiting and no slot is sending, so activate a slot,
//!   subject to spacing and one-at-a-time.
//! - Spacing: no activation within one interval of the previous one.
//! - One at a time: no activation until the last activated slot has reached
//!   Send.
//! - Long wait: a slot waiting longer than one interval is aborted.
//! - Idle cycle: a slot that sent nothing during a whole dispatch cycle is
//!   aborted.
//! - Last slot: the only remaining slot is never aborted before its Send
//!   phase ends; this overrides both abort rules.
//!
//! Per tick: the cycle boundary is evaluated, then aborts, then dispatch,
//! then growth.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::slot::{SlotId, SlotPhase};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("interval must be positive")]
    ZeroInterval,
    #[error("dispatch cycle ({cycle_us}us) shorter than the interval ({interval_us}us)")]
    CycleShorterThanInterval { interval_us: u64, cycle_us: u64 },
    #[error("no waiting slot to select")]
    NoWaitingSlot,
    #[error("max_slots must be at least 1")]
    NoSlots,
}

/// Optimal pool size: `ceil((t_d + t_c + t_s) / t_d)`, all in microseconds.
pub fn optimal_slots(interval_us: u64, start_us: u64, commit_us: u64) -> Result<u64, SchedulerError> {
    if interval_us == 0 {
        return Err(SchedulerError::ZeroInterval);
    }
    Ok((interval_us + commit_us + start_us).div_ceil(interval_us))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Collect, then start the transaction, then send and commit.
    Naive,
    /// Transactions are started ahead of time by idle slots.
    Gate,
}

/// Data-arrival to visibility time of one micro-batch.
pub fn end_to_end_latency_model(strategy: Strategy, interval_us: u64, start_us: u64, commit_us: u64) -> u64 {
    match strategy {
        Strategy::Naive => interval_us + start_us + commit_us,
        Strategy::Gate => interval_us + commit_us,
    }
}

/// Picks the slot that entered Wait first; ties go to the lowest id.
pub fn select_sender(waiting: &[(SlotId, u64)]) -> Result<SlotId, SchedulerError> {
    waiting
        .iter()
        .min_by_key(|&&(id, entered)| (entered, id))
        .map(|&(id, _)| id)
        .ok_or(SchedulerError::NoWaitingSlot)
}

/// Exponentially weighted moving average with span `window`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ewma {
    alpha: f64,
    value: Option<f64>,
}

impl Ewma {
    pub fn new(window: usize) -> Self {
        Self {
            alpha: 2.0 / (window.max(1) as f64 + 1.0),
            value: None,
        }
    }

    pub fn observe(&mut self, x: f64) {
        self.value = Some(match self.value {
            None => x,
            Some(v) => v + self.alpha * (x - v),
        });
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Observed timing, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingParams {
    pub t_d: f64,
    pub t_s: f64,
    pub t_c: f64,
    pub dispatch_cycle: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolMode {
    /// Start small and tune to the flow.
    Auto,
    /// Activate exactly this many slots up front and never tune.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub interval_us: u64,
    pub dispatch_cycle_us: u64,
    pub max_slots: usize,
    pub ewma_window: usize,
    pub pool: PoolMode,
}

impl SchedulerConfig {
    pub fn new(interval_us: u64) -> Self {
        Self {
            interval_us,
            dispatch_cycle_us: 10_000_000.max(interval_us),
            max_slots: 64,
            ewma_window: 8,
            pool: PoolMode::Auto,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.interval_us == 0 {
            return Err(SchedulerError::ZeroInterval);
        }
        if self.dispatch_cycle_us < self.interval_us {
            return Err(SchedulerError::CycleShorterThanInterval {
                interval_us: self.interval_us,
                cycle_us: self.dispatch_cycle_us,
            });
        }
        if self.max_slots == 0 {
            return Err(SchedulerError::NoSlots);
        }
        Ok(())
    }
}

/// Something the scheduler was told.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Input {
    Tick { now: u64, pipeline_nonempty: bool },
    /// All segments of the slot answered READY.
    Ready { slot: SlotId, now: u64 },
    /// The slot ended its interval and sent EOF.
    SendEnded { slot: SlotId, rows: u64, now: u64 },
    /// Every segment of the slot acknowledged the commit.
    CommitAcked { slot: SlotId, now: u64 },
    Failed { slot: SlotId, now: u64 },
}

/// Something the owner of the slots must do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    /// Create the slot and start connecting it.
    ActivateSlot(SlotId),
    /// Let the waiting slot send for one interval.
    DispatchSender(SlotId),
    /// The slot is retired: close its connections.
    AbortSlot(SlotId),
    /// The slot's commit is done: open its next transaction.
    Reconnect(SlotId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotView {
    pub id: SlotId,
    pub phase: SlotPhase,
    pub activated_at: u64,
    pub phase_entered_at: u64,
    pub wait_entered_at: Option<u64>,
    pub send_ended_at: Option<u64>,
    pub sent_rows_this_cycle: u64,
    pub has_entered_send: bool,
    /// Idle-cycle verdict awaiting execution.
    pub condemned: bool,
    /// Retire at the next abort point (ready or commit ack).
    pub marked_for_abort: bool,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    slots: BTreeMap<SlotId, SlotView>,
    next_id: SlotId,
    started: bool,
    last_activation_at: Option<u64>,
    last_activated_slot: Option<SlotId>,
    current_sender: Option<SlotId>,
    cycle_started_at: Option<u64>,
    start_latency: Ewma,
    commit_latency: Ewma,
    activated_total: u64,
    aborted_total: u64,
    failed_total: u64,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Result<Self, SchedulerError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            slots: BTreeMap::new(),
            next_id: 1,
            started: false,
            last_activation_at: None,
            last_activated_slot: None,
            current_sender: None,
            cycle_started_at: None,
            start_latency: Ewma::new(cfg.ewma_window),
            commit_latency: Ewma::new(cfg.ewma_window),
            activated_total: 0,
            aborted_total: 0,
            failed_total: 0,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn slot(&self, id: SlotId) -> Option<&SlotView> {
        self.slots.get(&id)
    }

    pub fn slots(&self) -> impl Iterator<Item = &SlotView> {
        self.slots.values()
    }

    /// Slots not yet retired.
    pub fn live_slots(&self) -> usize {
        self.slots.values().filter(|s| s.phase != SlotPhase::Retired).count()
    }

    pub fn current_sender(&self) -> Option<SlotId> {
        self.current_sender
    }

    pub fn last_activation_at(&self) -> Option<u64> {
        self.last_activation_at
    }

    pub fn activated_total(&self) -> u64 {
        self.activated_total
    }

    pub fn aborted_total(&self) -> u64 {
        self.aborted_total
    }

    pub fn failed_total(&self) -> u64 {
        self.failed_total
    }

    pub fn timing(&self) -> TimingParams {
        TimingParams {
            t_d: self.cfg.interval_us as f64 / 1e3,
            t_s: self.start_latency.value().unwrap_or(0.0) / 1e3,
            t_c: self.commit_latency.value().unwrap_or(0.0) / 1e3,
            dispatch_cycle: self.cfg.dispatch_cycle_us as f64 / 1e3,
        }
    }

    /// Pool size the smoothed observations call for.
    pub fn estimated_optimal_slots(&self) -> u64 {
        let t_s = self.start_latency.value().unwrap_or(0.0).round() as u64;
        let t_c = self.commit_latency.value().unwrap_or(0.0).round() as u64;
        optimal_slots(self.cfg.interval_us, t_s, t_c).expect("interval validated")
    }

    pub fn handle(&mut self, input: Input) -> Vec<Action> {
        match input {
            Input::Tick { now, pipeline_nonempty } => self.tick(now, pipeline_nonempty),
            Input::Ready { slot, now } => self.on_ready(slot, now),
            Input::SendEnded { slot, rows, now } => {
                self.on_send_ended(slot, rows, now);
                Vec::new()
            }
            Input::CommitAcked { slot, now } => self.on_commit_acked(slot, now),
            Input::Failed { slot, now } => {
                self.on_failed(slot, now);
                Vec::new()
            }
        }
    }

    /// Earliest future time at which a rule may fire without any new
    /// input: an activation guard expiring, a wait crossing one interval, or
    /// the end of the dispatch cycle.
    pub fn next_deadline(&self, now: u64) -> Option<u64> {
        let d = self.cfg.interval_us;
        let mut candidates = Vec::new();
        if let Some(t) = self.last_activation_at {
            candidates.push(t + d);
        }
        for s in self.slots.values() {
            if s.phase == SlotPhase::Wait {
                if let Some(w) = s.wait_entered_at {
                    candidates.push(w + d + 1);
                }
            }
        }
        if let Some(c) = self.cycle_started_at {
            candidates.push(c + self.cfg.dispatch_cycle_us);
        }
        candidates.into_iter().filter(|&t| t > now).min()
    }

    fn tick(&mut self, now: u64, pipeline_nonempty: bool) -> Vec<Action> {
        let mut actions = Vec::new();
        let auto = self.cfg.pool == PoolMode::Auto;

        if !self.started {
            self.started = true;
            self.cycle_started_at = Some(now);
            let initial = match self.cfg.pool {
                PoolMode::Auto => 1,
                PoolMode::Fixed(n) => n.min(self.cfg.max_slots),
            };
            for _ in 0..initial {
                actions.push(self.activate(now));
            }
        }

        if auto {
            self.close_cycles(now);
            self.execute_idle_aborts(now, &mut actions);
            self.abort_long_waiter(now, &mut actions);
        }

        if self.current_sender.is_none() {
            let waiting: Vec<(SlotId, u64)> = self
                .slots
                .values()
                .filter(|s| s.phase == SlotPhase::Wait)
                .map(|s| (s.id, s.wait_entered_at.unwrap_or(s.phase_entered_at)))
                .collect();
            if let Ok(id) = select_sender(&waiting) {
                let s = self.slots.get_mut(&id).expect("waiting slot exists");
                s.phase = SlotPhase::Send;
                s.phase_entered_at = now;
                s.wait_entered_at = None;
                s.has_entered_send = true;
                self.current_sender = Some(id);
                actions.push(Action::DispatchSender(id));
            }
        }

        if auto
            && pipeline_nonempty
            && !self.any_sending()
            && !self.activation_spacing_blocks(now)
            && !self.last_activated_not_yet_sending()
            && self.live_slots() < self.cfg.max_slots
        {
            actions.push(self.activate(now));
        }

        actions
    }

    fn activate(&mut self, now: u64) -> Action {
        let id = self.next_id;
        self.next_id += 1;
        self.slots.insert(
            id,
            SlotView {
                id,
                phase: SlotPhase::Connect,
                activated_at: now,
                phase_entered_at: now,
                wait_entered_at: None,
                send_ended_at: None,
                sent_rows_this_cycle: 0,
                has_entered_send: false,
                condemned: false,
                marked_for_abort: false,
            },
        );
        self.last_activation_at = Some(now);
        self.last_activated_slot = Some(id);
        self.activated_total += 1;
        Action::ActivateSlot(id)
    }

    fn any_sending(&self) -> bool {
        self.slots.values().any(|s| s.phase == SlotPhase::Send)
    }

    // Spacing.
    fn activation_spacing_blocks(&self, now: u64) -> bool {
        self.last_activation_at
            .is_some_and(|t| now < t + self.cfg.interval_us)
    }

    // One at a time. A slot that retired before sending no longer blocks.
    fn last_activated_not_yet_sending(&self) -> bool {
        self.last_activated_slot
            .and_then(|id| self.slots.get(&id))
            .is_some_and(|s| s.phase != SlotPhase::Retired && !s.has_entered_send)
    }

    // Last slot.
    fn protected_as_last(&self, id: SlotId) -> bool {
        self.live_slots() == 1
            && self
                .slots
                .get(&id)
                .is_some_and(|s| matches!(s.phase, SlotPhase::Connect | SlotPhase::Wait | SlotPhase::Send))
    }

    // Idle cycle, judgement half: at each cycle boundary, condemn slots that
    // lived through the whole cycle without sending a row.
    fn close_cycles(&mut self, now: u64) {
        let cycle = self.cfg.dispatch_cycle_us;
        let Some(mut start) = self.cycle_started_at else {
            return;
        };
        while now >= start + cycle {
            for s in self.slots.values_mut() {
                if s.phase != SlotPhase::Retired && s.activated_at <= start && s.sent_rows_this_cycle == 0 {
                    s.condemned = true;
                }
                s.sent_rows_this_cycle = 0;
            }
            start += cycle;
        }
        self.cycle_started_at = Some(start);
    }

    // Idle cycle, execution half, guarded by the last-slot rule. Waiting slots retire on
    // the spot; others are marked and retire at their next abort point.
    fn execute_idle_aborts(&mut self, now: u64, actions: &mut Vec<Action>) {
        let condemned: Vec<SlotId> = self
            .slots
            .values()
            .filter(|s| s.condemned && !s.marked_for_abort && s.phase != SlotPhase::Retired)
            .map(|s| s.id)
            .collect();
        for id in condemned {
            if self.protected_as_last(id) {
                continue;
            }
            if self.slots[&id].phase == SlotPhase::Wait {
                self.retire(id, now);
                actions.push(Action::AbortSlot(id));
            } else {
                self.slots.get_mut(&id).unwrap().marked_for_abort = true;
            }
        }
    }

    // Long wait, guarded by the last-slot rule: at most one abort per tick, the slot
    // that has waited longest. When nobody is sending, the slot about to be
    // dispatched is spared so the abort never opens a gap.
    fn abort_long_waiter(&mut self, now: u64, actions: &mut Vec<Action>) {
        let d = self.cfg.interval_us;
        let waiting: Vec<(SlotId, u64)> = self
            .slots
            .values()
            .filter(|s| s.phase == SlotPhase::Wait)
            .map(|s| (s.id, s.wait_entered_at.unwrap_or(s.phase_entered_at)))
            .collect();
        let next_sender = if self.current_sender.is_none() {
            select_sender(&waiting).ok()
        } else {
            None
        };
        let candidate = waiting
            .iter()
            .filter(|&&(id, entered)| now - entered > d && Some(id) != next_sender)
            .min_by_key(|&&(id, entered)| (entered, id))
            .map(|&(id, _)| id);
        if let Some(id) = candidate {
            if !self.protected_as_last(id) {
                self.retire(id, now);
                actions.push(Action::AbortSlot(id));
            }
        }
    }

    fn retire(&mut self, id: SlotId, now: u64) {
        let s = self.slots.get_mut(&id).expect("known slot");
        s.phase = SlotPhase::Retired;
        s.phase_entered_at = now;
        s.wait_entered_at = None;
        self.aborted_total += 1;
        if self.current_sender == Some(id) {
            self.current_sender = None;
        }
    }

    fn on_ready(&mut self, id: SlotId, now: u64) -> Vec<Action> {
        let Some(s) = self.slots.get_mut(&id) else {
            return Vec::new();
        };
        if s.phase != SlotPhase::Connect {
            return Vec::new();
        }
        self.start_latency.observe(now.saturating_sub(s.phase_entered_at) as f64);
        s.phase = SlotPhase::Wait;
        s.phase_entered_at = now;
        s.wait_entered_at = Some(now);
        if s.marked_for_abort {
            self.retire(id, now);
            return vec![Action::AbortSlot(id)];
        }
        Vec::new()
    }

    fn on_send_ended(&mut self, id: SlotId, rows: u64, now: u64) {
        let Some(s) = self.slots.get_mut(&id) else {
            return;
        };
        if s.phase != SlotPhase::Send {
            return;
        }
        s.phase = SlotPhase::Commit;
        s.phase_entered_at = now;
        s.send_ended_at = Some(now);
        s.sent_rows_this_cycle += rows;
        if rows > 0 && !s.marked_for_abort {
            s.condemned = false;
        }
        if self.current_sender == Some(id) {
            self.current_sender = None;
        }
    }

    fn on_commit_acked(&mut self, id: SlotId, now: u64) -> Vec<Action> {
        let Some(s) = self.slots.get_mut(&id) else {
            return Vec::new();
        };
        if s.phase != SlotPhase::Commit {
            return Vec::new();
        }
        let ended = s.send_ended_at.unwrap_or(s.phase_entered_at);
        self.commit_latency.observe(now.saturating_sub(ended) as f64);
        if s.marked_for_abort {
            self.retire(id, now);
            return vec![Action::AbortSlot(id)];
        }
        s.phase = SlotPhase::Connect;
        s.phase_entered_at = now;
        vec![Action::Reconnect(id)]
    }

    fn on_failed(&mut self, id: SlotId, now: u64) {
        let Some(s) = self.slots.get_mut(&id) else {
            return;
        };
        if s.phase == SlotPhase::Retired {
            return;
        }
        s.phase = SlotPhase::Retired;
        s.phase_entered_at = now;
        s.wait_entered_at = None;
        self.failed_total += 1;
        if self.current_sender == Some(id) {
            self.current_sender = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: u64 = 1000;

    fn sched(interval_ms: u64) -> Scheduler {
        Scheduler::new(SchedulerConfig::new(interval_ms * MS)).unwrap()
    }

    fn tick(s: &mut Scheduler, now_ms: u64, data: bool) -> Vec<Action> {
        s.handle(Input::Tick { now: now_ms * MS, pipeline_nonempty: data })
    }

    #[test]
    fn optimal_slot_examples() {
        assert_eq!(optimal_slots(100, 50, 150), Ok(3));
        assert_eq!(optimal_slots(100, 0, 0), Ok(1));
        for t_s in 1..=100 {
            assert_eq!(optimal_slots(100, t_s, 0), Ok(2));
        }
        assert_eq!(optimal_slots(0, 1, 1), Err(SchedulerError::ZeroInterval));
    }

    #[test]
    fn latency_model() {
        assert_eq!(end_to_end_latency_model(Strategy::Naive, 100, 50, 150), 300);
        assert_eq!(end_to_end_latency_model(Strategy::Gate, 100, 50, 150), 250);
        for (d, s, c) in [(1, 0, 0), (100, 7, 9), (5, 1000, 3)] {
            assert_eq!(
                end_to_end_latency_model(Strategy::Naive, d, s, c) - end_to_end_latency_model(Strategy::Gate, d, s, c),
                s
            );
        }
    }

    #[test]
    fn sender_selection() {
        assert_eq!(select_sender(&[(1, 5), (2, 3)]), Ok(2));
        assert_eq!(select_sender(&[(2, 3), (1, 3)]), Ok(1));
        assert_eq!(select_sender(&[(7, 0)]), Ok(7));
        assert_eq!(select_sender(&[]), Err(SchedulerError::NoWaitingSlot));
    }

    #[test]
    fn config_validation() {
        let mut c = SchedulerConfig::new(100);
        c.dispatch_cycle_us = 50;
        assert!(matches!(Scheduler::new(c), Err(SchedulerError::CycleShorterThanInterval { .. })));
        assert!(matches!(Scheduler::new(SchedulerConfig::new(0)), Err(SchedulerError::ZeroInterval)));
    }

    #[test]
    fn first_tick_activates_one_slot() {
        let mut s = sched(100);
        assert_eq!(tick(&mut s, 0, false), vec![Action::ActivateSlot(1)]);
        assert_eq!(tick(&mut s, 1, true), vec![]);
        assert_eq!(s.live_slots(), 1);
    }

    #[test]
    fn ready_slot_is_dispatched() {
        let mut s = sched(100);
        tick(&mut s, 0, false);
        s.handle(Input::Ready { slot: 1, now: 50 * MS });
        assert_eq!(tick(&mut s, 50, false), vec![Action::DispatchSender(1)]);
        assert_eq!(s.current_sender(), Some(1));
        assert_eq!(tick(&mut s, 60, true), vec![]);
    }

    /// Drives the pool to: slot 1 in Commit, slot 2 just ended Send.
    fn two_slots_both_busy() -> Scheduler {
        let mut s = sched(100);
        tick(&mut s, 0, true);
        s.handle(Input::Ready { slot: 1, now: 10 * MS });
        assert_eq!(tick(&mut s, 10, true), vec![Action::DispatchSender(1)]);
        s.handle(Input::SendEnded { slot: 1, rows: 10, now: 110 * MS });
        assert_eq!(tick(&mut s, 110, true), vec![Action::ActivateSlot(2)]);
        s.handle(Input::Ready { slot: 2, now: 120 * MS });
        assert_eq!(tick(&mut s, 120, true), vec![Action::DispatchSender(2)]);
        s.handle(Input::SendEnded { slot: 2, rows: 10, now: 220 * MS });
        s
    }

    #[test]
    fn step_up_activates_third_slot() {
        let mut s = two_slots_both_busy();
        assert_eq!(s.slot(1).unwrap().phase, SlotPhase::Commit);
        assert_eq!(tick(&mut s, 220, true), vec![Action::ActivateSlot(3)]);
        // Spacing and one at a time: nothing more until slot 3 sends and t_d passes.
        assert_eq!(tick(&mut s, 330, true), vec![]);
        s.handle(Input::Ready { slot: 3, now: 340 * MS });
        assert_eq!(tick(&mut s, 340, true), vec![Action::DispatchSender(3)]);
    }

    #[test]
    fn activation_guards() {
        let mut s = two_slots_both_busy();
        s.handle(Input::CommitAcked { slot: 1, now: 215 * MS });
        // Within t_d of slot 2's activation at 110.
        assert_eq!(tick(&mut s, 205, true), vec![]);
        // No data: no activation even when idle.
        assert_eq!(tick(&mut s, 221, false), vec![]);
    }

    #[test]
    fn long_waiter_is_aborted() {
        let mut s = sched(100);
        let mut c = SchedulerConfig::new(100 * MS);
        c.pool = PoolMode::Fixed(3);
        let mut f = Scheduler::new(c).unwrap();
        // In fixed mode nothing is ever aborted.
        tick(&mut f, 0, true);
        for id in 1..=3 {
            f.handle(Input::Ready { slot: id, now: 0 });
        }
        tick(&mut f, 0, true);
        assert_eq!(tick(&mut f, 500, true), vec![]);

        // Auto: slots 1 and 3 cover sending while 2 sits in Wait.
        tick(&mut s, 0, true);
        s.handle(Input::Ready { slot: 1, now: 0 });
        tick(&mut s, 0, true);
        s.handle(Input::SendEnded { slot: 1, rows: 5, now: 100 * MS });
        assert_eq!(tick(&mut s, 100, true), vec![Action::ActivateSlot(2)]);
        s.handle(Input::Ready { slot: 2, now: 110 * MS });
        assert_eq!(tick(&mut s, 110, true), vec![Action::DispatchSender(2)]);
        s.handle(Input::SendEnded { slot: 2, rows: 5, now: 210 * MS });
        assert_eq!(tick(&mut s, 210, true), vec![Action::ActivateSlot(3)]);
        s.handle(Input::CommitAcked { slot: 1, now: 215 * MS });
        s.handle(Input::Ready { slot: 1, now: 216 * MS });
        s.handle(Input::Ready { slot: 3, now: 218 * MS });
        assert_eq!(tick(&mut s, 218, true), vec![Action::DispatchSender(1)]);
        s.handle(Input::CommitAcked { slot: 2, now: 230 * MS });
        s.handle(Input::Ready { slot: 2, now: 240 * MS });
        s.handle(Input::SendEnded { slot: 1, rows: 5, now: 318 * MS });
        assert_eq!(tick(&mut s, 318, true), vec![Action::DispatchSender(3)]);
        // Slot 2 has waited since 240; at 340 it has waited exactly t_d.
        assert_eq!(tick(&mut s, 340, true), vec![]);
        assert_eq!(s.next_deadline(340 * MS), Some(340 * MS + 1));
        assert_eq!(s.handle(Input::Tick { now: 340 * MS + 1, pipeline_nonempty: true }), vec![Action::AbortSlot(2)]);
        assert_eq!(s.live_slots(), 2);
        assert_eq!(s.aborted_total(), 1);
    }

    #[test]
    fn idle_pool_drains_and_last_slot_waits_for_send_end() {
        let mut c = SchedulerConfig::new(100 * MS);
        c.dispatch_cycle_us = 1000 * MS;
        let mut s = Scheduler::new(c).unwrap();
        tick(&mut s, 0, false);
        s.handle(Input::Ready { slot: 1, now: 10 * MS });
        assert_eq!(tick(&mut s, 10, false), vec![Action::DispatchSender(1)]);
        // Cycle boundary while the only slot is sending: condemned, protected.
        assert_eq!(tick(&mut s, 1000, false), vec![]);
        assert!(s.slot(1).unwrap().condemned);
        assert!(!s.slot(1).unwrap().marked_for_abort);
        s.handle(Input::SendEnded { slot: 1, rows: 0, now: 1010 * MS });
        assert_eq!(tick(&mut s, 1010, false), vec![]);
        assert!(s.slot(1).unwrap().marked_for_abort);
        assert_eq!(s.handle(Input::CommitAcked { slot: 1, now: 1020 * MS }), vec![Action::AbortSlot(1)]);
        assert_eq!(s.live_slots(), 0);
        assert_eq!(tick(&mut s, 5000, false), vec![]);
        // Data returns: a new slot is activated.
        assert_eq!(tick(&mut s, 5001, true), vec![Action::ActivateSlot(2)]);
    }

    #[test]
    fn sending_data_pardons_a_condemned_slot() {
        let mut c = SchedulerConfig::new(100 * MS);
        c.dispatch_cycle_us = 1000 * MS;
        let mut s = Scheduler::new(c).unwrap();
        tick(&mut s, 0, false);
        s.handle(Input::Ready { slot: 1, now: 10 * MS });
        tick(&mut s, 10, false);
        tick(&mut s, 1000, true);
        assert!(s.slot(1).unwrap().condemned);
        // A record arrived in the last tick of the cycle and went out with
        // this batch.
        s.handle(Input::SendEnded { slot: 1, rows: 1, now: 1010 * MS });
        assert_eq!(tick(&mut s, 1010, false), vec![]);
        assert_eq!(s.handle(Input::CommitAcked { slot: 1, now: 1020 * MS }), vec![Action::Reconnect(1)]);
        assert_eq!(s.live_slots(), 1);
    }

    #[test]
    fn failure_frees_sender_and_unblocks_activation() {
        let mut s = sched(100);
        tick(&mut s, 0, true);
        s.handle(Input::Failed { slot: 1, now: 5 * MS });
        assert_eq!(s.live_slots(), 0);
        assert_eq!(s.failed_total(), 1);
        assert_eq!(tick(&mut s, 100, true), vec![Action::ActivateSlot(2)]);
    }

    #[test]
    fn ewma_tracks_observations() {
        let mut e = Ewma::new(8);
        assert_eq!(e.value(), None);
        e.observe(10.0);
        assert_eq!(e.value(), Some(10.0));
        for _ in 0..200 {
            e.observe(50.0);
        }
        assert!((e.value().unwrap() - 50.0).abs() < 1e-6);
    }

    #[test]
    fn estimates_feed_optimal_slots() {
        let mut s = sched(100);
        tick(&mut s, 0, true);
        s.handle(Input::Ready { slot: 1, now: 50 * MS });
        tick(&mut s, 50, true);
        s.handle(Input::SendEnded { slot: 1, rows: 1, now: 150 * MS });
        s.handle(Input::CommitAcked { slot: 1, now: 300 * MS });
        let t = s.timing();
        assert_eq!((t.t_d, t.t_s, t.t_c), (100.0, 50.0, 150.0));
        assert_eq!(s.estimated_optimal_slots(), 3);
    }
}
