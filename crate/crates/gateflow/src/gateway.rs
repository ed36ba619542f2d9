//! The live gateway.
//!
//! HTTP handlers parse posted lines into the shared lock-free pipeline. A
//! single scheduler task owns the [`Scheduler`] and turns its actions into
//! commands for slot tasks. Each slot task owns one TCP connection per
//! segment and walks its [`Slot`] through Connect, Wait, Send and Commit.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use gateflow_core::clock::{Clock, MonotonicClock};
use gateflow_core::ingest::{epoch_micros, ErrorLog, IngestReport, Ingestor};
use gateflow_core::metrics::Counters;
use gateflow_core::pipeline::{EnqueueResult, LockFreeQueue};
use gateflow_core::proto::{Request, Response};
use gateflow_core::record::Record;
use gateflow_core::scheduler::{Action, Input, PoolMode, Scheduler, SchedulerConfig};
use gateflow_core::segment::SegmentEndpoint;
use gateflow_core::slot::{route, Slot, SlotError, SlotId};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::config::{ConfigError, GatewayConfig};

/// Exit status for each startup failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const BIND: i32 = 2;
    pub const DEPENDENCY: i32 = 3;
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("segment {segment} at {addr} unreachable after {attempts} attempts: {source}")]
    Dependency {
        segment: String,
        addr: String,
        attempts: u32,
        source: std::io::Error,
    },
    #[error("cannot open error log {path}: {source}")]
    ErrorLog { path: String, source: std::io::Error },
}

impl StartError {
    pub fn exit_code(&self) -> i32 {
        match self {
            StartError::Config(_) | StartError::ErrorLog { .. } => exit::USAGE,
            StartError::Bind { .. } => exit::BIND,
            StartError::Dependency { .. } => exit::DEPENDENCY,
        }
    }
}

/// One slot's Send phase as observed by the slot task itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendInterval {
    pub slot: SlotId,
    pub start_us: u64,
    pub end_us: u64,
    pub rows: u64,
}

/// Record of every Send interval, for checking that senders never overlap.
#[derive(Debug, Default)]
pub struct SendAudit {
    intervals: Mutex<Vec<SendInterval>>,
}

impl SendAudit {
    pub fn record(&self, iv: SendInterval) {
        self.intervals.lock().unwrap().push(iv);
    }

    pub fn intervals(&self) -> Vec<SendInterval> {
        self.intervals.lock().unwrap().clone()
    }

    /// Intervals that start before an earlier-starting interval has ended.
    pub fn violations(&self) -> usize {
        count_overlaps(&self.intervals())
    }
}

pub fn count_overlaps(intervals: &[SendInterval]) -> usize {
    let mut v = intervals.to_vec();
    v.sort_by_key(|i| (i.start_us, i.end_us));
    let mut reach = 0u64;
    let mut bad = 0;
    for (k, iv) in v.iter().enumerate() {
        if k > 0 && iv.start_us < reach {
            bad += 1;
        }
        reach = reach.max(iv.end_us);
    }
    bad
}

struct Shared {
    cfg: GatewayConfig,
    ingestor: Ingestor,
    pipeline: Arc<LockFreeQueue<Record>>,
    counters: Arc<Counters>,
    audit: SendAudit,
    endpoints: Vec<SegmentEndpoint>,
    clock: MonotonicClock,
    txn_tag: String,
}

pub struct Gateway {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: watch::Sender<bool>,
    server: JoinHandle<()>,
    control: JoinHandle<()>,
}

#[derive(Debug, Clone, Copy)]
enum SlotCmd {
    Dispatch,
    Reconnect,
    Abort,
}

#[derive(Debug, Clone, Copy)]
enum SlotEvent {
    Ready(SlotId),
    SendEnded(SlotId, u64),
    CommitAcked(SlotId),
    Failed(SlotId),
}

impl Gateway {
    /// Binds the HTTP listener, checks every segment is reachable and starts
    /// the scheduler.
    pub async fn start(cfg: GatewayConfig) -> Result<Self, StartError> {
        cfg.validate()?;
        let schema = cfg.parsed_schema()?;
        let listener = TcpListener::bind(&cfg.listen_addr).await.map_err(|source| StartError::Bind {
            addr: cfg.listen_addr.clone(),
            source,
        })?;
        let addr = listener.local_addr().map_err(|source| StartError::Bind {
            addr: cfg.listen_addr.clone(),
            source,
        })?;
        for seg in &cfg.segments {
            probe_segment(&seg.endpoint(), cfg.connect_retries).await?;
        }

        let errors = match &cfg.error_log {
            Some(path) => ErrorLog::with_file(10_000, path).map_err(|source| StartError::ErrorLog {
                path: path.display().to_string(),
                source,
            })?,
            None => ErrorLog::default(),
        };
        let pipeline = Arc::new(LockFreeQueue::bounded(cfg.queue_capacity));
        let counters = Arc::new(Counters::default());
        let ingestor = Ingestor::new(schema, pipeline.clone(), Arc::new(errors), counters.clone());
        let shared = Arc::new(Shared {
            endpoints: cfg.segments.iter().map(|s| s.endpoint()).collect(),
            txn_tag: format!("g{:x}", epoch_micros()),
            cfg,
            ingestor,
            pipeline,
            counters,
            audit: SendAudit::default(),
            clock: MonotonicClock::default(),
        });

        let (shutdown, shutdown_rx) = watch::channel(false);
        let control = tokio::spawn(control_loop(shared.clone(), shutdown_rx.clone()));
        let app = Router::new()
            .route("/ingest", post(ingest))
            .route("/healthz", get(|| async { "ok" }))
            .route("/metrics", get(metrics))
            .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
            .with_state(shared.clone());
        let mut stop = shutdown_rx;
        let server = tokio::spawn(async move {
            let graceful = async move {
                let _ = stop.wait_for(|&s| s).await;
            };
            if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
                tracing::error!(error = %e, "http server failed");
            }
        });
        tracing::info!(%addr, "gateway listening");
        Ok(Self { addr, shared, shutdown, server, control })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.shared.counters
    }

    pub fn audit(&self) -> &SendAudit {
        &self.shared.audit
    }

    pub fn errors(&self) -> &Arc<ErrorLog> {
        self.shared.ingestor.errors()
    }

    pub fn pipeline(&self) -> &Arc<LockFreeQueue<Record>> {
        &self.shared.pipeline
    }

    /// Same parsing path as `POST /ingest`.
    pub fn ingest(&self, body: &str) -> IngestReport {
        self.shared.ingestor.handle_post(body)
    }

    /// Waits until every accepted row has been committed.
    pub async fn quiesce(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let c = self.shared.counters.snapshot();
            if self.shared.pipeline.is_empty() && c.rows_committed >= c.rows_accepted {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.control.await;
        if tokio::time::timeout(Duration::from_secs(5), &mut { self.server }).await.is_err() {
            tracing::warn!("http server did not stop in time");
        }
    }
}

async fn probe_segment(ep: &SegmentEndpoint, attempts: u32) -> Result<(), StartError> {
    let attempts = attempts.max(1);
    let mut last = None;
    for n in 0..attempts {
        match TcpStream::connect(ep.address()).await {
            Ok(_) => return Ok(()),
            Err(e) => {
                tracing::warn!(segment = %ep, attempt = n + 1, error = %e, "segment unreachable");
                last = Some(e);
            }
        }
        if n + 1 < attempts {
            tokio::time::sleep(Duration::from_millis(200)).await;
        }
    }
    Err(StartError::Dependency {
        segment: ep.segment_id.clone(),
        addr: ep.address(),
        attempts,
        source: last.expect("at least one attempt"),
    })
}

async fn ingest(State(shared): State<Arc<Shared>>, body: String) -> (StatusCode, Json<IngestReport>) {
    let report = shared.ingestor.handle_post(&body);
    let status = if report.backpressured > 0 {
        StatusCode::TOO_MANY_REQUESTS
    } else {
        StatusCode::OK
    };
    (status, Json(report))
}

async fn metrics(State(shared): State<Arc<Shared>>) -> String {
    shared.counters.snapshot().render()
}

async fn control_loop(shared: Arc<Shared>, mut shutdown: watch::Receiver<bool>) {
    let cfg = &shared.cfg;
    let interval = Duration::from_millis(cfg.interval_ms);
    let mut sched = Scheduler::new(SchedulerConfig {
        interval_us: cfg.interval_ms * 1000,
        dispatch_cycle_us: cfg.dispatch_cycle_ms * 1000,
        max_slots: cfg.max_slots,
        ewma_window: cfg.ewma_window,
        pool: PoolMode::Auto,
    })
    .expect("validated config");
    let (events_tx, mut events) = mpsc::unbounded_channel();
    let mut slots: HashMap<SlotId, mpsc::UnboundedSender<SlotCmd>> = HashMap::new();
    let mut ticker = tokio::time::interval((interval / 10).clamp(Duration::from_millis(1), Duration::from_millis(50)));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);

    loop {
        let mut inputs = Vec::new();
        tokio::select! {
            _ = shutdown.wait_for(|&s| s) => break,
            Some(ev) = events.recv() => {
                inputs.push(ev);
                while let Ok(ev) = events.try_recv() {
                    inputs.push(ev);
                }
            }
            _ = ticker.tick() => {}
        }
        for ev in inputs {
            let now = shared.clock.now_us();
            let input = match ev {
                SlotEvent::Ready(slot) => Input::Ready { slot, now },
                SlotEvent::SendEnded(slot, rows) => Input::SendEnded { slot, rows, now },
                SlotEvent::CommitAcked(slot) => Input::CommitAcked { slot, now },
                SlotEvent::Failed(slot) => {
                    slots.remove(&slot);
                    Input::Failed { slot, now }
                }
            };
            let actions = sched.handle(input);
            execute(&shared, &mut slots, &events_tx, actions);
        }
        let tick = Input::Tick {
            now: shared.clock.now_us(),
            pipeline_nonempty: !shared.pipeline.is_empty(),
        };
        let actions = sched.handle(tick);
        execute(&shared, &mut slots, &events_tx, actions);
        shared.counters.active_slots.store(sched.live_slots() as u64, Ordering::Relaxed);
    }
    for (_, tx) in slots.drain() {
        let _ = tx.send(SlotCmd::Abort);
    }
}

fn execute(
    shared: &Arc<Shared>,
    slots: &mut HashMap<SlotId, mpsc::UnboundedSender<SlotCmd>>,
    events: &mpsc::UnboundedSender<SlotEvent>,
    actions: Vec<Action>,
) {
    for action in actions {
        match action {
            Action::ActivateSlot(id) => {
                let (tx, rx) = mpsc::unbounded_channel();
                slots.insert(id, tx);
                Counters::add(&shared.counters.slots_activated_total, 1);
                tracing::debug!(slot = id, "activating slot");
                tokio::spawn(slot_task(id, shared.clone(), rx, events.clone()));
            }
            Action::DispatchSender(id) => send_cmd(slots, id, SlotCmd::Dispatch),
            Action::Reconnect(id) => send_cmd(slots, id, SlotCmd::Reconnect),
            Action::AbortSlot(id) => {
                Counters::add(&shared.counters.slots_aborted_total, 1);
                tracing::debug!(slot = id, "aborting slot");
                send_cmd(slots, id, SlotCmd::Abort);
                slots.remove(&id);
            }
        }
    }
}

fn send_cmd(slots: &HashMap<SlotId, mpsc::UnboundedSender<SlotCmd>>, id: SlotId, cmd: SlotCmd) {
    if let Some(tx) = slots.get(&id) {
        let _ = tx.send(cmd);
    }
}

#[derive(Debug, Error)]
enum SlotFailure {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    State(#[from] SlotError),
    #[error("unexpected reply {0:?}")]
    Reply(String),
    #[error("connection closed by segment")]
    Closed,
    #[error("segment {addr} unreachable after {attempts} attempts: {source}")]
    Connect { addr: String, attempts: u32, source: std::io::Error },
}

struct Conn {
    rd: BufReader<OwnedReadHalf>,
    wr: BufWriter<OwnedWriteHalf>,
    line: String,
}

impl Conn {
    async fn open(ep: &SegmentEndpoint) -> std::io::Result<Self> {
        let stream = TcpStream::connect(ep.address()).await?;
        stream.set_nodelay(true)?;
        let (rd, wr) = stream.into_split();
        Ok(Self {
            rd: BufReader::new(rd),
            wr: BufWriter::with_capacity(256 * 1024, wr),
            line: String::new(),
        })
    }

    async fn open_with_retries(ep: &SegmentEndpoint, attempts: u32) -> Result<Self, SlotFailure> {
        let attempts = attempts.max(1);
        let mut n = 0;
        loop {
            n += 1;
            match Self::open(ep).await {
                Ok(c) => return Ok(c),
                Err(source) if n >= attempts => {
                    return Err(SlotFailure::Connect { addr: ep.address(), attempts, source });
                }
                Err(_) => tokio::time::sleep(Duration::from_millis(50)).await,
            }
        }
    }

    async fn recv(&mut self) -> Result<Response, SlotFailure> {
        self.line.clear();
        if self.rd.read_line(&mut self.line).await? == 0 {
            return Err(SlotFailure::Closed);
        }
        Response::parse(&self.line).map_err(|_| SlotFailure::Reply(self.line.trim_end().to_string()))
    }
}

/// Rows taken from the pipeline by a slot and not yet committed.
struct Batch {
    records: Vec<Record>,
    acked: Vec<bool>,
}

async fn slot_task(
    id: SlotId,
    shared: Arc<Shared>,
    mut cmds: mpsc::UnboundedReceiver<SlotCmd>,
    events: mpsc::UnboundedSender<SlotEvent>,
) {
    let mut slot = Slot::new(id, shared.clock.now_us());
    let mut batch = Batch { records: Vec::new(), acked: vec![false; shared.endpoints.len()] };
    let result = run_slot(&shared, &mut slot, &mut batch, &mut cmds, &events).await;
    if let Err(e) = result {
        tracing::warn!(slot = id, error = %e, "slot failed");
        slot.fail(shared.clock.now_us());
        requeue(&shared, batch).await;
        let _ = events.send(SlotEvent::Failed(id));
    }
}

/// Puts uncommitted rows back into the pipeline. Rows whose segment already
/// acknowledged the commit count as committed.
async fn requeue(shared: &Shared, batch: Batch) {
    let n = shared.endpoints.len();
    let mut committed = 0;
    let mut requeued = 0;
    for r in batch.records {
        if batch.acked[route(&r.device_id, n)] {
            committed += 1;
            continue;
        }
        requeued += 1;
        let mut item = r;
        loop {
            match shared.pipeline.enqueue(item) {
                EnqueueResult::Accepted => break,
                EnqueueResult::Backpressure(back) => {
                    item = back;
                    tokio::time::sleep(Duration::from_millis(1)).await;
                }
            }
        }
    }
    Counters::add(&shared.counters.rows_committed, committed);
    if requeued > 0 {
        tracing::info!(rows = requeued, "requeued rows of a failed slot");
    }
}

async fn run_slot(
    shared: &Shared,
    slot: &mut Slot,
    batch: &mut Batch,
    cmds: &mut mpsc::UnboundedReceiver<SlotCmd>,
    events: &mpsc::UnboundedSender<SlotEvent>,
) -> Result<(), SlotFailure> {
    let id = slot.id();
    let now = || shared.clock.now_us();
    let mut conns = Vec::with_capacity(shared.endpoints.len());
    for ep in &shared.endpoints {
        conns.push(Conn::open_with_retries(ep, shared.cfg.connect_retries).await?);
    }
    let interval = Duration::from_millis(shared.cfg.interval_ms);
    let mut bufs = vec![String::new(); conns.len()];
    let mut txn_no = 0u64;

    loop {
        txn_no += 1;
        let txn = format!("{}-s{id}-{txn_no}", shared.txn_tag);
        let frames = slot.begin_connect(shared.endpoints.clone(), txn.clone(), &shared.cfg.table)?;
        for (c, f) in conns.iter_mut().zip(&frames) {
            c.wr.write_all(f.to_string().as_bytes()).await?;
            c.wr.flush().await?;
        }
        for (i, c) in conns.iter_mut().enumerate() {
            match c.recv().await? {
                Response::Ready { txn: t } => {
                    slot.segment_ready(i, &t, now())?;
                }
                other => return Err(SlotFailure::Reply(other.to_string())),
            }
        }
        let _ = events.send(SlotEvent::Ready(id));

        match cmds.recv().await {
            Some(SlotCmd::Dispatch) => {}
            Some(SlotCmd::Abort) | None => {
                slot.abort(now())?;
                return Ok(());
            }
            Some(SlotCmd::Reconnect) => return Err(SlotFailure::Reply("reconnect while waiting".into())),
        }

        slot.dispatch(now())?;
        let started = now();
        let deadline = Instant::now() + interval;
        batch.acked.iter_mut().for_each(|a| *a = false);
        loop {
            let chunk = shared.pipeline.drain_up_to(4096);
            if chunk.is_empty() {
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    break;
                }
                tokio::time::sleep(left.min(Duration::from_millis(1))).await;
                continue;
            }
            slot.send_records(&chunk, &mut bufs)?;
            batch.records.extend(chunk);
            for (c, b) in conns.iter_mut().zip(bufs.iter_mut()) {
                if !b.is_empty() {
                    c.wr.write_all(b.as_bytes()).await?;
                    b.clear();
                }
            }
            if Instant::now() >= deadline {
                break;
            }
        }
        let rows = slot.batch_row_count();
        shared.audit.record(SendInterval { slot: id, start_us: started, end_us: now(), rows });
        let eof = Request::Eof.to_string();
        for c in conns.iter_mut() {
            c.wr.write_all(eof.as_bytes()).await?;
            c.wr.flush().await?;
        }
        slot.finish_send(now())?;
        let _ = events.send(SlotEvent::SendEnded(id, rows));

        for (i, c) in conns.iter_mut().enumerate() {
            match c.recv().await? {
                Response::Committed { txn: t, rows } => {
                    slot.segment_committed(i, &t, rows)?;
                    batch.acked[i] = true;
                }
                other => return Err(SlotFailure::Reply(other.to_string())),
            }
        }
        Counters::add(&shared.counters.rows_committed, batch.records.len() as u64);
        shared.counters.last_commit_ms.store(epoch_micros() / 1000, Ordering::Relaxed);
        batch.records.clear();
        let _ = events.send(SlotEvent::CommitAcked(id));

        match cmds.recv().await {
            Some(SlotCmd::Reconnect) => {
                slot.on_commit_ack(&txn, false, now())?;
            }
            Some(SlotCmd::Abort) | None => {
                slot.on_commit_ack(&txn, true, now())?;
                return Ok(());
            }
            Some(SlotCmd::Dispatch) => return Err(SlotFailure::Reply("dispatch while committing".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(start_us: u64, end_us: u64) -> SendInterval {
        SendInterval { slot: 0, start_us, end_us, rows: 0 }
    }

    #[test]
    fn overlap_counting() {
        assert_eq!(count_overlaps(&[]), 0);
        assert_eq!(count_overlaps(&[iv(0, 10), iv(10, 20), iv(25, 30)]), 0);
        assert_eq!(count_overlaps(&[iv(10, 20), iv(0, 15)]), 1);
        assert_eq!(count_overlaps(&[iv(0, 100), iv(10, 20), iv(30, 40)]), 2);
    }

    #[test]
    fn exit_codes() {
        let io = || std::io::Error::other("x");
        assert_eq!(StartError::Bind { addr: "a".into(), source: io() }.exit_code(), 2);
        let dep = StartError::Dependency { segment: "s".into(), addr: "a".into(), attempts: 1, source: io() };
        assert_eq!(dep.exit_code(), 3);
        assert_eq!(StartError::Config(ConfigError::Invalid("x".into())).exit_code(), 1);
    }
}
