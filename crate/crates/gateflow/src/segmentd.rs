//! Mock segment daemon: one TCP listener per segment speaking the slot
//! protocol, with sleeps standing in for transaction start and commit cost.
//!
//! Commits on one segment are serialized, so a segment behaves like a single
//! writer whose throughput is bounded by its latency model.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use gateflow_core::ingest::epoch_micros;
use gateflow_core::proto::{ErrorReason, Request, Response, NO_TXN};
use gateflow_core::segment::{LatencyModel, SegmentStore};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, BufWriter};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::Mutex;
use tokio::task::JoinHandle;

use crate::config::SegmentSpec;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("cannot bind segment {id} on {addr}: {source}")]
    Bind { id: String, addr: String, source: std::io::Error },
    #[error("cannot open dump file for segment {id}: {source}")]
    Dump { id: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DaemonOptions {
    /// Keep every committed row in memory (needed for row-level checks).
    pub retain_rows: bool,
}

/// A running segment with its bound address.
pub struct SegmentHandle {
    pub id: String,
    pub addr: SocketAddr,
    pub store: Arc<SegmentStore>,
    pub latency: LatencyModel,
}

pub struct SegmentDaemon {
    segments: Vec<SegmentHandle>,
    tasks: Vec<JoinHandle<()>>,
}

impl SegmentDaemon {
    /// Binds every segment; port 0 picks a free port.
    pub async fn start(
        specs: &[SegmentSpec],
        opts: DaemonOptions,
        dump_dir: Option<&Path>,
    ) -> Result<Self, DaemonError> {
        let mut segments = Vec::new();
        let mut tasks = Vec::new();
        for spec in specs {
            let addr = format!("{}:{}", spec.host, spec.port);
            let listener = TcpListener::bind(&addr).await.map_err(|source| DaemonError::Bind {
                id: spec.id.clone(),
                addr: addr.clone(),
                source,
            })?;
            let bound = listener.local_addr().map_err(|source| DaemonError::Bind {
                id: spec.id.clone(),
                addr,
                source,
            })?;
            let mut store = SegmentStore::new(&spec.id);
            if !opts.retain_rows {
                store = store.without_row_retention();
            }
            if let Some(dir) = dump_dir {
                store = store
                    .with_dump(&dir.join(format!("{}.tsv", spec.id)))
                    .map_err(|source| DaemonError::Dump { id: spec.id.clone(), source })?;
            }
            let store = Arc::new(store);
            let latency = spec.latency();
            tasks.push(tokio::spawn(accept_loop(listener, store.clone(), latency)));
            tracing::info!(segment = %spec.id, addr = %bound, "segment listening");
            segments.push(SegmentHandle {
                id: spec.id.clone(),
                addr: bound,
                store,
                latency,
            });
        }
        Ok(Self { segments, tasks })
    }

    pub fn segments(&self) -> &[SegmentHandle] {
        &self.segments
    }

    /// Specs pointing at the bound addresses, for a gateway config.
    pub fn specs(&self) -> Vec<SegmentSpec> {
        self.segments
            .iter()
            .map(|s| SegmentSpec {
                id: s.id.clone(),
                host: s.addr.ip().to_string(),
                port: s.addr.port(),
                begin_latency_ms: s.latency.begin_latency_ms,
                commit_fixed_ms: s.latency.commit_fixed_ms,
                commit_per_row_us: s.latency.commit_per_row_us,
            })
            .collect()
    }

    pub fn committed_rows_total(&self) -> u64 {
        self.segments.iter().map(|s| s.store.committed_rows_total()).sum()
    }

    /// Latest commit time over all segments, epoch microseconds.
    pub fn last_commit_at_us(&self) -> Option<u64> {
        self.segments.iter().filter_map(|s| s.store.last_commit_at_us()).max()
    }

    pub fn shutdown(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for SegmentDaemon {
    fn drop(&mut self) {
        self.shutdown();
    }
}

async fn accept_loop(listener: TcpListener, store: Arc<SegmentStore>, latency: LatencyModel) {
    let commit_lane = Arc::new(Mutex::new(()));
    let mut conns = tokio::task::JoinSet::new();
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let _ = stream.set_nodelay(true);
                let store = store.clone();
                let lane = commit_lane.clone();
                conns.spawn(async move {
                    if let Err(e) = serve_connection(stream, &store, latency, &lane).await {
                        tracing::debug!(%peer, error = %e, "segment connection closed");
                    }
                });
            }
            Err(e) => tracing::warn!(error = %e, "accept failed"),
        }
        while conns.try_join_next().is_some() {}
    }
}

/// Aborts the connection's open transaction when dropped, so a vanished
/// slot never leaves staged rows behind.
struct OpenTxn<'a> {
    store: &'a SegmentStore,
    txn: Option<String>,
}

impl Drop for OpenTxn<'_> {
    fn drop(&mut self) {
        if let Some(txn) = self.txn.take() {
            if self.store.abort(&txn) {
                tracing::info!(segment = self.store.segment_id(), %txn, "aborted on disconnect");
            }
        }
    }
}

async fn serve_connection(
    stream: TcpStream,
    store: &SegmentStore,
    latency: LatencyModel,
    lane: &Mutex<()>,
) -> std::io::Result<()> {
    let (rd, wr) = stream.into_split();
    let mut rd = BufReader::with_capacity(256 * 1024, rd);
    let mut wr = BufWriter::new(wr);
    let mut open = OpenTxn { store, txn: None };
    let mut line = String::new();
    loop {
        line.clear();
        if rd.read_line(&mut line).await? == 0 {
            return Ok(());
        }
        let reply = match Request::parse(&line) {
            Err(_) => Some(Response::Error { txn: NO_TXN.into(), reason: ErrorReason::Malformed }),
            Ok(Request::Begin { txn, table }) => {
                if open.txn.is_some() {
                    Some(Response::Error { txn, reason: ErrorReason::ProtocolOrder })
                } else {
                    tokio::time::sleep(latency.begin_latency()).await;
                    match store.handle_begin(&txn, &table, epoch_micros()) {
                        Ok(()) => {
                            open.txn = Some(txn.clone());
                            Some(Response::Ready { txn })
                        }
                        Err(reason) => Some(Response::Error { txn, reason }),
                    }
                }
            }
            Ok(Request::Row(row)) => match &open.txn {
                None => Some(Response::Error { txn: NO_TXN.into(), reason: ErrorReason::ProtocolOrder }),
                Some(txn) => store
                    .handle_data(txn, &row)
                    .err()
                    .map(|reason| Response::Error { txn: txn.clone(), reason }),
            },
            Ok(Request::Eof) => match open.txn.clone() {
                None => Some(Response::Error { txn: NO_TXN.into(), reason: ErrorReason::ProtocolOrder }),
                Some(txn) => Some(match store.handle_eof(&txn) {
                    Err(reason) => Response::Error { txn, reason },
                    Ok(rows) => {
                        let _turn = lane.lock().await;
                        tokio::time::sleep(latency.commit_latency(rows)).await;
                        match store.complete_commit(&txn, epoch_micros()) {
                            Ok(rows) => {
                                open.txn = None;
                                Response::Committed { txn, rows }
                            }
                            Err(reason) => Response::Error { txn, reason },
                        }
                    }
                }),
            },
        };
        if let Some(reply) = reply {
            wr.write_all(reply.to_string().as_bytes()).await?;
            wr.flush().await?;
        }
    }
}
