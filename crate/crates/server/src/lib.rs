//! Multi-user dictation server.
//!
//! Clients stream PCM16 audio over a WebSocket at `/ws`; each session is
//! segmented by VAD and its segments are transcribed either through the
//! shared batching queue ([`ServerMode::Multiplexed`]) or as one job per
//! session after the stream ends ([`ServerMode::Sequential`]).

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::extract::{State, WebSocketUpgrade};
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use dictation_core::asr::{Backend, RemoteBackend, SimBackend};
use dictation_core::audio::SegmentIdGen;
use dictation_core::clock::{Clock, MonotonicClock};
use dictation_core::mux::dispatch::{dispatch_loop, ResultSink, SharedQueue};
use dictation_core::routing::StatsSnapshot;
use tokio::sync::watch;
use tokio::task::JoinHandle;

pub mod client;
pub mod config;
pub mod protocol;
pub mod registry;
pub mod sequential;
mod session;

pub use config::{BackendConfig, ServerConfig, ServerMode};
use registry::SessionRegistry;
use sequential::JobQueue;

pub enum Pipeline {
    Multiplexed(Arc<SharedQueue>),
    Sequential(JobQueue),
}

pub struct AppState {
    pub cfg: ServerConfig,
    pub clock: Arc<dyn Clock>,
    pub ids: SegmentIdGen,
    pub registry: Arc<SessionRegistry>,
    pub pipeline: Pipeline,
    started: Instant,
}

impl AppState {
    pub fn stats(&self) -> StatsSnapshot {
        let (perceived_rtf, p50_latency_ms, p90_latency_ms) = self.registry.latency_summary();
        let scheduler = match &self.pipeline {
            Pipeline::Multiplexed(q) => q.stats(),
            Pipeline::Sequential(j) => j.stats(),
        };
        StatsSnapshot {
            connected_users: self.registry.connected(),
            perceived_rtf,
            queue_depth: scheduler.queue_depth,
            p50_latency_ms,
            p90_latency_ms,
            uptime_s: self.started.elapsed().as_secs_f64(),
            dropped_results: self.registry.dropped(),
            duplicate_results: self.registry.duplicates(),
            scheduler,
        }
    }
}

pub fn build_backend(cfg: &ServerConfig) -> Arc<dyn Backend> {
    match &cfg.backend {
        BackendConfig::Sim(sim) => Arc::new(SimBackend::with_time_scale(sim.clone(), cfg.sim_time_scale)),
        BackendConfig::Remote(remote) => Arc::new(RemoteBackend::new(remote.clone())),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/healthz", get(|| async { "ok" }))
        .route("/stats", get(stats))
        .with_state(state)
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| session::run(socket, state))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<StatsSnapshot> {
    Json(state.stats())
}

/// A server bound to a socket and serving in the background.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: watch::Sender<bool>,
    http: JoinHandle<()>,
    worker: JoinHandle<()>,
}

impl RunningServer {
    pub fn ws_url(&self) -> String {
        format!("ws://{}/ws", self.addr)
    }

    pub fn http_url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }

    /// Stops accepting work, finishes what is queued, then stops serving.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.worker.await;
        let _ = self.http.await;
    }
}

pub async fn start(cfg: ServerConfig) -> anyhow::Result<RunningServer> {
    let backend = build_backend(&cfg);
    start_with_backend(cfg, backend).await
}

/// Like [`start`] with a caller-provided backend.
pub async fn start_with_backend(cfg: ServerConfig, backend: Arc<dyn Backend>) -> anyhow::Result<RunningServer> {
    cfg.validate()?;
    let listener = tokio::net::TcpListener::bind(&cfg.listen_address)
        .await
        .with_context(|| format!("binding {}", cfg.listen_address))?;
    let addr = listener.local_addr()?;
    let clock: Arc<dyn Clock> = Arc::new(MonotonicClock::new());
    let registry = Arc::new(SessionRegistry::new(
        clock.clone(),
        cfg.max_sessions,
        cfg.stats_window_s * 1000,
    ));
    let sink: Arc<dyn ResultSink> = registry.clone();
    let (shutdown, shutdown_rx) = watch::channel(false);

    let (pipeline, worker) = match cfg.mode {
        ServerMode::Multiplexed => {
            let queue = Arc::new(SharedQueue::new(clock.clone()));
            let worker = tokio::spawn({
                let (queue, policy, rx) = (queue.clone(), cfg.policy.clone(), shutdown_rx.clone());
                async move {
                    dispatch_loop(queue, policy, backend, sink, rx).await;
                }
            });
            (Pipeline::Multiplexed(queue), worker)
        }
        ServerMode::Sequential => {
            let (jobs, receiver) = sequential::job_queue(clock.clone());
            let worker = tokio::spawn(sequential::run_jobs(
                receiver,
                cfg.policy.max_batch,
                backend,
                sink,
                clock.clone(),
                shutdown_rx.clone(),
            ));
            (Pipeline::Sequential(jobs), worker)
        }
    };

    let state = Arc::new(AppState {
        cfg,
        clock,
        ids: SegmentIdGen::default(),
        registry,
        pipeline,
        started: Instant::now(),
    });
    let app = router(state.clone());
    let mut http_rx = shutdown_rx;
    let http = tokio::spawn(async move {
        let graceful = async move {
            let _ = http_rx.wait_for(|s| *s).await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(graceful).await {
            tracing::error!(error = %e, "http server failed");
        }
    });
    Ok(RunningServer {
        addr,
        state,
        shutdown,
        http,
        worker,
    })
}
