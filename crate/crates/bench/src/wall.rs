//! Wall-clock mode: real WebSocket sessions streamed at capture speed.

use std::time::Duration;

use dictation_core::routing::StatsSnapshot;
use dictation_server::client::stream_session;
use dictation_server::protocol::ServerMessage;
use dictation_server::{BackendConfig, ServerConfig};
use tokio::task::JoinSet;

use crate::audio::generate_user_audio;
use crate::report::{cells_from_samples, LatencyReport, Sample};
use crate::scenario::ScenarioConfig;
use crate::BenchError;

const CHUNK_MS: u64 = 100;

/// Streams one user and returns `(bucket, e2e_ms)` per transcript.
async fn one_session(cfg: ScenarioConfig, url: String, session: usize) -> Result<Vec<(usize, u64)>, BenchError> {
    let bucket = cfg.bucket_of(session);
    let user = generate_user_audio(cfg.seed, session as u64, cfg.duration_buckets_s[bucket], cfg.speech_silence_duty);
    let pcm = user.pcm();
    let id = format!("bench-{}-{session}", cfg.seed);
    let timeout = Duration::from_secs(120);
    let msgs = stream_session(&url, &id, user.sample_rate_hz, &pcm, CHUNK_MS, true, timeout)
        .await
        .map_err(|e| BenchError::Aborted(format!("{id}: {e:#}")))?;
    let mut segments = 0;
    let mut out = Vec::new();
    for m in msgs {
        match m {
            ServerMessage::Segment { .. } => segments += 1,
            ServerMessage::Transcript { e2e_ms, .. } => out.push((bucket, e2e_ms)),
            ServerMessage::Error { message, .. } => return Err(BenchError::Aborted(format!("{id}: {message}"))),
            ServerMessage::Closed => {}
        }
    }
    if out.len() != segments {
        return Err(BenchError::Aborted(format!(
            "{id}: {segments} segments but {} transcripts",
            out.len()
        )));
    }
    Ok(out)
}

async fn fetch_stats(base: &str) -> Result<StatsSnapshot, BenchError> {
    let url = format!("{base}/stats");
    let resp = reqwest::get(&url)
        .await
        .map_err(|e| BenchError::Aborted(format!("GET {url}: {e}")))?;
    resp.json()
        .await
        .map_err(|e| BenchError::Aborted(format!("GET {url}: {e}")))
}

pub async fn run_wall(cfg: &ScenarioConfig) -> Result<LatencyReport, BenchError> {
    let (server, ws_url, http_base) = match &cfg.server_url {
        Some(url) => {
            let http = url
                .replacen("ws://", "http://", 1)
                .trim_end_matches("/ws")
                .to_owned();
            (None, url.clone(), http)
        }
        None => {
            let server = dictation_server::start(ServerConfig {
                listen_address: "127.0.0.1:0".into(),
                mode: cfg.mode,
                vad: cfg.vad.clone(),
                policy: cfg.policy.clone(),
                backend: BackendConfig::Sim(cfg.backend.clone()),
                max_sessions: cfg.concurrency.max(1),
                ..ServerConfig::default()
            })
            .await
            .map_err(|e| BenchError::Aborted(format!("starting server: {e:#}")))?;
            let (ws, http) = (server.ws_url(), server.http_url(""));
            (Some(server), ws, http)
        }
    };

    let mut tasks = JoinSet::new();
    let mut next = 0;
    let total = cfg.total_sessions();
    let mut samples: Vec<(usize, u64)> = Vec::new();
    let mut failure = None;
    while next < total.min(cfg.concurrency) {
        tasks.spawn(one_session(cfg.clone(), ws_url.clone(), next));
        next += 1;
    }
    while let Some(joined) = tasks.join_next().await {
        match joined.map_err(|e| BenchError::Aborted(e.to_string())).and_then(|r| r) {
            Ok(s) => samples.extend(s),
            Err(e) => {
                failure = Some(e);
                tasks.abort_all();
                break;
            }
        }
        if next < total {
            tasks.spawn(one_session(cfg.clone(), ws_url.clone(), next));
            next += 1;
        }
    }
    let stats = fetch_stats(&http_base).await;
    if let Some(server) = server {
        server.shutdown().await;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    // per-segment batch sizes are not visible to clients; every cell gets the
    // server-wide mean
    let mean_batch = stats?.scheduler.mean_batch_size;
    let batchless: Vec<Sample> = samples.iter().map(|&(b, l)| (b, l, 0)).collect();
    let mut cells = cells_from_samples(cfg, &batchless)?;
    for c in &mut cells {
        c.mean_batch_size = mean_batch;
    }
    Ok(LatencyReport::new(cfg, cells)?)
}
