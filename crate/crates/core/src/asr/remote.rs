//! Client for an external inference service that hosts the real model.
//!
//! One HTTP POST per batch. The service receives every segment's PCM along
//! with a single set of decode options (prompt text, timestamp suppression)
//! and answers with one text per segment, in request order.

use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use tokio::sync::Mutex;
use tracing::warn;

use super::{error_results, Backend, TranscriptResult};
use crate::audio::{encode_pcm16_le, Millis};
use crate::mux::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteBackendConfig {
    pub endpoint_url: String,
    /// Passed through untouched; shared by every segment of a batch.
    pub decode_options: Map<String, Value>,
    pub request_timeout_ms: Millis,
    pub max_retries: u32,
}

impl Default for RemoteBackendConfig {
    fn default() -> Self {
        let mut decode_options = Map::new();
        decode_options.insert("prompt".into(), Value::String(String::new()));
        decode_options.insert("without_timestamps".into(), Value::Bool(true));
        Self {
            endpoint_url: "http://127.0.0.1:9000/transcribe".into(),
            decode_options,
            request_timeout_ms: 30_000,
            max_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireSegment {
    pub segment_id: String,
    pub audio_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireRequest {
    pub batch_id: String,
    pub sample_rate_hz: u32,
    pub decode_options: Map<String, Value>,
    pub segments: Vec<WireSegment>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireResultRow {
    pub segment_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WireResponse {
    pub batch_id: String,
    pub results: Vec<WireResultRow>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RemoteError {
    #[error("request timed out after {0} ms")]
    Timeout(Millis),
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("service answered HTTP {0}")]
    Http(u16),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("row count mismatch: sent {sent} segments, received {received} results")]
    RowCountMismatch { sent: usize, received: usize },
    #[error("batch mixes sample rates")]
    MixedSampleRates,
}

impl RemoteError {
    fn is_retryable(&self) -> bool {
        matches!(self, RemoteError::Timeout(_) | RemoteError::Connect(_) | RemoteError::Http(_))
    }
}

pub struct RemoteBackend {
    cfg: RemoteBackendConfig,
    client: reqwest::Client,
    instance: u64,
    // At most one batch in flight per device.
    device: Mutex<()>,
}

impl RemoteBackend {
    pub fn new(cfg: RemoteBackendConfig) -> Self {
        let instance = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        Self {
            cfg,
            client: reqwest::Client::new(),
            instance,
            device: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &RemoteBackendConfig {
        &self.cfg
    }

    /// Request body for `batch`. Retries of one batch reuse the same `batch_id`.
    pub fn build_request(&self, batch: &Batch) -> Result<WireRequest, RemoteError> {
        let rate = batch
            .entries
            .first()
            .map_or(crate::audio::DEFAULT_SAMPLE_RATE_HZ, |e| e.segment.sample_rate_hz);
        if batch.entries.iter().any(|e| e.segment.sample_rate_hz != rate) {
            return Err(RemoteError::MixedSampleRates);
        }
        Ok(WireRequest {
            batch_id: format!("{:x}-{}", self.instance, batch.batch_id),
            sample_rate_hz: rate,
            decode_options: self.cfg.decode_options.clone(),
            segments: batch
                .entries
                .iter()
                .map(|e| WireSegment {
                    segment_id: e.segment.segment_id.to_string(),
                    audio_b64: BASE64.encode(encode_pcm16_le(&e.segment.samples)),
                })
                .collect(),
        })
    }

    async fn attempt(&self, req: &WireRequest) -> Result<WireResponse, RemoteError> {
        let timeout = Duration::from_millis(self.cfg.request_timeout_ms);
        let resp = self
            .client
            .post(&self.cfg.endpoint_url)
            .timeout(timeout)
            .json(req)
            .send()
            .await
            .map_err(|e| classify(e, self.cfg.request_timeout_ms))?;
        if !resp.status().is_success() {
            return Err(RemoteError::Http(resp.status().as_u16()));
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| classify(e, self.cfg.request_timeout_ms))?;
        serde_json::from_slice(&body).map_err(|e| RemoteError::Malformed(e.to_string()))
    }

    /// Sends `batch`, retrying transient failures, and returns one text per entry.
    pub async fn call(&self, batch: &Batch) -> Result<Vec<String>, RemoteError> {
        let req = self.build_request(batch)?;
        let mut attempt = 0;
        let resp = loop {
            match self.attempt(&req).await {
                Ok(resp) => break resp,
                Err(e) if e.is_retryable() && attempt < self.cfg.max_retries => {
                    attempt += 1;
                    warn!(batch_id = %req.batch_id, attempt, error = %e, "retrying batch");
                }
                Err(e) => return Err(e),
            }
        };
        validate_response(&req, resp)
    }
}

fn classify(e: reqwest::Error, timeout_ms: Millis) -> RemoteError {
    if e.is_timeout() {
        RemoteError::Timeout(timeout_ms)
    } else if e.is_decode() || e.is_body() {
        RemoteError::Malformed(e.to_string())
    } else {
        RemoteError::Connect(e.to_string())
    }
}

/// Maps response rows to request rows by index.
pub fn validate_response(req: &WireRequest, resp: WireResponse) -> Result<Vec<String>, RemoteError> {
    if resp.batch_id != req.batch_id {
        return Err(RemoteError::Malformed(format!(
            "batch_id {} does not match request {}",
            resp.batch_id, req.batch_id
        )));
    }
    if resp.results.len() != req.segments.len() {
        return Err(RemoteError::RowCountMismatch {
            sent: req.segments.len(),
            received: resp.results.len(),
        });
    }
    req.segments
        .iter()
        .zip(resp.results)
        .map(|(sent, row)| {
            if row.segment_id == sent.segment_id {
                Ok(row.text)
            } else {
                Err(RemoteError::Malformed(format!(
                    "row for {} answered as {}",
                    sent.segment_id, row.segment_id
                )))
            }
        })
        .collect()
}

#[async_trait]
impl Backend for RemoteBackend {
    async fn transcribe_batch(&self, batch: &Batch) -> Vec<TranscriptResult> {
        let _device = self.device.lock().await;
        let started = Instant::now();
        let outcome = self.call(batch).await;
        let elapsed = started.elapsed().as_millis() as Millis;
        match outcome {
            Ok(texts) => batch
                .entries
                .iter()
                .zip(texts)
                .map(|(e, text)| TranscriptResult::ok(e, batch, text, elapsed))
                .collect(),
            Err(e) => {
                warn!(batch = batch.batch_id, error = %e, "remote batch failed");
                error_results(batch, &e.to_string(), elapsed)
            }
        }
    }
}
