use dictation_core::asr::SimBackendConfig;
use dictation_core::mux::BatchingPolicy;
use dictation_core::vad::VadConfig;
use dictation_server::ServerMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Virtual,
    Wall,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(Self::Virtual),
            "wall" => Ok(Self::Wall),
            other => Err(format!("unknown clock {other:?} (expected virtual|wall)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub concurrency: usize,
    pub duration_buckets_s: Vec<(f64, f64)>,
    pub sessions_per_bucket: usize,
    pub mode: ServerMode,
    pub clock: ClockMode,
    pub seed: u64,
    pub speech_silence_duty: f64,
    pub backend: SimBackendConfig,
    pub policy: BatchingPolicy,
    pub vad: VadConfig,
    /// Wall clock only: benchmark this server instead of starting one in-process.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server_url: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            concurrency: 5,
            duration_buckets_s: vec![(15.0, 30.0), (30.0, 60.0), (60.0, 105.0), (105.0, 120.0)],
            sessions_per_bucket: 10,
            mode: ServerMode::Multiplexed,
            clock: ClockMode::Virtual,
            seed: 42,
            speech_silence_duty: 0.7,
            backend: SimBackendConfig::default(),
            policy: BatchingPolicy::default(),
            vad: VadConfig::default(),
            server_url: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        if self.sessions_per_bucket == 0 {
            return bad("sessions_per_bucket must be at least 1".into());
        }
        if self.duration_buckets_s.is_empty() {
            return bad("at least one duration bucket is required".into());
        }
        let mut sorted = self.duration_buckets_s.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(lo, hi) in &sorted {
            if !(lo > 0.0 && lo < hi) {
                return bad(format!("bucket [{lo}, {hi}] needs 0 < lo < hi"));
            }
        }
        for w in sorted.windows(2) {
            if w[1].0 < w[0].1 {
                return bad(format!("buckets {:?} and {:?} overlap", w[0], w[1]));
            }
        }
        if !(self.speech_silence_duty > 0.0 && self.speech_silence_duty < 1.0) {
            return bad("speech_silence_duty must be in (0, 1)".into());
        }
        self.backend.validate().map_err(ScenarioError::Invalid)?;
        if self.backend.batch_cost_ms(1) == 0 {
            return bad("backend calls must take time".into());
        }
        self.policy
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.vad
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn total_sessions(&self) -> usize {
        self.sessions_per_bucket * self.duration_buckets_s.len()
    }

    /// Buckets are assigned round-robin in session order.
    pub fn bucket_of(&self, session: usize) -> usize {
        session % self.duration_buckets_s.len()
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&json))
    }
}
