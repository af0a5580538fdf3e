//! Server configuration file (TOML) and its CLI overrides.

use std::path::{Path, PathBuf};

use dictation_core::asr::{RemoteBackendConfig, SimBackendConfig};
use dictation_core::mux::BatchingPolicy;
use dictation_core::vad::VadConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerMode {
    /// Segments from every session share one batching queue.
    Multiplexed,
    /// Each session's audio is transcribed as one job after it ends, one job at a time.
    #[serde(alias = "sequential_baseline")]
    Sequential,
}

impl std::str::FromStr for ServerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiplexed" => Ok(Self::Multiplexed),
            "sequential" | "sequential_baseline" => Ok(Self::Sequential),
            other => Err(format!("unknown mode {other:?} (expected multiplexed|sequential)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Sim(SimBackendConfig),
    Remote(RemoteBackendConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::Sim(SimBackendConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen_address: String,
    pub mode: ServerMode,
    pub vad: VadConfig,
    pub policy: BatchingPolicy,
    pub backend: BackendConfig,
    pub max_sessions: usize,
    /// Sliding window behind `perceived_rtf` and the latency percentiles.
    pub stats_window_s: u64,
    /// Multiplier on the sim backend's wall-clock sleep (1.0 = real time).
    pub sim_time_scale: f64,
    /// How long a new connection may take to send its start message.
    pub handshake_timeout_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen_address: "127.0.0.1:8080".into(),
            mode: ServerMode::Multiplexed,
            vad: VadConfig::default(),
            policy: BatchingPolicy::default(),
            backend: BackendConfig::default(),
            max_sessions: 20,
            stats_window_s: 60,
            sim_time_scale: 1.0,
            handshake_timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_sessions == 0 {
            return Err(ConfigError::Invalid("max_sessions must be at least 1".into()));
        }
        self.vad
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match &self.backend {
            BackendConfig::Sim(sim) => sim.validate().map_err(ConfigError::Invalid)?,
            BackendConfig::Remote(remote) => {
                if remote.request_timeout_ms == 0 {
                    return Err(ConfigError::Invalid("request_timeout_ms must be positive".into()));
                }
            }
        }
        Ok(())
    }
}
