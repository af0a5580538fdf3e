//! Deterministic stand-in for a GPU backend.
//!
//! A batch of `B` rows costs `fixed_overhead_ms + per_row_ms * ceil(B / width)`
//! and occupies the simulated device exclusively for that long. Text is a
//! pseudo-word sequence derived from the segment audio and the seed.

use std::time::Duration;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use super::{Backend, TranscriptResult};
use crate::audio::Millis;
use crate::mux::Batch;
use crate::vad::{rms_dbfs, SpeechSegment};

/// Below this level a segment is treated as containing no speech.
const SILENCE_DBFS: f64 = -60.0;
const WORDS_PER_SECOND: f64 = 2.5;

const LEXICON: &[&str] = &[
    "the", "court", "counsel", "witness", "record", "order", "motion", "hearing", "petition",
    "state", "appeal", "judgment", "evidence", "section", "filed", "dated", "respondent",
    "petitioner", "learned", "submits", "matter", "listed", "adjourned", "next", "date", "bail",
    "granted", "denied", "affidavit", "notice", "issued", "returnable", "within", "four", "weeks",
    "heard", "parties", "perused", "material", "accordingly", "disposed", "of", "and", "to", "on",
    "by", "for", "is", "was", "be", "as", "that", "this", "application", "stands", "allowed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimBackendConfig {
    pub fixed_overhead_ms: Millis,
    pub per_row_ms: Millis,
    pub window_s: f64,
    pub seed: u64,
    pub concurrency_width: usize,
}

impl Default for SimBackendConfig {
    fn default() -> Self {
        Self {
            fixed_overhead_ms: 500,
            per_row_ms: 120,
            window_s: 30.0,
            seed: 0,
            concurrency_width: 1,
        }
    }
}

impl SimBackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.per_row_ms == 0 {
            return Err("per_row_ms must be positive".into());
        }
        if !(self.window_s > 0.0) {
            return Err("window_s must be positive".into());
        }
        if self.concurrency_width == 0 {
            return Err("concurrency_width must be at least 1".into());
        }
        Ok(())
    }

    /// Simulated duration of one call on `rows` segments.
    pub fn batch_cost_ms(&self, rows: usize) -> Millis {
        let width = self.concurrency_width.max(1);
        self.fixed_overhead_ms + self.per_row_ms * rows.div_ceil(width) as Millis
    }

    /// Deterministic transcript for one segment; empty for silent audio.
    pub fn transcript_text(&self, segment: &SpeechSegment) -> String {
        if rms_dbfs(&segment.samples) < SILENCE_DBFS {
            return String::new();
        }
        let spoken_s = segment.duration_s.min(self.window_s);
        let words = (WORDS_PER_SECOND * spoken_s).ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.text_seed(segment));
        let mut text = String::with_capacity(words * 8);
        for i in 0..words {
            if i > 0 {
                text.push(' ');
            }
            text.push_str(LEXICON[rng.random_range(0..LEXICON.len())]);
        }
        text
    }

    // FNV-1a over the audio, mixed with the seed and duration.
    fn text_seed(&self, segment: &SpeechSegment) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        let mut mix = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for s in &segment.samples {
            for b in s.to_le_bytes() {
                mix(b);
            }
        }
        for b in segment.duration_s.to_bits().to_le_bytes() {
            mix(b);
        }
        h
    }

    /// Results for `batch` as if the call took `batch_cost_ms`.
    pub fn transcribe_now(&self, batch: &Batch) -> Vec<TranscriptResult> {
        let cost = self.batch_cost_ms(batch.len());
        batch
            .entries
            .iter()
            .map(|e| TranscriptResult::ok(e, batch, self.transcript_text(&e.segment), cost))
            .collect()
    }
}

/// Sim backend that holds its device for the simulated duration in wall time.
#[derive(Debug)]
pub struct SimBackend {
    cfg: SimBackendConfig,
    time_scale: f64,
    device: Mutex<()>,
}

impl SimBackend {
    pub fn new(cfg: SimBackendConfig) -> Self {
        Self::with_time_scale(cfg, 1.0)
    }

    /// `time_scale` multiplies the wall-clock sleep; reported backend times
    /// are unaffected. Zero makes calls return immediately.
    pub fn with_time_scale(cfg: SimBackendConfig, time_scale: f64) -> Self {
        Self {
            cfg,
            time_scale,
            device: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &SimBackendConfig {
        &self.cfg
    }
}

#[async_trait]
impl Backend for SimBackend {
    async fn transcribe_batch(&self, batch: &Batch) -> Vec<TranscriptResult> {
        let _device = self.device.lock().await;
        let results = self.cfg.transcribe_now(batch);
        let cost = self.cfg.batch_cost_ms(batch.len());
        if self.time_scale > 0.0 {
            tokio::time::sleep(Duration::from_secs_f64(cost as f64 * self.time_scale / 1000.0)).await;
        }
        results
    }
}
