//! Identifiers, timestamps and the PCM frame carrier shared by every stage.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Monotonic timestamp or duration in milliseconds.
pub type Millis = u64;

/// Default capture rate for mono PCM16 audio.
pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 16_000;

/// Client-chosen identifier of a dictation session.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SessionId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Server-assigned identifier of a speech segment.
///
/// Ordering follows the numeric value, which is also the tiebreak used by
/// the scheduler's priority key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentId(pub u64);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seg-{:08}", self.0)
    }
}

impl std::str::FromStr for SegmentId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("seg-").unwrap_or(s).parse().map(SegmentId)
    }
}

/// Hands out segment ids that are unique for the lifetime of the generator.
///
/// Cloning shares the underlying counter, so every session of one server
/// draws from the same sequence.
#[derive(Debug, Clone)]
pub struct SegmentIdGen {
    next: Arc<AtomicU64>,
}

impl SegmentIdGen {
    pub fn new(seed: u64) -> Self {
        Self {
            next: Arc::new(AtomicU64::new(seed)),
        }
    }

    pub fn next_id(&self) -> SegmentId {
        SegmentId(self.next.fetch_add(1, Ordering::Relaxed))
    }
}

impl Default for SegmentIdGen {
    fn default() -> Self {
        Self::new(1)
    }
}

/// A block of mono PCM16 samples from one session.
///
/// `capture_time` is the instant the first sample of the frame was captured.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioFrame {
    pub session_id: SessionId,
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
    pub capture_time: Millis,
}

impl AudioFrame {
    pub fn new(
        session_id: SessionId,
        samples: Vec<i16>,
        sample_rate_hz: u32,
        capture_time: Millis,
    ) -> Self {
        Self {
            session_id,
            samples,
            sample_rate_hz,
            capture_time,
        }
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / f64::from(self.sample_rate_hz)
    }
}

/// Number of samples covering `ms` milliseconds at `rate_hz`.
pub fn samples_for_ms(ms: u64, rate_hz: u32) -> usize {
    (ms * u64::from(rate_hz) / 1000) as usize
}

/// Decodes little-endian PCM16 bytes. Returns `None` for an odd byte count.
pub fn decode_pcm16_le(bytes: &[u8]) -> Option<Vec<i16>> {
    if !bytes.len().is_multiple_of(2) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect(),
    )
}

pub fn encode_pcm16_le(samples: &[i16]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}
