//! Batch transcription contract and its implementations.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::audio::{Millis, SegmentId, SessionId};
use crate::mux::{Batch, QueueEntry};

pub mod remote;
pub mod sim;

pub use remote::{RemoteBackend, RemoteBackendConfig, RemoteError};
pub use sim::{SimBackend, SimBackendConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranscriptStatus {
    Ok,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptResult {
    pub segment_id: SegmentId,
    pub session_id: SessionId,
    pub text: String,
    /// Duration of the whole backend call; identical for every row of a batch.
    pub backend_time_ms: Millis,
    pub queue_wait_ms: Millis,
    /// Segment endpoint to delivery. Filled in by whoever delivers the result.
    pub e2e_latency_ms: Millis,
    pub status: TranscriptStatus,
}

impl TranscriptResult {
    pub fn ok(entry: &QueueEntry, batch: &Batch, text: String, backend_time_ms: Millis) -> Self {
        Self {
            segment_id: entry.segment.segment_id,
            session_id: entry.segment.session_id.clone(),
            text,
            backend_time_ms,
            queue_wait_ms: batch.formed_at.saturating_sub(entry.enqueue_time),
            e2e_latency_ms: 0,
            status: TranscriptStatus::Ok,
        }
    }

    pub fn error(entry: &QueueEntry, batch: &Batch, message: String, backend_time_ms: Millis) -> Self {
        Self {
            text: String::new(),
            status: TranscriptStatus::Error(message),
            ..Self::ok(entry, batch, String::new(), backend_time_ms)
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == TranscriptStatus::Ok
    }
}

/// One error result per entry, in entry order.
pub fn error_results(batch: &Batch, message: &str, backend_time_ms: Millis) -> Vec<TranscriptResult> {
    batch
        .entries
        .iter()
        .map(|e| TranscriptResult::error(e, batch, message.to_owned(), backend_time_ms))
        .collect()
}

/// A device that transcribes whole batches.
///
/// Implementations return exactly one result per entry, in entry order, and
/// never partial results: a failed call yields an error result for every row.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn transcribe_batch(&self, batch: &Batch) -> Vec<TranscriptResult>;

    /// Largest batch the backend accepts.
    fn max_batch(&self) -> usize {
        usize::MAX
    }
}

/// Fixes `samples` to exactly `window_s * sample_rate_hz` samples, truncating
/// or zero-padding at the end.
pub fn pad_or_trim(samples: &[i16], window_s: f64, sample_rate_hz: u32) -> Vec<i16> {
    let n = (window_s * f64::from(sample_rate_hz)).round() as usize;
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&samples[..samples.len().min(n)]);
    out.resize(n, 0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input_is_all_padding() {
        let out = pad_or_trim(&[], 30.0, 16_000);
        assert_eq!(out.len(), 480_000);
        assert!(out.iter().all(|&s| s == 0));
    }

    #[test]
    fn exact_window_unchanged() {
        let input: Vec<i16> = (0..480_000).map(|i| (i % 977) as i16).collect();
        assert_eq!(pad_or_trim(&input, 30.0, 16_000), input);
    }

    #[test]
    fn long_input_truncated_at_end() {
        let input: Vec<i16> = (0..500_000).map(|i| (i % 31_991) as i16 - 15_000).collect();
        let out = pad_or_trim(&input, 30.0, 16_000);
        let expected = &input[0..480_000];
        assert_eq!(out.len(), expected.len());
        assert!(out.iter().zip(expected).all(|(a, b)| a == b));
    }

    proptest! {
        #[test]
        fn output_length_is_constant(len in 0usize..40_000, window_ms in 1u32..2_000) {
            let input = vec![7i16; len];
            let window_s = f64::from(window_ms) / 1000.0;
            let out = pad_or_trim(&input, window_s, 16_000);
            prop_assert_eq!(out.len(), (window_s * 16_000.0).round() as usize);
            let kept = len.min(out.len());
            prop_assert!(out[..kept].iter().all(|&s| s == 7));
            prop_assert!(out[kept..].iter().all(|&s| s == 0));
        }
    }
}
