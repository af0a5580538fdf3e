//! Building blocks for a multi-user dictation service: streaming VAD
//! segmentation, a centralized batching queue that multiplexes segments
//! from every session onto one ASR backend, and the backends themselves.

pub mod asr;
pub mod audio;
pub mod clock;
pub mod metrics;
pub mod mux;
pub mod routing;
pub mod vad;

pub use asr::{Backend, SimBackend, SimBackendConfig, TranscriptResult, TranscriptStatus};
pub use audio::{AudioFrame, Millis, SegmentId, SegmentIdGen, SessionId};
pub use metrics::percentile;
pub use mux::{Batch, BatchingPolicy, MuxQueue, PolicyKind, QueueEntry, SchedulerStats};
pub use vad::{SpeechSegment, VadConfig, VadState};
