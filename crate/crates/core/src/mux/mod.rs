//! Centralized segment queue and batch formation.
//!
//! Every session's segments land in one [`MuxQueue`], ordered by
//! `(enqueue_time, segment_id)`. A [`BatchingPolicy`] decides when the head
//! of the queue is worth a backend call; [`dispatch`] drives that decision
//! against a live backend.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{Millis, SegmentId};
use crate::vad::SpeechSegment;

pub mod dispatch;

pub use dispatch::{dispatch_loop, DispatchSummary, ResultSink, SharedQueue};

/// Queue ordering key. Changing the scheduling priority means changing this.
pub type PriorityKey = (Millis, SegmentId);

#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub segment: SpeechSegment,
    pub enqueue_time: Millis,
}

impl QueueEntry {
    pub fn priority_key(&self) -> PriorityKey {
        (self.enqueue_time, self.segment.segment_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Dynamic,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchingPolicy {
    pub kind: PolicyKind,
    pub max_batch: usize,
    /// Dynamic: dispatch once the oldest entry has waited this long.
    pub max_wait_ms: Millis,
    /// Dynamic: dispatch once this much audio is queued; also caps batch audio.
    pub target_audio_s: f64,
    /// Continuous: dispatch once this many entries are queued.
    pub min_batch: usize,
    /// Continuous: dispatch a short batch once the oldest entry waited this long.
    pub starvation_flush_ms: Millis,
}

impl Default for BatchingPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Dynamic,
            max_batch: 8,
            max_wait_ms: 200,
            target_audio_s: 120.0,
            min_batch: 2,
            starvation_flush_ms: 1000,
        }
    }
}

impl BatchingPolicy {
    pub fn dynamic() -> Self {
        Self::default()
    }

    pub fn continuous() -> Self {
        Self {
            kind: PolicyKind::Continuous,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MuxError> {
        let bad = |m: &str| Err(MuxError::InvalidPolicy(m.to_owned()));
        if self.max_batch == 0 {
            return bad("max_batch must be at least 1");
        }
        match self.kind {
            PolicyKind::Dynamic if self.max_wait_ms == 0 => bad("max_wait_ms must be positive"),
            PolicyKind::Dynamic if !(self.target_audio_s > 0.0) => bad("target_audio_s must be positive"),
            PolicyKind::Continuous if self.min_batch == 0 || self.min_batch > self.max_batch => {
                bad("require 1 <= min_batch <= max_batch")
            }
            _ => Ok(()),
        }
    }

    /// How long the oldest entry may wait before a batch is forced.
    pub fn wait_limit_ms(&self) -> Millis {
        match self.kind {
            PolicyKind::Dynamic => self.max_wait_ms,
            PolicyKind::Continuous => self.starvation_flush_ms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub batch_id: u64,
    pub entries: Vec<QueueEntry>,
    pub formed_at: Millis,
    pub total_audio_s: f64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.entries.iter().map(|e| e.segment.segment_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerStats {
    pub queue_depth: usize,
    pub oldest_wait_ms: Millis,
    pub batches_formed: u64,
    pub mean_batch_size: f64,
    pub segments_enqueued: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MuxError {
    #[error("segment {0} was already enqueued")]
    Duplicate(SegmentId),
    #[error("segment {id} enqueued at {now} ms, before its endpoint at {endpoint} ms")]
    BeforeEndpoint { id: SegmentId, now: Millis, endpoint: Millis },
    #[error("queue is closed")]
    Closed,
    #[error("invalid batching policy: {0}")]
    InvalidPolicy(String),
}

/// The shared priority queue. Callers provide exclusion (see [`SharedQueue`]).
#[derive(Debug, Default)]
pub struct MuxQueue {
    entries: BTreeMap<PriorityKey, QueueEntry>,
    seen: HashSet<SegmentId>,
    closed: bool,
    next_batch_id: u64,
    batches_formed: u64,
    segments_batched: u64,
    segments_enqueued: u64,
}

impl MuxQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue_segment(&mut self, segment: SpeechSegment, now: Millis) -> Result<(), MuxError> {
        if self.closed {
            return Err(MuxError::Closed);
        }
        let id = segment.segment_id;
        if now < segment.endpoint_time {
            return Err(MuxError::BeforeEndpoint {
                id,
                now,
                endpoint: segment.endpoint_time,
            });
        }
        if !self.seen.insert(id) {
            return Err(MuxError::Duplicate(id));
        }
        self.entries.insert(
            (now, id),
            QueueEntry {
                segment,
                enqueue_time: now,
            },
        );
        self.segments_enqueued += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Stops accepting segments; queued entries stay until drained.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn oldest_enqueue_time(&self) -> Option<Millis> {
        self.entries.keys().next().map(|k| k.0)
    }

    pub fn queued_audio_s(&self) -> f64 {
        self.entries.values().map(|e| e.segment.duration_s).sum()
    }

    /// Earliest instant at which a wait-based trigger fires, if anything is queued.
    pub fn next_deadline(&self, policy: &BatchingPolicy) -> Option<Millis> {
        self.oldest_enqueue_time().map(|t| t + policy.wait_limit_ms())
    }

    /// Forms a batch if the policy says the queue head is ready. Never blocks.
    pub fn try_form_batch(&mut self, policy: &BatchingPolicy, now: Millis) -> Option<Batch> {
        let oldest = self.oldest_enqueue_time()?;
        let waited = now.saturating_sub(oldest);
        let depth = self.entries.len();
        let max_batch = policy.max_batch.max(1);
        match policy.kind {
            PolicyKind::Dynamic => {
                let fire = waited >= policy.max_wait_ms
                    || depth >= max_batch
                    || self.queued_audio_s() >= policy.target_audio_s;
                if !fire {
                    return None;
                }
                Some(self.take_head(max_batch, Some(policy.target_audio_s), now))
            }
            PolicyKind::Continuous => {
                if depth >= policy.min_batch || waited >= policy.starvation_flush_ms {
                    Some(self.take_head(max_batch, None, now))
                } else {
                    None
                }
            }
        }
    }

    /// Takes up to `max_batch` head entries regardless of policy triggers.
    /// Used to drain the queue at shutdown.
    pub fn drain_batch(&mut self, max_batch: usize, now: Millis) -> Option<Batch> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.take_head(max_batch.max(1), None, now))
    }

    fn take_head(&mut self, max_batch: usize, audio_cap: Option<f64>, now: Millis) -> Batch {
        let mut entries = Vec::with_capacity(max_batch.min(self.entries.len()));
        let mut total = 0.0;
        while entries.len() < max_batch {
            let Some(mut slot) = self.entries.first_entry() else {
                break;
            };
            let d = slot.get_mut().segment.duration_s;
            if let Some(cap) = audio_cap {
                if !entries.is_empty() && total + d > cap {
                    break;
                }
            }
            total += d;
            entries.push(slot.remove());
        }
        self.next_batch_id += 1;
        self.batches_formed += 1;
        self.segments_batched += entries.len() as u64;
        Batch {
            batch_id: self.next_batch_id,
            entries,
            formed_at: now,
            total_audio_s: total,
        }
    }

    pub fn stats(&self, now: Millis) -> SchedulerStats {
        SchedulerStats {
            queue_depth: self.entries.len(),
            oldest_wait_ms: self
                .oldest_enqueue_time()
                .map_or(0, |t| now.saturating_sub(t)),
            batches_formed: self.batches_formed,
            mean_batch_size: if self.batches_formed == 0 {
                0.0
            } else {
                self.segments_batched as f64 / self.batches_formed as f64
            },
            segments_enqueued: self.segments_enqueued,
        }
    }
}
