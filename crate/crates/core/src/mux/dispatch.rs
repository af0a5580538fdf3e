//! The loop that owns a backend device and feeds it batches.

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use tokio::sync::{watch, Notify};
use tracing::{debug, warn};

use super::{Batch, BatchingPolicy, MuxError, MuxQueue, SchedulerStats};
use crate::asr::{error_results, Backend, TranscriptResult};
use crate::clock::Clock;
use crate::vad::SpeechSegment;

/// Upper bound on how long the loop sleeps between policy evaluations.
pub const POLL_QUANTUM_MS: u64 = 10;

/// Receives every result the dispatch loop produces, success or error.
pub trait ResultSink: Send + Sync {
    fn route(&self, result: TranscriptResult);
}

impl<F: Fn(TranscriptResult) + Send + Sync> ResultSink for F {
    fn route(&self, result: TranscriptResult) {
        self(result)
    }
}

/// [`MuxQueue`] shared between session handlers and one dispatch loop.
pub struct SharedQueue {
    inner: Mutex<MuxQueue>,
    wake: Notify,
    clock: Arc<dyn Clock>,
}

impl SharedQueue {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Mutex::new(MuxQueue::new()),
            wake: Notify::new(),
            clock,
        }
    }

    fn lock(&self) -> MutexGuard<'_, MuxQueue> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Enqueues at the current clock reading and wakes the dispatcher.
    pub fn enqueue(&self, segment: SpeechSegment) -> Result<(), MuxError> {
        let now = self.clock.now_ms().max(segment.endpoint_time);
        self.lock().enqueue_segment(segment, now)?;
        self.wake.notify_one();
        Ok(())
    }

    pub fn stats(&self) -> SchedulerStats {
        let now = self.clock.now_ms();
        self.lock().stats(now)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn try_form(&self, policy: &BatchingPolicy) -> (Option<Batch>, Option<u64>) {
        let now = self.clock.now_ms();
        let mut q = self.lock();
        let batch = q.try_form_batch(policy, now);
        (batch, q.next_deadline(policy).map(|d| d.saturating_sub(now)))
    }

    fn close_and_drain(&self, max_batch: usize) -> Option<Batch> {
        let now = self.clock.now_ms();
        let mut q = self.lock();
        q.close();
        q.drain_batch(max_batch, now)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DispatchSummary {
    pub batches: u64,
    pub segments: u64,
    pub failed_segments: u64,
}

/// Repeatedly forms batches under `policy` and runs them on `backend` until
/// `shutdown` turns true. On shutdown the queue is closed to new segments and
/// whatever is left is drained in `max_batch`-sized batches before returning.
pub async fn dispatch_loop(
    queue: Arc<SharedQueue>,
    policy: BatchingPolicy,
    backend: Arc<dyn Backend>,
    sink: Arc<dyn ResultSink>,
    mut shutdown: watch::Receiver<bool>,
) -> DispatchSummary {
    let mut summary = DispatchSummary::default();
    let max_batch = policy.max_batch.min(backend.max_batch()).max(1);
    let policy = BatchingPolicy { max_batch, ..policy };
    loop {
        if *shutdown.borrow() {
            break;
        }
        let (batch, until_deadline) = queue.try_form(&policy);
        if let Some(batch) = batch {
            run_batch(&queue, &batch, backend.as_ref(), sink.as_ref(), &mut summary).await;
            continue;
        }
        let wait = until_deadline.map_or(POLL_QUANTUM_MS, |d| d.clamp(1, POLL_QUANTUM_MS));
        tokio::select! {
            _ = queue.wake.notified() => {}
            _ = tokio::time::sleep(Duration::from_millis(wait)) => {}
            changed = shutdown.changed() => {
                if changed.is_err() {
                    break;
                }
            }
        }
    }
    while let Some(batch) = queue.close_and_drain(max_batch) {
        run_batch(&queue, &batch, backend.as_ref(), sink.as_ref(), &mut summary).await;
    }
    debug!(?summary, "dispatch loop stopped");
    summary
}

async fn run_batch(
    queue: &SharedQueue,
    batch: &Batch,
    backend: &dyn Backend,
    sink: &dyn ResultSink,
    summary: &mut DispatchSummary,
) {
    let mut results = backend.transcribe_batch(batch).await;
    let matches = results.len() == batch.len()
        && results.iter().zip(batch.segment_ids()).all(|(r, id)| r.segment_id == id);
    if !matches {
        warn!(batch = batch.batch_id, rows = batch.len(), got = results.len(), "backend broke the result contract");
        let backend_ms = results.first().map_or(0, |r| r.backend_time_ms);
        results = error_results(batch, "backend returned results that do not match the batch", backend_ms);
    }
    let now = queue.now_ms();
    summary.batches += 1;
    for (mut r, entry) in results.into_iter().zip(&batch.entries) {
        summary.segments += 1;
        if !r.is_ok() {
            summary.failed_segments += 1;
        }
        r.e2e_latency_ms = now.saturating_sub(entry.segment.endpoint_time);
        sink.route(r);
    }
}
