//! Baseline pipeline: a session's audio is transcribed only after the client
//! ends the stream, and jobs run one at a time in submission order.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex, MutexGuard};

use dictation_core::asr::{error_results, Backend};
use dictation_core::audio::{Millis, SessionId};
use dictation_core::clock::Clock;
use dictation_core::mux::dispatch::ResultSink;
use dictation_core::mux::{Batch, QueueEntry, SchedulerStats};
use dictation_core::vad::SpeechSegment;
use tokio::sync::{mpsc, watch};
use tracing::debug;

#[derive(Debug)]
pub struct Job {
    pub session_id: SessionId,
    pub segments: Vec<SpeechSegment>,
    pub submitted_at: Millis,
}

#[derive(Debug, Default)]
struct Counters {
    /// `(submitted_at, segments)` of jobs not yet started.
    waiting: VecDeque<(Millis, usize)>,
    batches: u64,
    rows: u64,
    enqueued: u64,
}

/// Submission side of the job queue, shared with session handlers.
#[derive(Clone)]
pub struct JobQueue {
    tx: mpsc::UnboundedSender<Job>,
    counters: Arc<Mutex<Counters>>,
    clock: Arc<dyn Clock>,
}

pub struct JobReceiver {
    rx: mpsc::UnboundedReceiver<Job>,
    counters: Arc<Mutex<Counters>>,
}

fn lock(c: &Mutex<Counters>) -> MutexGuard<'_, Counters> {
    c.lock().unwrap_or_else(|p| p.into_inner())
}

pub fn job_queue(clock: Arc<dyn Clock>) -> (JobQueue, JobReceiver) {
    let (tx, rx) = mpsc::unbounded_channel();
    let counters = Arc::new(Mutex::new(Counters::default()));
    (
        JobQueue {
            tx,
            counters: counters.clone(),
            clock,
        },
        JobReceiver { rx, counters },
    )
}

impl JobQueue {
    /// Returns false if the runner has shut down.
    pub fn submit(&self, session_id: SessionId, segments: Vec<SpeechSegment>) -> bool {
        let submitted_at = self.clock.now_ms();
        let n = segments.len();
        let mut c = lock(&self.counters);
        if self
            .tx
            .send(Job {
                session_id,
                segments,
                submitted_at,
            })
            .is_err()
        {
            return false;
        }
        c.waiting.push_back((submitted_at, n));
        c.enqueued += n as u64;
        true
    }

    pub fn stats(&self) -> SchedulerStats {
        let now = self.clock.now_ms();
        let c = lock(&self.counters);
        SchedulerStats {
            queue_depth: c.waiting.iter().map(|w| w.1).sum(),
            oldest_wait_ms: c.waiting.front().map_or(0, |w| now.saturating_sub(w.0)),
            batches_formed: c.batches,
            mean_batch_size: if c.batches == 0 {
                0.0
            } else {
                c.rows as f64 / c.batches as f64
            },
            segments_enqueued: c.enqueued,
        }
    }
}

/// Splits a job into backend batches of at most `max_batch` segments, in
/// segment order.
pub fn job_batches(job: Job, max_batch: usize, first_batch_id: u64, formed_at: Millis) -> Vec<Batch> {
    let max_batch = max_batch.max(1);
    let mut out = Vec::new();
    let mut segments = job.segments.into_iter().peekable();
    while segments.peek().is_some() {
        let entries: Vec<QueueEntry> = segments
            .by_ref()
            .take(max_batch)
            .map(|segment| QueueEntry {
                segment,
                enqueue_time: job.submitted_at,
            })
            .collect();
        out.push(Batch {
            batch_id: first_batch_id + out.len() as u64,
            total_audio_s: entries.iter().map(|e| e.segment.duration_s).sum(),
            entries,
            formed_at,
        });
    }
    out
}

/// Runs jobs until `shutdown`; queued jobs are still finished before returning.
pub async fn run_jobs(
    mut jobs: JobReceiver,
    max_batch: usize,
    backend: Arc<dyn Backend>,
    sink: Arc<dyn ResultSink>,
    clock: Arc<dyn Clock>,
    mut shutdown: watch::Receiver<bool>,
) {
    let max_batch = max_batch.min(backend.max_batch()).max(1);
    let mut next_batch_id = 1;
    loop {
        let job = tokio::select! {
            job = jobs.rx.recv() => job,
            _ = async { let _ = shutdown.wait_for(|s| *s).await; } => {
                jobs.rx.close();
                jobs.rx.recv().await
            }
        };
        let Some(job) = job else { break };
        lock(&jobs.counters).waiting.pop_front();
        let session = job.session_id.clone();
        let batches = job_batches(job, max_batch, next_batch_id, clock.now_ms());
        next_batch_id += batches.len() as u64;
        let mut failed: Option<String> = None;
        for mut batch in batches {
            batch.formed_at = clock.now_ms();
            let results = match &failed {
                // once one batch of a job fails, the rest of the job fails with it
                Some(msg) => error_results(&batch, msg, 0),
                None => {
                    let results = backend.transcribe_batch(&batch).await;
                    let matches = results.len() == batch.len()
                        && results.iter().zip(batch.segment_ids()).all(|(r, id)| r.segment_id == id);
                    if matches {
                        results
                    } else {
                        error_results(&batch, "backend returned results that do not match the batch", 0)
                    }
                }
            };
            {
                let mut c = lock(&jobs.counters);
                c.batches += 1;
                c.rows += batch.len() as u64;
            }
            let now = clock.now_ms();
            for (mut r, entry) in results.into_iter().zip(&batch.entries) {
                if let (None, dictation_core::TranscriptStatus::Error(m)) = (&failed, &r.status) {
                    failed = Some(m.clone());
                }
                r.e2e_latency_ms = now.saturating_sub(entry.segment.endpoint_time);
                sink.route(r);
            }
        }
        debug!(session = %session, "job finished");
    }
}
