//! Discrete-event simulation of a server on a virtual clock.
//!
//! Segmentation does not depend on when a session starts, so each user's
//! audio is run through the VAD once ([`prepare_sessions`]) and replayed at
//! whatever instant the closed loop starts it. The engine then drives the
//! real scheduler queue (multiplexed) or the real job splitter (sequential)
//! against the sim backend's cost model.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use dictation_core::audio::{AudioFrame, Millis, SegmentId, SegmentIdGen, SessionId};
use dictation_core::mux::{Batch, MuxQueue};
use dictation_core::vad::{SpeechSegment, VadState};
use dictation_server::sequential::{job_batches, Job};
use dictation_server::ServerMode;
use rayon::prelude::*;

use crate::audio::generate_user_audio;
use crate::scenario::ScenarioConfig;

/// One segment as emitted by the VAD, relative to its session's start.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSegment {
    pub speech_start_ms: Millis,
    pub endpoint_ms: Millis,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSession {
    pub bucket: usize,
    pub stream_ms: Millis,
    pub segments: Vec<PreparedSegment>,
}

/// Segments one user's audio with capture times starting at zero.
pub fn segment_user(cfg: &ScenarioConfig, session: usize) -> PreparedSession {
    let bucket = cfg.bucket_of(session);
    let user = generate_user_audio(cfg.seed, session as u64, cfg.duration_buckets_s[bucket], cfg.speech_silence_duty);
    let id = SessionId(format!("user-{session}"));
    let mut vad = VadState::new(id.clone(), SegmentIdGen::default());
    let frame = cfg.vad.frame_samples(user.sample_rate_hz);
    let frame_ms = u64::from(cfg.vad.frame_len_ms);
    let mut segments = Vec::new();
    let mut keep = |s: SpeechSegment| PreparedSegment {
        speech_start_ms: s.speech_start,
        endpoint_ms: s.endpoint_time,
        duration_s: s.duration_s,
    };
    for (k, samples) in user.chunks(frame).enumerate() {
        let f = AudioFrame::new(id.clone(), samples, user.sample_rate_hz, k as u64 * frame_ms);
        let out = vad.ingest_frame(&cfg.vad, &f).expect("generated frames are well formed");
        segments.extend(out.into_iter().map(&mut keep));
    }
    segments.extend(vad.finalize_stream(&cfg.vad).into_iter().map(&mut keep));
    PreparedSession {
        bucket,
        stream_ms: user.duration_ms,
        segments,
    }
}

pub fn prepare_sessions(cfg: &ScenarioConfig) -> Vec<PreparedSession> {
    (0..cfg.total_sessions())
        .into_par_iter()
        .map(|i| segment_user(cfg, i))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRecord {
    pub session: usize,
    /// Position of the segment within its session.
    pub index: usize,
    pub bucket: usize,
    pub segment_id: u64,
    pub endpoint_ms: Millis,
    pub dispatched_ms: Millis,
    pub completed_ms: Millis,
    pub batch_size: usize,
}

impl SegmentRecord {
    pub fn latency_ms(&self) -> Millis {
        self.completed_ms - self.endpoint_ms
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    /// Sorted by `(session, index)`.
    pub records: Vec<SegmentRecord>,
    pub session_start_ms: Vec<Millis>,
    pub session_close_ms: Vec<Millis>,
    pub batches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Emit { session: usize, index: usize },
    StreamEnd { session: usize },
    Complete,
    Poll,
}

struct ActiveSession {
    start: Millis,
    outstanding: usize,
    ended: bool,
    /// Sequential mode accumulates the job here.
    job: Vec<SpeechSegment>,
}

struct Engine<'a> {
    cfg: &'a ScenarioConfig,
    sessions: &'a [PreparedSession],
    now: Millis,
    seq: u64,
    events: BinaryHeap<Reverse<(Millis, u64, Event)>>,
    active: Vec<Option<ActiveSession>>,
    next_session: usize,
    ids: u64,
    /// `(session, index)` for each segment id handed out.
    origin: Vec<(usize, usize)>,
    queue: MuxQueue,
    jobs: VecDeque<Job>,
    /// Remaining batches of the job on the device.
    job_batches: VecDeque<Batch>,
    next_batch_id: u64,
    running: Option<Batch>,
    trace: RunTrace,
}

impl<'a> Engine<'a> {
    fn push(&mut self, at: Millis, ev: Event) {
        self.seq += 1;
        self.events.push(Reverse((at, self.seq, ev)));
    }

    fn start_sessions(&mut self) {
        let live = self.active.iter().filter(|s| s.is_some()).count();
        for _ in live..self.cfg.concurrency {
            if self.next_session >= self.sessions.len() {
                return;
            }
            let s = self.next_session;
            self.next_session += 1;
            self.trace.session_start_ms[s] = self.now;
            self.active[s] = Some(ActiveSession {
                start: self.now,
                outstanding: 0,
                ended: false,
                job: Vec::new(),
            });
            let prepared = &self.sessions[s];
            for (index, seg) in prepared.segments.iter().enumerate() {
                self.push(self.now + seg.endpoint_ms, Event::Emit { session: s, index });
            }
            self.push(self.now + prepared.stream_ms, Event::StreamEnd { session: s });
        }
    }

    fn maybe_close(&mut self, session: usize) {
        let done = self.active[session]
            .as_ref()
            .is_some_and(|a| a.ended && a.outstanding == 0);
        if done {
            self.active[session] = None;
            self.trace.session_close_ms[session] = self.now;
            self.start_sessions();
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Emit { session, index } => {
                let p = &self.sessions[session].segments[index];
                let a = self.active[session].as_mut().expect("emitting session is live");
                self.ids += 1;
                self.origin.push((session, index));
                let seg = SpeechSegment {
                    segment_id: SegmentId(self.ids),
                    session_id: SessionId(session.to_string()),
                    samples: Vec::new(),
                    sample_rate_hz: 16_000,
                    speech_start: a.start + p.speech_start_ms,
                    endpoint_time: a.start + p.endpoint_ms,
                    duration_s: p.duration_s,
                    forced_split: false,
                    final_flush: false,
                    speech_spans: Vec::new(),
                };
                a.outstanding += 1;
                match self.cfg.mode {
                    ServerMode::Multiplexed => self
                        .queue
                        .enqueue_segment(seg, self.now)
                        .expect("fresh id at its endpoint"),
                    ServerMode::Sequential => a.job.push(seg),
                }
            }
            Event::StreamEnd { session } => {
                let a = self.active[session].as_mut().expect("ending session is live");
                a.ended = true;
                if self.cfg.mode == ServerMode::Sequential {
                    let segments = std::mem::take(&mut a.job);
                    self.jobs.push_back(Job {
                        session_id: SessionId(session.to_string()),
                        segments,
                        submitted_at: self.now,
                    });
                }
                self.maybe_close(session);
            }
            Event::Complete => {
                let batch = self.running.take().expect("a batch was running");
                let size = batch.len();
                for e in &batch.entries {
                    let (session, index) = self.origin[e.segment.segment_id.0 as usize - 1];
                    self.trace.records.push(SegmentRecord {
                        session,
                        index,
                        bucket: self.sessions[session].bucket,
                        segment_id: e.segment.segment_id.0,
                        endpoint_ms: e.segment.endpoint_time,
                        dispatched_ms: batch.formed_at,
                        completed_ms: self.now,
                        batch_size: size,
                    });
                    self.active[session].as_mut().expect("owner is live").outstanding -= 1;
                }
                for e in &batch.entries {
                    let (session, _) = self.origin[e.segment.segment_id.0 as usize - 1];
                    self.maybe_close(session);
                }
            }
            Event::Poll => {}
        }
    }

    fn run_on_device(&mut self, mut batch: Batch) {
        batch.formed_at = self.now;
        self.trace.batches += 1;
        let done = self.now + self.cfg.backend.batch_cost_ms(batch.len());
        self.running = Some(batch);
        self.push(done, Event::Complete);
    }

    /// Lets the device pick up work at the current instant.
    fn dispatch(&mut self) {
        if self.running.is_some() {
            return;
        }
        match self.cfg.mode {
            ServerMode::Multiplexed => {
                if let Some(batch) = self.queue.try_form_batch(&self.cfg.policy, self.now) {
                    self.run_on_device(batch);
                } else if let Some(deadline) = self.queue.next_deadline(&self.cfg.policy) {
                    if deadline > self.now {
                        self.push(deadline, Event::Poll);
                    }
                }
            }
            ServerMode::Sequential => loop {
                if let Some(batch) = self.job_batches.pop_front() {
                    self.run_on_device(batch);
                    return;
                }
                let Some(job) = self.jobs.pop_front() else { return };
                let batches = job_batches(job, self.cfg.policy.max_batch, self.next_batch_id, self.now);
                self.next_batch_id += batches.len() as u64;
                self.job_batches.extend(batches);
            },
        }
    }
}

/// Runs the closed loop: `concurrency` sessions at a time, each replaced the
/// instant it closes, until every prepared session has closed.
///
/// Within one instant all due events are applied in push order before the
/// device is offered work, so the outcome does not depend on how events at
/// the same instant are interleaved.
pub fn simulate(cfg: &ScenarioConfig, sessions: &[PreparedSession]) -> RunTrace {
    let n = sessions.len();
    let mut engine = Engine {
        cfg,
        sessions,
        now: 0,
        seq: 0,
        events: BinaryHeap::new(),
        active: (0..n).map(|_| None).collect(),
        next_session: 0,
        ids: 0,
        origin: Vec::new(),
        queue: MuxQueue::new(),
        jobs: VecDeque::new(),
        job_batches: VecDeque::new(),
        next_batch_id: 1,
        running: None,
        trace: RunTrace {
            session_start_ms: vec![0; n],
            session_close_ms: vec![0; n],
            ..RunTrace::default()
        },
    };
    engine.start_sessions();
    while let Some(Reverse((t, _, _))) = engine.events.peek().copied() {
        engine.now = t;
        while let Some(&Reverse((at, _, ev))) = engine.events.peek() {
            if at != t {
                break;
            }
            engine.events.pop();
            engine.handle(ev);
        }
        engine.dispatch();
    }
    debug_assert!(engine.active.iter().all(Option::is_none));
    let mut trace = engine.trace;
    trace.records.sort_by_key(|r| (r.session, r.index));
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use dictation_core::mux::BatchingPolicy;

    fn one_session(endpoints: &[(Millis, f64)], stream_ms: Millis) -> Vec<PreparedSession> {
        vec![PreparedSession {
            bucket: 0,
            stream_ms,
            segments: endpoints
                .iter()
                .map(|&(e, d)| PreparedSegment {
                    speech_start_ms: e - (d * 1000.0) as u64,
                    endpoint_ms: e,
                    duration_s: d,
                })
                .collect(),
        }]
    }

    fn cfg(mode: ServerMode) -> ScenarioConfig {
        ScenarioConfig {
            concurrency: 1,
            duration_buckets_s: vec![(15.0, 30.0)],
            sessions_per_bucket: 1,
            mode,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn lone_segment_waits_then_pays_one_row() {
        // dynamic policy: nothing else arrives, so the wait trigger fires
        let trace = simulate(&cfg(ServerMode::Multiplexed), &one_session(&[(10_000, 9.0)], 20_000));
        let r = &trace.records[0];
        assert_eq!(r.dispatched_ms, 10_200);
        assert_eq!(r.latency_ms(), 200 + 620);
        assert_eq!(trace.session_close_ms[0], 20_000);
    }

    #[test]
    fn continuous_policy_flushes_on_starvation() {
        let mut c = cfg(ServerMode::Multiplexed);
        c.policy = BatchingPolicy::continuous();
        let trace = simulate(&c, &one_session(&[(10_000, 9.0)], 20_000));
        assert_eq!(trace.records[0].latency_ms(), 1_000 + 620);
    }

    #[test]
    fn sequential_waits_for_stream_end() {
        let trace = simulate(
            &cfg(ServerMode::Sequential),
            &one_session(&[(5_000, 4.0), (12_000, 6.0), (19_000, 6.0)], 20_000),
        );
        let lat: Vec<u64> = trace.records.iter().map(SegmentRecord::latency_ms).collect();
        // one batch of three at the end of the stream
        assert_eq!(lat, vec![15_000 + 860, 8_000 + 860, 1_000 + 860]);
        assert!(trace.records.iter().all(|r| r.batch_size == 3));
        assert_eq!(trace.session_close_ms[0], 20_860);
    }

    #[test]
    fn busy_device_batches_arrivals() {
        let trace = simulate(
            &cfg(ServerMode::Multiplexed),
            &one_session(&[(5_000, 4.0), (5_100, 0.5), (5_300, 0.5), (5_400, 0.5)], 20_000),
        );
        let r = &trace.records;
        assert_eq!((r[0].dispatched_ms, r[0].batch_size), (5_200, 2));
        assert_eq!(r[0].completed_ms, 5_200 + 740);
        // two more queued while the device was busy; their wait already expired
        assert_eq!((r[2].dispatched_ms, r[2].batch_size), (5_940, 2));
    }
}
