//! Brute-force reference simulation: advances time one millisecond at a
//! time and applies the batching rules exactly as written, sharing no code
//! with the scheduler or the event engine.

#![allow(dead_code)]

use std::collections::BTreeMap;

use dictation_bench::engine::PreparedSession;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Dynamic { max_batch: usize, max_wait_ms: u64, target_audio_s: f64 },
    Continuous { max_batch: usize, min_batch: usize, starvation_flush_ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cost {
    pub c0: u64,
    pub c1: u64,
    pub width: usize,
}

impl Cost {
    fn of(&self, rows: usize) -> u64 {
        let mut units = rows / self.width;
        if !rows.is_multiple_of(self.width) {
            units += 1;
        }
        self.c0 + self.c1 * units as u64
    }
}

#[derive(Clone, Copy)]
struct Queued {
    id: u64,
    session: usize,
    index: usize,
    enqueued: u64,
    endpoint: u64,
    duration_s: f64,
}

/// Per-segment latency keyed by `(session, index)`.
pub type Latencies = BTreeMap<(usize, usize), u64>;

struct Live {
    start: u64,
    emitted: usize,
    done: usize,
    ended: bool,
}

/// `sequential` selects the whole-session job pipeline; `policy` then only
/// contributes its `max_batch`.
pub fn brute_force(sessions: &[PreparedSession], concurrency: usize, sequential: bool, policy: Policy, cost: Cost) -> Latencies {
    let max_batch = match policy {
        Policy::Dynamic { max_batch, .. } | Policy::Continuous { max_batch, .. } => max_batch,
    };
    let mut out = Latencies::new();
    let mut live: Vec<Option<Live>> = sessions.iter().map(|_| None).collect();
    let mut closed = vec![false; sessions.len()];
    let mut next_session = 0;
    let mut next_id = 1;
    let mut queue: Vec<Queued> = Vec::new();
    // sequential pipeline: FIFO of jobs, each a list of segments
    let mut jobs: Vec<Vec<Queued>> = Vec::new();
    let mut current_job: Vec<Queued> = Vec::new();
    let mut device: Option<(u64, Vec<Queued>)> = None;

    let start = |t: u64, live: &mut Vec<Option<Live>>, next_session: &mut usize| {
        let running = live.iter().filter(|l| l.is_some()).count();
        for _ in running..concurrency {
            if *next_session < sessions.len() {
                live[*next_session] = Some(Live { start: t, emitted: 0, done: 0, ended: false });
                *next_session += 1;
            }
        }
    };
    start(0, &mut live, &mut next_session);

    let mut t: u64 = 0;
    while closed.iter().any(|c| !c) {
        // completions
        if device.as_ref().is_some_and(|d| d.0 == t) {
            let (_, batch) = device.take().unwrap();
            for q in batch {
                out.insert((q.session, q.index), t - q.endpoint);
                live[q.session].as_mut().unwrap().done += 1;
            }
        }
        // segments reaching their endpoint, then streams ending
        for s in 0..sessions.len() {
            let Some(l) = live[s].as_mut() else { continue };
            while l.emitted < sessions[s].segments.len() && l.start + sessions[s].segments[l.emitted].endpoint_ms == t {
                let seg = &sessions[s].segments[l.emitted];
                let q = Queued {
                    id: next_id,
                    session: s,
                    index: l.emitted,
                    enqueued: t,
                    endpoint: t,
                    duration_s: seg.duration_s,
                };
                next_id += 1;
                l.emitted += 1;
                if sequential {
                    current_job.push(q);
                } else {
                    queue.push(q);
                }
            }
            if !l.ended && l.start + sessions[s].stream_ms == t {
                l.ended = true;
                if sequential {
                    let mine: Vec<Queued> = current_job.iter().filter(|q| q.session == s).copied().collect();
                    current_job.retain(|q| q.session != s);
                    jobs.push(mine);
                }
            }
        }
        // sessions that are finished close and are replaced
        for s in 0..sessions.len() {
            let finished = live[s]
                .as_ref()
                .is_some_and(|l| l.ended && l.done == sessions[s].segments.len());
            if finished {
                live[s] = None;
                closed[s] = true;
                start(t, &mut live, &mut next_session);
            }
        }
        // an idle device takes work
        if device.is_none() {
            let batch = if sequential {
                loop {
                    if jobs.is_empty() {
                        break None;
                    }
                    if jobs[0].is_empty() {
                        jobs.remove(0);
                        continue;
                    }
                    let n = max_batch.min(jobs[0].len());
                    let b: Vec<Queued> = jobs[0].drain(..n).collect();
                    if jobs[0].is_empty() {
                        jobs.remove(0);
                    }
                    break Some(b);
                }
            } else {
                take_by_policy(&mut queue, policy, t)
            };
            if let Some(b) = batch {
                device = Some((t + cost.of(b.len()), b));
            }
        }
        t += 1;
        assert!(t < 100_000_000, "reference simulation did not terminate");
    }
    out
}


fn take_by_policy(queue: &mut Vec<Queued>, policy: Policy, t: u64) -> Option<Vec<Queued>> {
    if queue.is_empty() {
        return None;
    }
    queue.sort_by_key(|q| (q.enqueued, q.id));
    let waited = t - queue[0].enqueued;
    match policy {
        Policy::Dynamic { max_batch, max_wait_ms, target_audio_s } => {
            let audio: f64 = queue.iter().map(|q| q.duration_s).sum();
            if waited < max_wait_ms && queue.len() < max_batch && audio < target_audio_s {
                return None;
            }
            let mut n = 0;
            let mut total = 0.0;
            while n < queue.len() && n < max_batch {
                let d = queue[n].duration_s;
                if n > 0 && total + d > target_audio_s {
                    break;
                }
                total += d;
                n += 1;
            }
            Some(queue.drain(..n).collect())
        }
        Policy::Continuous { max_batch, min_batch, starvation_flush_ms } => {
            if queue.len() < min_batch && waited < starvation_flush_ms {
                return None;
            }
            let n = max_batch.min(queue.len());
            Some(queue.drain(..n).collect())
        }
    }
}
