//! Per-session result ordering and the sliding-window stats behind the
//! dashboard.

use std::collections::{HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asr::TranscriptResult;
use crate::audio::{Millis, SegmentId};
use crate::metrics::percentile_sorted;
use crate::mux::SchedulerStats;

/// Results a session may buffer while waiting for an earlier segment.
pub const DEFAULT_REORDER_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMeta {
    pub segment_id: SegmentId,
    pub endpoint_time: Millis,
    pub duration_s: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReorderError {
    #[error("more than {0} results buffered out of order")]
    Overflow(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReorderCounters {
    pub emitted: u64,
    pub delivered: u64,
    pub errored: u64,
    pub duplicates: u64,
    pub unknown: u64,
}

/// Releases results in the order their segments were emitted.
#[derive(Debug)]
pub struct ReorderBuffer {
    expected: VecDeque<SegmentMeta>,
    waiting: HashMap<SegmentId, TranscriptResult>,
    released: HashSet<SegmentId>,
    capacity: usize,
    counters: ReorderCounters,
}

impl Default for ReorderBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_REORDER_CAPACITY)
    }
}

impl ReorderBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            expected: VecDeque::new(),
            waiting: HashMap::new(),
            released: HashSet::new(),
            capacity,
            counters: ReorderCounters::default(),
        }
    }

    /// Records an emitted segment. Must be called in endpoint order.
    pub fn register(&mut self, meta: SegmentMeta) {
        self.counters.emitted += 1;
        self.expected.push_back(meta);
    }

    /// Accepts one result and returns every result that is now deliverable.
    pub fn accept(
        &mut self,
        result: TranscriptResult,
    ) -> Result<Vec<(TranscriptResult, SegmentMeta)>, ReorderError> {
        let id = result.segment_id;
        if self.released.contains(&id) || self.waiting.contains_key(&id) {
            self.counters.duplicates += 1;
            return Ok(Vec::new());
        }
        if !self.expected.iter().any(|m| m.segment_id == id) {
            self.counters.unknown += 1;
            return Ok(Vec::new());
        }
        self.waiting.insert(id, result);
        if self.waiting.len() > self.capacity {
            return Err(ReorderError::Overflow(self.capacity));
        }
        let mut out = Vec::new();
        while let Some(head) = self.expected.front() {
            let Some(r) = self.waiting.remove(&head.segment_id) else {
                break;
            };
            let meta = self.expected.pop_front().expect("head exists");
            self.released.insert(meta.segment_id);
            if r.is_ok() {
                self.counters.delivered += 1;
            } else {
                self.counters.errored += 1;
            }
            out.push((r, meta));
        }
        Ok(out)
    }

    /// Segments registered but not yet released.
    pub fn outstanding(&self) -> usize {
        self.expected.len()
    }

    pub fn counters(&self) -> ReorderCounters {
        self.counters
    }
}

/// Dashboard view of a server. Field names are part of the `/stats` contract.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub connected_users: usize,
    pub perceived_rtf: f64,
    pub queue_depth: usize,
    pub p50_latency_ms: Millis,
    pub p90_latency_ms: Millis,
    pub uptime_s: f64,
    pub dropped_results: u64,
    pub duplicate_results: u64,
    pub scheduler: SchedulerStats,
}

#[derive(Debug, Clone, Copy)]
struct Completion {
    at: Millis,
    rtf: f64,
    e2e_ms: Millis,
}

/// Completed results over the trailing `window_ms`.
#[derive(Debug, Clone)]
pub struct LatencyWindow {
    window_ms: Millis,
    items: VecDeque<Completion>,
}

impl LatencyWindow {
    pub fn new(window_ms: Millis) -> Self {
        Self {
            window_ms,
            items: VecDeque::new(),
        }
    }

    pub fn record(&mut self, now: Millis, backend_time_ms: Millis, duration_s: f64, e2e_ms: Millis) {
        let rtf = if duration_s > 0.0 {
            backend_time_ms as f64 / (1000.0 * duration_s)
        } else {
            0.0
        };
        self.items.push_back(Completion { at: now, rtf, e2e_ms });
        self.evict(now);
    }

    fn evict(&mut self, now: Millis) {
        let horizon = now.saturating_sub(self.window_ms);
        while self.items.front().is_some_and(|c| c.at < horizon) {
            self.items.pop_front();
        }
    }

    /// `(perceived_rtf, p50_ms, p90_ms)`; zeros when the window is empty.
    pub fn summary(&mut self, now: Millis) -> (f64, Millis, Millis) {
        self.evict(now);
        if self.items.is_empty() {
            return (0.0, 0, 0);
        }
        let rtf = self.items.iter().map(|c| c.rtf).sum::<f64>() / self.items.len() as f64;
        let mut lat: Vec<Millis> = self.items.iter().map(|c| c.e2e_ms).collect();
        lat.sort_unstable();
        let p50 = percentile_sorted(&lat, 0.5).unwrap_or(0);
        let p90 = percentile_sorted(&lat, 0.9).unwrap_or(0);
        (rtf, p50, p90)
    }
}
