//! Live sessions and the routing of backend results back to them.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use dictation_core::asr::{TranscriptResult, TranscriptStatus};
use dictation_core::audio::SessionId;
use dictation_core::clock::Clock;
use dictation_core::mux::dispatch::ResultSink;
use dictation_core::routing::{LatencyWindow, ReorderBuffer, ReorderCounters, SegmentMeta};
use thiserror::Error;
use tokio::sync::mpsc::UnboundedSender;
use tracing::{info, warn};

use crate::protocol::ServerMessage;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AdmitError {
    #[error("busy: server is at capacity ({0} sessions)")]
    Busy(usize),
    #[error("session {0:?} is already active")]
    DuplicateSession(String),
}

struct Slot {
    reorder: ReorderBuffer,
    tx: UnboundedSender<ServerMessage>,
    ended: bool,
}

struct Inner {
    sessions: HashMap<SessionId, Slot>,
    window: LatencyWindow,
    dropped: u64,
    duplicates: u64,
}

/// Owns every live session's outbound channel and reorder buffer.
///
/// A session stays registered from a successful start until its `closed`
/// message has been queued (or the client goes away).
pub struct SessionRegistry {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    max_sessions: usize,
}

impl SessionRegistry {
    pub fn new(clock: Arc<dyn Clock>, max_sessions: usize, stats_window_ms: u64) -> Self {
        Self {
            inner: Mutex::new(Inner {
                sessions: HashMap::new(),
                window: LatencyWindow::new(stats_window_ms),
                dropped: 0,
                duplicates: 0,
            }),
            clock,
            max_sessions,
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn admit(&self, id: SessionId, tx: UnboundedSender<ServerMessage>) -> Result<(), AdmitError> {
        let mut inner = self.lock();
        if inner.sessions.contains_key(&id) {
            return Err(AdmitError::DuplicateSession(id.0));
        }
        if inner.sessions.len() >= self.max_sessions {
            return Err(AdmitError::Busy(self.max_sessions));
        }
        inner.sessions.insert(
            id,
            Slot {
                reorder: ReorderBuffer::default(),
                tx,
                ended: false,
            },
        );
        Ok(())
    }

    /// Records an emitted segment; must be called in endpoint order per session.
    pub fn register_segment(&self, id: &SessionId, meta: SegmentMeta) {
        if let Some(slot) = self.lock().sessions.get_mut(id) {
            slot.reorder.register(meta);
        }
    }

    /// The client finished streaming. `closed` goes out once every emitted
    /// segment has been answered.
    pub fn end(&self, id: &SessionId) {
        let mut inner = self.lock();
        if let Some(slot) = inner.sessions.get_mut(id) {
            slot.ended = true;
        }
        close_if_done(&mut inner, id);
    }

    /// Forgets a session whose client went away. Results still in flight for
    /// it will be counted as dropped when they arrive.
    pub fn abandon(&self, id: &SessionId) -> Option<ReorderCounters> {
        let slot = self.lock().sessions.remove(id)?;
        Some(slot.reorder.counters())
    }

    pub fn connected(&self) -> usize {
        self.lock().sessions.len()
    }

    pub fn dropped(&self) -> u64 {
        self.lock().dropped
    }

    pub fn duplicates(&self) -> u64 {
        self.lock().duplicates
    }

    /// `(perceived_rtf, p50_ms, p90_ms)` over the stats window.
    pub fn latency_summary(&self) -> (f64, u64, u64) {
        let now = self.clock.now_ms();
        self.lock().window.summary(now)
    }
}

fn close_if_done(inner: &mut Inner, id: &SessionId) {
    let done = inner
        .sessions
        .get(id)
        .is_some_and(|s| s.ended && s.reorder.outstanding() == 0);
    if done {
        let slot = inner.sessions.remove(id).expect("checked above");
        let c = slot.reorder.counters();
        info!(session = %id, emitted = c.emitted, delivered = c.delivered, errored = c.errored, "session closed");
        let _ = slot.tx.send(ServerMessage::Closed);
    }
}

fn to_message(result: TranscriptResult, e2e_ms: u64) -> ServerMessage {
    match result.status {
        TranscriptStatus::Ok => ServerMessage::Transcript {
            segment_id: result.segment_id.to_string(),
            text: result.text,
            queue_wait_ms: result.queue_wait_ms,
            backend_ms: result.backend_time_ms,
            e2e_ms,
        },
        TranscriptStatus::Error(message) => ServerMessage::Error {
            segment_id: Some(result.segment_id.to_string()),
            message,
        },
    }
}

impl ResultSink for SessionRegistry {
    fn route(&self, result: TranscriptResult) {
        let now = self.clock.now_ms();
        let mut inner = self.lock();
        let inner = &mut *inner;
        let id = result.session_id.clone();
        let Some(slot) = inner.sessions.get_mut(&id) else {
            inner.dropped += 1;
            return;
        };
        let before = slot.reorder.counters();
        let released = match slot.reorder.accept(result) {
            Ok(released) => released,
            Err(e) => {
                warn!(session = %id, error = %e, "closing session");
                let _ = slot.tx.send(ServerMessage::error(e.to_string()));
                let _ = slot.tx.send(ServerMessage::Closed);
                inner.sessions.remove(&id);
                inner.dropped += 1;
                return;
            }
        };
        let after = slot.reorder.counters();
        inner.duplicates += after.duplicates - before.duplicates;
        inner.dropped += after.unknown - before.unknown;
        let mut gone = false;
        for (r, meta) in released {
            let e2e = now.saturating_sub(meta.endpoint_time);
            if r.is_ok() {
                inner.window.record(now, r.backend_time_ms, meta.duration_s, e2e);
            }
            if gone || slot.tx.send(to_message(r, e2e)).is_err() {
                gone = true;
                inner.dropped += 1;
            }
        }
        if gone {
            inner.sessions.remove(&id);
        } else {
            close_if_done(inner, &id);
        }
    }
}
