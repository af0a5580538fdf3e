//! One WebSocket connection: handshake, audio rechunking, segmentation and
//! the outbound message stream.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket};
use dictation_core::audio::{decode_pcm16_le, AudioFrame, Millis, SessionId};
use dictation_core::routing::SegmentMeta;
use dictation_core::vad::{SpeechSegment, VadState};
use futures::stream::SplitSink;
use futures::{SinkExt, StreamExt};
use tokio::sync::mpsc;
use tracing::{debug, info, warn};

use crate::protocol::{ClientMessage, ServerMessage};
use crate::{AppState, Pipeline};

pub const MIN_SAMPLE_RATE_HZ: u32 = 8_000;
pub const MAX_SAMPLE_RATE_HZ: u32 = 48_000;

async fn reject(mut socket: WebSocket, message: String) {
    debug!(%message, "rejecting connection");
    let _ = socket
        .send(Message::Text(ServerMessage::error(message).to_json().into()))
        .await;
    let _ = socket.send(Message::Close(None)).await;
}

async fn handshake(socket: &mut WebSocket, timeout_ms: u64) -> Result<(SessionId, u32), String> {
    let first = tokio::time::timeout(Duration::from_millis(timeout_ms), socket.recv())
        .await
        .map_err(|_| "protocol error: no start message before timeout".to_owned())?;
    let text = match first {
        Some(Ok(Message::Text(t))) => t,
        Some(Ok(_)) => return Err("protocol error: first message must be a start message".into()),
        _ => return Err("protocol error: connection ended before start".into()),
    };
    match serde_json::from_str::<ClientMessage>(&text) {
        Ok(ClientMessage::Start {
            session_id,
            sample_rate_hz,
        }) => {
            if session_id.is_empty() {
                return Err("protocol error: empty session_id".into());
            }
            if !(MIN_SAMPLE_RATE_HZ..=MAX_SAMPLE_RATE_HZ).contains(&sample_rate_hz) {
                return Err(format!("protocol error: unsupported sample rate {sample_rate_hz} Hz"));
            }
            Ok((SessionId(session_id), sample_rate_hz))
        }
        Ok(ClientMessage::End) => Err("protocol error: end before start".into()),
        Err(e) => Err(format!("protocol error: malformed start message: {e}")),
    }
}

async fn write_loop(mut sink: SplitSink<WebSocket, Message>, mut rx: mpsc::UnboundedReceiver<ServerMessage>) {
    while let Some(msg) = rx.recv().await {
        let closed = msg == ServerMessage::Closed;
        if sink.send(Message::Text(msg.to_json().into())).await.is_err() {
            return;
        }
        if closed {
            break;
        }
    }
    let _ = sink.send(Message::Close(None)).await;
}

/// Per-connection state between handshake and the end of the stream.
struct Stream {
    id: SessionId,
    rate: u32,
    vad: VadState,
    carry: Vec<i16>,
    last_capture: Millis,
    audio_samples: u64,
    /// Sequential mode keeps every segment until the stream ends.
    job: Vec<SpeechSegment>,
    tx: mpsc::UnboundedSender<ServerMessage>,
}

impl Stream {
    fn frame_ms(&self, state: &AppState) -> Millis {
        u64::from(state.cfg.vad.frame_len_ms)
    }

    /// Cuts whole frames out of the carry buffer. Frames are stamped so the
    /// newest one ends at `now`.
    fn ingest(&mut self, state: &AppState, now: Millis) -> Result<(), String> {
        let fs = state.cfg.vad.frame_samples(self.rate);
        let ready = self.carry.len() / fs;
        let frame_ms = self.frame_ms(state);
        for i in 0..ready {
            let capture = now
                .saturating_sub((ready - i) as u64 * frame_ms)
                .max(self.last_capture);
            self.last_capture = capture;
            let samples: Vec<i16> = self.carry[i * fs..(i + 1) * fs].to_vec();
            self.push_frame(state, samples, capture)?;
        }
        self.carry.drain(..ready * fs);
        Ok(())
    }

    fn push_frame(&mut self, state: &AppState, samples: Vec<i16>, capture: Millis) -> Result<(), String> {
        let frame = AudioFrame::new(self.id.clone(), samples, self.rate, capture);
        match self.vad.ingest_frame(&state.cfg.vad, &frame) {
            Ok(segments) => {
                for s in segments {
                    self.emit(state, s);
                }
                Ok(())
            }
            Err(e) if e.is_fatal() => Err(e.to_string()),
            Err(e) => {
                let _ = self.tx.send(ServerMessage::error(format!("frame rejected: {e}")));
                Ok(())
            }
        }
    }

    fn finish(&mut self, state: &AppState) -> Result<(), String> {
        if !self.carry.is_empty() {
            let tail = std::mem::take(&mut self.carry);
            let capture = state.clock.now_ms().saturating_sub(self.frame_ms(state)).max(self.last_capture);
            self.push_frame(state, tail, capture)?;
        }
        for s in self.vad.finalize_stream(&state.cfg.vad) {
            self.emit(state, s);
        }
        Ok(())
    }

    fn emit(&mut self, state: &AppState, segment: SpeechSegment) {
        let _ = self.tx.send(ServerMessage::Segment {
            segment_id: segment.segment_id.to_string(),
            start_ms: segment.speech_start,
            duration_ms: (segment.duration_s * 1000.0).round() as u64,
        });
        state.registry.register_segment(
            &self.id,
            SegmentMeta {
                segment_id: segment.segment_id,
                endpoint_time: segment.endpoint_time,
                duration_s: segment.duration_s,
            },
        );
        match &state.pipeline {
            Pipeline::Multiplexed(queue) => {
                let id = segment.segment_id;
                if let Err(e) = queue.enqueue(segment) {
                    // shutting down: answer the segment so the session can close
                    warn!(session = %self.id, error = %e, "segment not enqueued");
                    state.registry.route(dictation_core::TranscriptResult {
                        segment_id: id,
                        session_id: self.id.clone(),
                        text: String::new(),
                        backend_time_ms: 0,
                        queue_wait_ms: 0,
                        e2e_latency_ms: 0,
                        status: dictation_core::TranscriptStatus::Error(e.to_string()),
                    });
                }
            }
            Pipeline::Sequential(_) => self.job.push(segment),
        }
    }
}

use dictation_core::mux::dispatch::ResultSink as _;

pub async fn run(mut socket: WebSocket, state: Arc<AppState>) {
    let (id, rate) = match handshake(&mut socket, state.cfg.handshake_timeout_ms).await {
        Ok(v) => v,
        Err(msg) => return reject(socket, msg).await,
    };
    let (tx, rx) = mpsc::unbounded_channel();
    if let Err(e) = state.registry.admit(id.clone(), tx.clone()) {
        return reject(socket, e.to_string()).await;
    }
    info!(session = %id, rate, "session started");

    let (sink, mut source) = socket.split();
    let writer = tokio::spawn(write_loop(sink, rx));
    let mut stream = Stream {
        vad: VadState::new(id.clone(), state.ids.clone()),
        id: id.clone(),
        rate,
        carry: Vec::new(),
        last_capture: 0,
        audio_samples: 0,
        job: Vec::new(),
        tx,
    };

    let mut ended = false;
    let mut fatal = false;
    while let Some(msg) = source.next().await {
        let msg = match msg {
            Ok(m) => m,
            Err(_) => break,
        };
        match msg {
            Message::Binary(bytes) => {
                let Some(samples) = decode_pcm16_le(&bytes) else {
                    let _ = stream
                        .tx
                        .send(ServerMessage::error("frame rejected: odd number of PCM16 bytes"));
                    continue;
                };
                stream.audio_samples += samples.len() as u64;
                stream.carry.extend_from_slice(&samples);
                let now = state.clock.now_ms();
                if let Err(e) = stream.ingest(&state, now) {
                    let _ = stream.tx.send(ServerMessage::error(e));
                    fatal = true;
                    break;
                }
            }
            Message::Text(text) => match serde_json::from_str::<ClientMessage>(&text) {
                Ok(ClientMessage::End) => {
                    ended = true;
                    break;
                }
                Ok(ClientMessage::Start { .. }) => {
                    let _ = stream.tx.send(ServerMessage::error("protocol error: session already started"));
                }
                Err(e) => {
                    let _ = stream.tx.send(ServerMessage::error(format!("protocol error: {e}")));
                }
            },
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => {}
        }
    }

    if ended {
        if let Err(e) = stream.finish(&state) {
            let _ = stream.tx.send(ServerMessage::error(e));
        }
        if let Pipeline::Sequential(jobs) = &state.pipeline {
            let segments = std::mem::take(&mut stream.job);
            let ids: Vec<_> = segments.iter().map(|s| s.segment_id).collect();
            if !jobs.submit(id.clone(), segments) {
                for sid in ids {
                    state.registry.route(dictation_core::TranscriptResult {
                        segment_id: sid,
                        session_id: id.clone(),
                        text: String::new(),
                        backend_time_ms: 0,
                        queue_wait_ms: 0,
                        e2e_latency_ms: 0,
                        status: dictation_core::TranscriptStatus::Error("server is shutting down".into()),
                    });
                }
            }
        }
        state.registry.end(&id);
        let audio_s = stream.audio_samples as f64 / f64::from(rate);
        debug!(session = %id, audio_s, "stream ended");
        drop(stream);
        let _ = writer.await;
    } else if fatal {
        state.registry.abandon(&id);
        let _ = stream.tx.send(ServerMessage::Closed);
        drop(stream);
        let _ = writer.await;
    } else {
        drop(stream);
        writer.abort();
    }
    if let Some(c) = state.registry.abandon(&id) {
        info!(session = %id, emitted = c.emitted, delivered = c.delivered, "session abandoned");
    }
}
