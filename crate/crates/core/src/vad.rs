//! Streaming speech segmentation.
//!
//! Each session owns one [`VadState`]. Frames are classified as speech or
//! silence and fed through a hysteresis state machine
//! (`Silence -> Speech <-> Hangover -> Silence`) that cuts the stream into
//! [`SpeechSegment`]s of bounded length, each carrying real silence padding
//! on both sides. A segment is emitted from the frame that completes its
//! hangover, so downstream stages see it as early as it is knowable.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{
    samples_for_ms, AudioFrame, Millis, SegmentId, SegmentIdGen, SessionId, DEFAULT_SAMPLE_RATE_HZ,
};

/// Full-scale reference for dBFS: an all-`i16::MAX` frame measures 0 dBFS.
const FULL_SCALE: f64 = i16::MAX as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub frame_len_ms: u32,
    pub energy_threshold_db: f64,
    pub speech_trigger_frames: u32,
    pub silence_hangover_ms: u32,
    pub min_segment_s: f64,
    pub max_segment_s: f64,
    pub padding_ms: u32,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 30,
            energy_threshold_db: -40.0,
            speech_trigger_frames: 3,
            silence_hangover_ms: 300,
            min_segment_s: 3.0,
            max_segment_s: 30.0,
            padding_ms: 300,
        }
    }
}

impl VadConfig {
    pub fn validate(&self) -> Result<(), VadError> {
        let bad = |msg: &str| Err(VadError::InvalidConfig(msg.to_owned()));
        if self.frame_len_ms == 0 {
            return bad("frame_len_ms must be positive");
        }
        if !(self.min_segment_s > 0.0 && self.min_segment_s < self.max_segment_s) {
            return bad("require 0 < min_segment_s < max_segment_s");
        }
        if self.padding_ms > self.silence_hangover_ms {
            return bad("padding_ms must not exceed silence_hangover_ms");
        }
        if self.speech_trigger_frames == 0 {
            return bad("speech_trigger_frames must be at least 1");
        }
        if !self.energy_threshold_db.is_finite() {
            return bad("energy_threshold_db must be finite");
        }
        Ok(())
    }

    pub fn frame_samples(&self, rate_hz: u32) -> usize {
        samples_for_ms(u64::from(self.frame_len_ms), rate_hz)
    }

    fn max_samples(&self, rate_hz: u32) -> usize {
        (self.max_segment_s * f64::from(rate_hz)).round() as usize
    }

    fn min_samples(&self, rate_hz: u32) -> usize {
        (self.min_segment_s * f64::from(rate_hz)).round() as usize
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VadError {
    #[error("invalid VAD configuration: {0}")]
    InvalidConfig(String),
    #[error("frame has no samples")]
    EmptyFrame,
    #[error("frame captured at {got} ms arrived after frame captured at {prev} ms")]
    OutOfOrder { prev: Millis, got: Millis },
    #[error("sample rate changed from {expected} Hz to {got} Hz mid-session")]
    SampleRateChanged { expected: u32, got: u32 },
    #[error("frame has {got} samples, expected {expected}")]
    FrameLength { expected: usize, got: usize },
    #[error("a partial frame may only be the last frame of a stream")]
    PartialFrameNotFinal,
    #[error("session segmenter is terminated")]
    Terminated,
}

impl VadError {
    /// Errors that end the session rather than just rejecting one frame.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            VadError::SampleRateChanged { .. } | VadError::Terminated | VadError::InvalidConfig(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameClass {
    Speech,
    Silence,
}

/// RMS level of a block of PCM16 samples in dBFS (`-inf` for digital silence).
pub fn rms_dbfs(samples: &[i16]) -> f64 {
    if samples.is_empty() {
        return f64::NEG_INFINITY;
    }
    let energy: f64 = samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum();
    let rms = (energy / samples.len() as f64).sqrt();
    20.0 * (rms / FULL_SCALE).log10()
}

/// Energy classifier: speech iff the frame's RMS level reaches the threshold.
pub fn classify_frame(cfg: &VadConfig, frame: &AudioFrame) -> Result<FrameClass, VadError> {
    if frame.samples.is_empty() {
        return Err(VadError::EmptyFrame);
    }
    Ok(if rms_dbfs(&frame.samples) >= cfg.energy_threshold_db {
        FrameClass::Speech
    } else {
        FrameClass::Silence
    })
}

/// Pluggable speech/non-speech decision. Implementations must be pure
/// functions of their configuration and the frame.
pub trait FrameClassifier: Send + Sync {
    fn classify(&self, cfg: &VadConfig, frame: &AudioFrame) -> Result<FrameClass, VadError>;
}

/// The default energy-threshold classifier.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnergyClassifier;

impl FrameClassifier for EnergyClassifier {
    fn classify(&self, cfg: &VadConfig, frame: &AudioFrame) -> Result<FrameClass, VadError> {
        classify_frame(cfg, frame)
    }
}

/// A VAD-delimited unit of audio, transcribed independently of its neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechSegment {
    pub segment_id: SegmentId,
    pub session_id: SessionId,
    /// Audio including leading and trailing padding.
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
    pub speech_start: Millis,
    pub endpoint_time: Millis,
    pub duration_s: f64,
    pub forced_split: bool,
    pub final_flush: bool,
    /// Stream sample ranges holding the segment's speech, excluding padding.
    /// More than one range when short utterances were merged forward.
    pub speech_spans: Vec<Range<u64>>,
}

impl SpeechSegment {
    pub fn speech_samples(&self) -> u64 {
        self.speech_spans.iter().map(|r| r.end - r.start).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum VadMode {
    Silence,
    Speech,
    Hangover,
}

/// Finalized audio below the minimum length, waiting to be merged forward.
#[derive(Debug, Clone)]
struct HeldAudio {
    samples: Vec<i16>,
    speech_start: Millis,
    spans: Vec<Range<u64>>,
}

/// Per-session segmentation state. Not shared between sessions.
#[derive(Debug, Clone)]
pub struct VadState {
    mode: VadMode,
    consecutive_speech_frames: u32,
    pending_samples: Vec<i16>,
    segment_start_time: Millis,
    silence_run_ms: u64,
    pre_roll: VecDeque<i16>,

    // Speech frames seen in Silence that have not yet met the trigger count.
    candidate: Vec<i16>,
    candidate_start: Option<(Millis, u64)>,
    held: Option<HeldAudio>,
    // Speech ranges of the pending segment (stream sample indices).
    pending_spans: Vec<Range<u64>>,
    // Length of `pending_samples` up to the end of its last speech frame.
    last_speech_end: usize,

    session_id: SessionId,
    sample_rate_hz: Option<u32>,
    last_capture: Option<Millis>,
    last_frame_end: Millis,
    stream_pos: u64,
    saw_partial: bool,
    terminated: bool,
    ids: SegmentIdGen,
}

impl VadState {
    pub fn new(session_id: SessionId, ids: SegmentIdGen) -> Self {
        Self {
            mode: VadMode::Silence,
            consecutive_speech_frames: 0,
            pending_samples: Vec::new(),
            segment_start_time: 0,
            silence_run_ms: 0,
            pre_roll: VecDeque::new(),
            candidate: Vec::new(),
            candidate_start: None,
            held: None,
            pending_spans: Vec::new(),
            last_speech_end: 0,
            session_id,
            sample_rate_hz: None,
            last_capture: None,
            last_frame_end: 0,
            stream_pos: 0,
            saw_partial: false,
            terminated: false,
            ids,
        }
    }

    pub fn mode(&self) -> VadMode {
        self.mode
    }

    pub fn pending_len(&self) -> usize {
        self.pending_samples.len()
    }

    pub fn silence_run_ms(&self) -> u64 {
        self.silence_run_ms
    }

    pub fn held_len(&self) -> usize {
        self.held.as_ref().map_or(0, |h| h.samples.len())
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz.unwrap_or(DEFAULT_SAMPLE_RATE_HZ)
    }

    /// Classifies `frame` with the energy detector and advances the state machine.
    pub fn ingest_frame(
        &mut self,
        cfg: &VadConfig,
        frame: &AudioFrame,
    ) -> Result<Vec<SpeechSegment>, VadError> {
        self.ingest_with(cfg, frame, &EnergyClassifier)
    }

    pub fn ingest_with(
        &mut self,
        cfg: &VadConfig,
        frame: &AudioFrame,
        classifier: &dyn FrameClassifier,
    ) -> Result<Vec<SpeechSegment>, VadError> {
        self.check_frame(cfg, frame)?;
        let class = classifier.classify(cfg, frame)?;
        Ok(self.advance(cfg, frame, class))
    }

    fn check_frame(&mut self, cfg: &VadConfig, frame: &AudioFrame) -> Result<(), VadError> {
        if self.terminated {
            return Err(VadError::Terminated);
        }
        if frame.samples.is_empty() {
            return Err(VadError::EmptyFrame);
        }
        match self.sample_rate_hz {
            Some(rate) if rate != frame.sample_rate_hz => {
                self.terminated = true;
                return Err(VadError::SampleRateChanged {
                    expected: rate,
                    got: frame.sample_rate_hz,
                });
            }
            _ => {}
        }
        if let Some(prev) = self.last_capture {
            if frame.capture_time < prev {
                return Err(VadError::OutOfOrder {
                    prev,
                    got: frame.capture_time,
                });
            }
        }
        let expected = cfg.frame_samples(frame.sample_rate_hz);
        if frame.samples.len() > expected {
            return Err(VadError::FrameLength {
                expected,
                got: frame.samples.len(),
            });
        }
        if self.saw_partial {
            return Err(VadError::PartialFrameNotFinal);
        }
        self.saw_partial = frame.samples.len() < expected;
        self.sample_rate_hz = Some(frame.sample_rate_hz);
        self.last_capture = Some(frame.capture_time);
        Ok(())
    }

    fn advance(&mut self, cfg: &VadConfig, frame: &AudioFrame, class: FrameClass) -> Vec<SpeechSegment> {
        let rate = frame.sample_rate_hz;
        let frame_start_idx = self.stream_pos;
        let frame_len = frame.samples.len() as u64;
        let frame_ms = frame_len * 1000 / u64::from(rate);
        let frame_end = frame.capture_time + frame_ms;
        self.stream_pos += frame_len;
        self.last_frame_end = frame_end;

        let mut out = Vec::new();
        match (self.mode, class) {
            (VadMode::Silence, FrameClass::Speech) => {
                if self.candidate_start.is_none() {
                    self.candidate_start = Some((frame.capture_time, frame_start_idx));
                }
                self.candidate.extend_from_slice(&frame.samples);
                self.consecutive_speech_frames += 1;
                if self.consecutive_speech_frames >= cfg.speech_trigger_frames {
                    self.open_segment(cfg, rate);
                }
            }
            (VadMode::Silence, FrameClass::Silence) => {
                self.consecutive_speech_frames = 0;
                self.candidate_start = None;
                let candidate = std::mem::take(&mut self.candidate);
                self.push_pre_roll(cfg, rate, &candidate);
                self.push_pre_roll(cfg, rate, &frame.samples);
            }
            (VadMode::Speech | VadMode::Hangover, FrameClass::Speech) => {
                self.pending_samples.extend_from_slice(&frame.samples);
                self.last_speech_end = self.pending_samples.len();
                self.extend_span(frame_start_idx, self.stream_pos);
                self.mode = VadMode::Speech;
                self.silence_run_ms = 0;
            }
            (VadMode::Speech | VadMode::Hangover, FrameClass::Silence) => {
                self.pending_samples.extend_from_slice(&frame.samples);
                self.mode = VadMode::Hangover;
                self.silence_run_ms += frame_ms;
            }
        }

        if self.mode != VadMode::Silence {
            self.split_at_max(cfg, rate, frame_end, &mut out);
            if self.mode == VadMode::Hangover
                && self.silence_run_ms >= u64::from(cfg.silence_hangover_ms)
            {
                if let Some(seg) = self.close_segment(cfg, rate, frame_end, false) {
                    out.push(seg);
                }
            }
        }
        out
    }

    /// Silence -> Speech: pending = held audio or pre-roll, then the trigger frames.
    fn open_segment(&mut self, cfg: &VadConfig, rate: u32) {
        let (trigger_time, trigger_idx) = self
            .candidate_start
            .take()
            .expect("trigger frames recorded");
        let pad = samples_for_ms(u64::from(cfg.padding_ms), rate);
        self.pending_samples.clear();
        self.pending_spans.clear();
        match self.held.take() {
            Some(held) => {
                self.pending_samples.extend_from_slice(&held.samples);
                self.pending_spans = held.spans;
                self.segment_start_time = held.speech_start;
            }
            None => {
                // Zero fill only happens when the stream opens mid-speech.
                let missing = pad.saturating_sub(self.pre_roll.len());
                self.pending_samples.resize(missing, 0);
                self.segment_start_time = trigger_time;
            }
        }
        self.pending_samples.extend(self.pre_roll.drain(..));
        self.pending_samples.append(&mut self.candidate);
        self.last_speech_end = self.pending_samples.len();
        self.pending_spans.push(trigger_idx..self.stream_pos);
        self.consecutive_speech_frames = 0;
        self.silence_run_ms = 0;
        self.mode = VadMode::Speech;
    }

    fn extend_span(&mut self, start: u64, end: u64) {
        match self.pending_spans.last_mut() {
            Some(last) if last.end >= start => last.end = end,
            _ => self.pending_spans.push(start..end),
        }
    }

    fn push_pre_roll(&mut self, cfg: &VadConfig, rate: u32, samples: &[i16]) {
        let cap = samples_for_ms(u64::from(cfg.padding_ms), rate);
        self.pre_roll.extend(samples.iter().copied());
        let excess = self.pre_roll.len().saturating_sub(cap);
        self.pre_roll.drain(..excess);
    }

    /// Cuts forced segments while the pending audio is at the length ceiling.
    fn split_at_max(&mut self, cfg: &VadConfig, rate: u32, frame_end: Millis, out: &mut Vec<SpeechSegment>) {
        let max = cfg.max_samples(rate);
        while self.pending_samples.len() >= max && self.last_speech_end > 0 {
            let rest = self.pending_samples.split_off(max);
            let remainder = rest.len() as u64;
            let split_idx = self.stream_pos - remainder;
            let split_time = frame_end.saturating_sub(remainder * 1000 / u64::from(rate));

            let mut spans = std::mem::take(&mut self.pending_spans);
            let mut tail_spans = Vec::new();
            if let Some(pos) = spans.iter().position(|r| r.end > split_idx) {
                let mut tail = spans.split_off(pos);
                if tail[0].start < split_idx {
                    spans.push(tail[0].start..split_idx);
                    tail[0].start = split_idx;
                }
                tail_spans = tail;
            }

            let samples = std::mem::replace(&mut self.pending_samples, rest);
            out.push(self.make_segment(samples, spans, frame_end, true, false, rate));

            self.pending_spans = tail_spans;
            self.last_speech_end = self.last_speech_end.saturating_sub(max);
            self.segment_start_time = split_time;
        }
    }

    /// Hangover -> Silence. Keeps exactly `padding_ms` of the trailing silence.
    fn close_segment(
        &mut self,
        cfg: &VadConfig,
        rate: u32,
        endpoint: Millis,
        final_flush: bool,
    ) -> Option<SpeechSegment> {
        let pad = samples_for_ms(u64::from(cfg.padding_ms), rate);
        let mut pending = std::mem::take(&mut self.pending_samples);
        let spans = std::mem::take(&mut self.pending_spans);
        let has_speech = self.last_speech_end > 0;
        let cut = pending.len().min(self.last_speech_end + pad);
        self.mode = VadMode::Silence;
        self.silence_run_ms = 0;
        self.last_speech_end = 0;

        // Trailing silence becomes the pre-roll of whatever comes next.
        self.pre_roll.clear();
        let tail_start = pending.len().saturating_sub(pad);
        self.pre_roll.extend(pending[tail_start..].iter().copied());

        if !has_speech {
            // A forced split landed inside the hangover; nothing left to emit.
            return None;
        }
        pending.truncate(cut);
        if !final_flush && pending.len() < cfg.min_samples(rate) {
            self.pre_roll.clear();
            self.held = Some(HeldAudio {
                samples: pending,
                speech_start: self.segment_start_time,
                spans,
            });
            return None;
        }
        Some(self.make_segment(pending, spans, endpoint, false, final_flush, rate))
    }

    fn make_segment(
        &mut self,
        samples: Vec<i16>,
        speech_spans: Vec<Range<u64>>,
        endpoint_time: Millis,
        forced_split: bool,
        final_flush: bool,
        rate: u32,
    ) -> SpeechSegment {
        let duration_s = samples.len() as f64 / f64::from(rate);
        SpeechSegment {
            segment_id: self.ids.next_id(),
            session_id: self.session_id.clone(),
            samples,
            sample_rate_hz: rate,
            speech_start: self.segment_start_time,
            endpoint_time: endpoint_time.max(self.segment_start_time),
            duration_s,
            forced_split,
            final_flush,
            speech_spans,
        }
    }

    /// End-of-stream flush. Pending and held speech is emitted as one
    /// segment marked `final_flush`. Later calls return nothing.
    pub fn finalize_stream(&mut self, cfg: &VadConfig) -> Vec<SpeechSegment> {
        if self.terminated {
            return Vec::new();
        }
        self.terminated = true;
        let rate = self.sample_rate_hz();
        let endpoint = self.last_frame_end;
        let mut out = Vec::new();
        match self.mode {
            VadMode::Speech | VadMode::Hangover => {
                if let Some(seg) = self.close_segment(cfg, rate, endpoint, true) {
                    out.push(seg);
                }
            }
            VadMode::Silence => {
                if let Some(held) = self.held.take() {
                    self.segment_start_time = held.speech_start;
                    out.push(self.make_segment(held.samples, held.spans, endpoint, false, true, rate));
                }
            }
        }
        self.candidate.clear();
        self.pre_roll.clear();
        out
    }
}
