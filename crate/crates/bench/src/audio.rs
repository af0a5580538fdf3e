//! Synthetic dictation audio: alternating speech (noise) and silence spans.

use std::ops::Range;

use dictation_core::audio::{Millis, DEFAULT_SAMPLE_RATE_HZ};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plan boundaries fall on multiples of this.
pub const PLAN_QUANTUM_MS: Millis = 10;
pub const MIN_SPEECH_MS: Millis = 2_000;
pub const MAX_SPEECH_MS: Millis = 15_000;
/// Peak amplitude range of speech noise; RMS lands between about -29 and -16 dBFS.
const SPEECH_AMPLITUDE: Range<i32> = 2_000..9_001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start_ms: Millis,
    pub len_ms: Millis,
    /// Peak noise amplitude; zero for silence.
    pub amplitude: i16,
}

impl Span {
    pub fn is_speech(&self) -> bool {
        self.amplitude > 0
    }

    pub fn end_ms(&self) -> Millis {
        self.start_ms + self.len_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VirtualUser {
    pub user_id: u64,
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub duration_ms: Millis,
    pub plan: Vec<Span>,
}

fn quantize(ms: f64) -> Millis {
    ((ms / PLAN_QUANTUM_MS as f64).round() as Millis) * PLAN_QUANTUM_MS
}

fn rng_for(seed: u64, user_id: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user_id.wrapping_mul(2).wrapping_add(stream));
    rng
}

/// Draws a user whose total length is uniform in `bucket_s` and whose
/// speaking time is `duty` of it (up to the plan quantum).
///
/// Speech spans are 2–15 s; each is followed by a silence gap, and gaps
/// share the non-speech time with random weights.
pub fn generate_user_audio(seed: u64, user_id: u64, bucket_s: (f64, f64), duty: f64) -> VirtualUser {
    assert!(bucket_s.0 > 0.0 && bucket_s.0 < bucket_s.1, "invalid bucket {bucket_s:?}");
    assert!(duty > 0.0 && duty < 1.0, "duty must be in (0, 1)");
    let mut rng = rng_for(seed, user_id, 0);
    let duration_ms = quantize(rng.random_range(bucket_s.0 * 1000.0..=bucket_s.1 * 1000.0));
    let speech_total = quantize(duty * duration_ms as f64);

    let mut speech = Vec::new();
    let mut left = speech_total;
    while left > 0 {
        let mut d = quantize(rng.random_range(MIN_SPEECH_MS as f64..=MAX_SPEECH_MS as f64));
        if left <= MAX_SPEECH_MS && left.saturating_sub(d) < MIN_SPEECH_MS {
            d = left;
        } else if left.saturating_sub(d) < MIN_SPEECH_MS {
            d = left - MIN_SPEECH_MS;
        }
        speech.push(d);
        left -= d;
    }

    let silence_total = duration_ms - speech_total;
    let weights: Vec<f64> = speech.iter().map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let mut gaps: Vec<Millis> = weights
        .iter()
        .map(|w| {
            let g = silence_total as f64 * w / wsum;
            (g / PLAN_QUANTUM_MS as f64).floor() as Millis * PLAN_QUANTUM_MS
        })
        .collect();
    let assigned: Millis = gaps.iter().sum();
    *gaps.last_mut().expect("at least one span") += silence_total - assigned;

    let mut plan = Vec::with_capacity(speech.len() * 2);
    let mut t = 0;
    for (s, g) in speech.into_iter().zip(gaps) {
        let amplitude = rng.random_range(SPEECH_AMPLITUDE) as i16;
        plan.push(Span { start_ms: t, len_ms: s, amplitude });
        t += s;
        if g > 0 {
            plan.push(Span { start_ms: t, len_ms: g, amplitude: 0 });
            t += g;
        }
    }
    debug_assert_eq!(t, duration_ms);
    VirtualUser {
        user_id,
        seed,
        sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
        duration_ms,
        plan,
    }
}

impl VirtualUser {
    pub fn speech_ms(&self) -> Millis {
        self.plan.iter().filter(|s| s.is_speech()).map(|s| s.len_ms).sum()
    }

    pub fn total_samples(&self) -> usize {
        (self.duration_ms * u64::from(self.sample_rate_hz) / 1000) as usize
    }

    /// The user's audio in chunks of `chunk` samples (the last may be short).
    pub fn chunks(&self, chunk: usize) -> PcmChunks<'_> {
        PcmChunks {
            user: self,
            rng: rng_for(self.seed, self.user_id, 1),
            pos: 0,
            span: 0,
            chunk: chunk.max(1),
        }
    }

    pub fn pcm(&self) -> Vec<i16> {
        let mut out = Vec::with_capacity(self.total_samples());
        for c in self.chunks(16_384) {
            out.extend_from_slice(&c);
        }
        out
    }
}

pub struct PcmChunks<'a> {
    user: &'a VirtualUser,
    rng: ChaCha8Rng,
    pos: usize,
    span: usize,
    chunk: usize,
}

impl Iterator for PcmChunks<'_> {
    type Item = Vec<i16>;

    fn next(&mut self) -> Option<Vec<i16>> {
        let total = self.user.total_samples();
        if self.pos >= total {
            return None;
        }
        let rate = u64::from(self.user.sample_rate_hz);
        let n = self.chunk.min(total - self.pos);
        let mut out = Vec::with_capacity(n);
        for i in self.pos..self.pos + n {
            let ms = i as u64 * 1000 / rate;
            while self.user.plan[self.span].end_ms() <= ms {
                self.span += 1;
            }
            let a = i32::from(self.user.plan[self.span].amplitude);
            out.push(if a == 0 { 0 } else { self.rng.random_range(-a..=a) as i16 });
        }
        self.pos += n;
        Some(out)
    }
}
