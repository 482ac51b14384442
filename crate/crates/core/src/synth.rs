//! Synthetic conversations with exact ground truth.
//!
//! A speaker is a source-filter voice: a sawtooth at the speaker's pitch
//! mixed with white noise, passed through three parallel band-pass
//! resonators at the speaker's formant-like band centres. Speech is built
//! from syllables; every syllable perturbs pitch and band centres, may be
//! unvoiced (noise only) and carries a smooth loudness contour that never
//! drops to silence. Turns are joined by gaps holding only a −80 dBFS noise
//! floor. A speaker change is placed at the middle of the gap between two
//! turns of different speakers.

use std::f64::consts::PI;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::AudioSignal;
use crate::seed::{self, Purpose};

pub const NOISE_FLOOR_DBFS: f64 = -80.0;
const SPEECH_RMS: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: usize,
    pub pitch_hz: f64,
    pub bands: Vec<Band>,
    /// Share of noise in the source of voiced syllables.
    pub breathiness: f64,
    /// Probability that a syllable is unvoiced.
    pub unvoiced_prob: f64,
}

/// Syllable-level variation within one speaker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Variation {
    pub syllable_sec: (f64, f64),
    /// Relative spread of band centres per syllable.
    pub band_jitter: f64,
    pub pitch_jitter: f64,
    /// Lowest point of the loudness contour, as a fraction of the peak.
    pub min_level: f64,
}

impl Default for Variation {
    fn default() -> Self {
        Self {
            syllable_sec: (0.12, 0.32),
            band_jitter: 0.06,
            pitch_jitter: 0.06,
            min_level: 0.35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Index into `SynthSpec::speaker_profiles`.
    pub speaker: usize,
    pub duration_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub turns: Vec<Turn>,
    pub gap_sec: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub speaker_profiles: Vec<SpeakerProfile>,
    pub variation: Variation,
}

impl SynthSpec {
    pub fn num_speakers(&self) -> usize {
        self.speaker_profiles.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.sample_rate_hz < 8000 {
            return bad(format!("sample rate {} Hz is too low", self.sample_rate_hz));
        }
        if self.turns.is_empty() {
            return bad("no turns".into());
        }
        if !(self.gap_sec >= 0.0) {
            return bad("gap must be non-negative".into());
        }
        for (i, t) in self.turns.iter().enumerate() {
            if !(t.duration_sec > 0.0) {
                return bad(format!("turn {i} has non-positive duration"));
            }
            if t.speaker >= self.speaker_profiles.len() {
                return bad(format!("turn {i} names unknown speaker {}", t.speaker));
            }
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        for p in &self.speaker_profiles {
            if p.bands.is_empty()
                || p.bands
                    .iter()
                    .any(|b| b.center_hz <= 0.0 || b.center_hz >= nyquist || b.bandwidth_hz <= 0.0)
            {
                return bad(format!("speaker {} has invalid bands", p.id));
            }
            if !(p.pitch_hz > 0.0) {
                return bad(format!("speaker {} has invalid pitch", p.id));
            }
        }
        for (i, a) in self.speaker_profiles.iter().enumerate() {
            for b in &self.speaker_profiles[i + 1..] {
                if a.pitch_hz == b.pitch_hz && a.bands == b.bands {
                    return bad(format!("speakers {} and {} are identical", a.id, b.id));
                }
            }
        }
        let (lo, hi) = self.variation.syllable_sec;
        if !(lo > 0.0 && hi >= lo) {
            return bad("invalid syllable duration range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledInterval {
    pub speaker: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Midpoints of the gaps between turns of different speakers.
    pub change_points_sec: Vec<f64>,
    /// One interval per turn, labelled with the speaker's profile id.
    pub turns: Vec<LabeledInterval>,
}

impl GroundTruth {
    /// Speaker talking at `t`, if any.
    pub fn speaker_at(&self, t: f64) -> Option<usize> {
        self.turns
            .iter()
            .find(|i| t >= i.start_sec && t < i.end_sec)
            .map(|i| i.speaker)
    }
}

/// Two-pole band-pass with 0 dB peak gain.
#[derive(Debug, Clone, Default)]
struct Resonator {
    b0: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, center_hz: f64, bandwidth_hz: f64, sample_rate: f64) {
        let w0 = 2.0 * PI * center_hz / sample_rate;
        let q = center_hz / bandwidth_hz;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        self.b0 = alpha / a0;
        self.b2 = -alpha / a0;
        self.a1 = -2.0 * w0.cos() / a0;
        self.a2 = (1.0 - alpha) / a0;
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One speaker talking continuously for `duration_sec`.
pub fn synth_speech(
    profile: &SpeakerProfile,
    variation: &Variation,
    duration_sec: f64,
    sample_rate_hz: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let sr = sample_rate_hz as f64;
    let total = (duration_sec * sr).round() as usize;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(total);
    let mut filters = vec![Resonator::default(); profile.bands.len()];
    let mut phase = rng.random::<f64>();
    let nyquist_guard = 0.45 * sr;
    let (syl_lo, syl_hi) = variation.syllable_sec;

    while out.len() < total {
        let len =
            ((rng.random_range(syl_lo..=syl_hi) * sr).round() as usize).clamp(1, total - out.len());
        let voiced = rng.random::<f64>() >= profile.unvoiced_prob;
        let pitch = profile.pitch_hz * (1.0 + variation.pitch_jitter * normal.sample(rng)).max(0.5);
        let gains: Vec<f64> = profile.bands.iter().map(|b| b.gain).collect();
        for (f, b) in filters.iter_mut().zip(&profile.bands) {
            let center = (b.center_hz * (1.0 + variation.band_jitter * normal.sample(rng)))
                .clamp(80.0, nyquist_guard);
            f.tune(center, b.bandwidth_hz, sr);
        }
        let noise_share = if voiced { profile.breathiness } else { 1.0 };
        let peak_at = rng.random_range(0.3..0.7);
        for i in 0..len {
            let source = if voiced {
                phase = (phase + pitch / sr).fract();
                (1.0 - noise_share) * (2.0 * phase - 1.0)
            } else {
                0.0
            } + noise_share * normal.sample(rng);
            let y: f64 = filters
                .iter_mut()
                .zip(&gains)
                .map(|(f, g)| g * f.process(source))
                .sum();
            // raised-cosine contour between min_level and 1 within the syllable
            let x = i as f64 / len as f64;
            let arg = if x < peak_at {
                x / peak_at
            } else {
                1.0 + (x - peak_at) / (1.0 - peak_at)
            };
            let contour =
                variation.min_level + (1.0 - variation.min_level) * 0.5 * (1.0 - (PI * arg).cos());
            out.push(y * contour);
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= SPEECH_RMS / rms);
    }
    out
}

pub fn synth_conversation(spec: &SynthSpec) -> Result<(AudioSignal, GroundTruth)> {
    spec.validate()?;
    let sr = spec.sample_rate_hz as f64;
    let mut rng = seed::stream(spec.seed, Purpose::Synthesis, 0);
    let mut samples: Vec<f64> = Vec::new();
    let mut turns = Vec::with_capacity(spec.turns.len());
    let mut change_points_sec = Vec::new();
    let gap_len = (spec.gap_sec * sr).round() as usize;

    for (i, turn) in spec.turns.iter().enumerate() {
        if i > 0 {
            let gap_start = samples.len();
            samples.resize(gap_start + gap_len, 0.0);
            if spec.turns[i - 1].speaker != turn.speaker {
                change_points_sec.push((gap_start as f64 + gap_len as f64 / 2.0) / sr);
            }
        }
        let profile = &spec.speaker_profiles[turn.speaker];
        let start = samples.len();
        samples.extend(synth_speech(
            profile,
            &spec.variation,
            turn.duration_sec,
            spec.sample_rate_hz,
            &mut rng,
        ));
        turns.push(LabeledInterval {
            speaker: profile.id,
            start_sec: start as f64 / sr,
            end_sec: samples.len() as f64 / sr,
        });
    }

    let floor = Normal::new(0.0, 10f64.powf(NOISE_FLOOR_DBFS / 20.0)).expect("positive deviation");
    let mut noise_rng = seed::stream(spec.seed, Purpose::Synthesis, 1);
    for s in &mut samples {
        *s += floor.sample(&mut noise_rng);
    }
    let audio = AudioSignal::new(samples, spec.sample_rate_hz, format!("synth-{}", spec.seed));
    Ok((
        audio,
        GroundTruth {
            change_points_sec,
            turns,
        },
    ))
}

/// `n` distinct speakers. Pitch and each band centre are spread over their
/// ranges on independently shuffled grids, so no two speakers share a
/// neighbourhood in every dimension.
pub fn speaker_pool(n: usize, seed: u64) -> Vec<SpeakerProfile> {
    let mut rng = seed::stream(seed, Purpose::Synthesis, u32::MAX);
    let ranges = [
        (95.0, 250.0),
        (300.0, 850.0),
        (950.0, 2300.0),
        (2400.0, 3700.0),
    ];
    let grids: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(lo, hi)| {
            let mut slots: Vec<usize> = (0..n).collect();
            slots.shuffle(&mut rng);
            slots
                .into_iter()
                .map(|s| lo + (hi - lo) * (s as f64 + rng.random_range(0.25..0.75)) / n as f64)
                .collect()
        })
        .collect();
    (0..n)
        .map(|k| SpeakerProfile {
            id: k,
            pitch_hz: grids[0][k],
            bands: vec![
                Band {
                    center_hz: grids[1][k],
                    bandwidth_hz: 90.0 + rng.random_range(0.0..60.0),
                    gain: 1.0,
                },
                Band {
                    center_hz: grids[2][k],
                    bandwidth_hz: 120.0 + rng.random_range(0.0..80.0),
                    gain: rng.random_range(0.5..0.9),
                },
                Band {
                    center_hz: grids[3][k],
                    bandwidth_hz: 160.0 + rng.random_range(0.0..100.0),
                    gain: rng.random_range(0.25..0.6),
                },
            ],
            breathiness: rng.random_range(0.05..0.25),
            unvoiced_prob: rng.random_range(0.1..0.3),
        })
        .collect()
}

/// Shape of randomly drawn conversations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversationConfig {
    pub min_changes: usize,
    pub max_changes: usize,
    pub speakers: (usize, usize),
    pub turn_sec: (f64, f64),
    pub gap_sec: (f64, f64),
    /// Chance that a turn is followed by another turn of the same speaker.
    pub repeat_prob: f64,
    pub sample_rate_hz: u32,
    pub variation: Variation,
}

impl Default for ConversationConfig {
    fn default() -> Self {
        Self {
            min_changes: 3,
            max_changes: 20,
            speakers: (2, 4),
            turn_sec: (1.5, 3.5),
            gap_sec: (0.3, 0.6),
            repeat_prob: 0.25,
            sample_rate_hz: 16_000,
            variation: Variation::default(),
        }
    }
}

/// Draws a conversation among speakers of `pool`.
pub fn random_spec(
    pool: &[SpeakerProfile],
    cfg: &ConversationConfig,
    seed: u64,
) -> Result<SynthSpec> {
    let (s_lo, s_hi) = cfg.speakers;
    if s_lo < 2 || s_hi < s_lo || s_hi > pool.len() {
        return Err(Error::InvalidSpec(format!(
            "speaker range {s_lo}..={s_hi} does not fit a pool of {}",
            pool.len()
        )));
    }
    if cfg.max_changes < cfg.min_changes {
        return Err(Error::InvalidSpec("max_changes below min_changes".into()));
    }
    let mut rng = seed::stream(seed, Purpose::Corpus, 0);
    let n_speakers = rng.random_range(s_lo..=s_hi);
    let mut chosen: Vec<SpeakerProfile> = pool
        .choose_multiple(&mut rng, n_speakers)
        .cloned()
        .collect();
    chosen.sort_by_key(|p| p.id);
    let n_changes = rng.random_range(cfg.min_changes..=cfg.max_changes);

    let mut speaker = rng.random_range(0..n_speakers);
    let mut turns = Vec::new();
    let mut changes = 0;
    loop {
        turns.push(Turn {
            speaker,
            duration_sec: rng.random_range(cfg.turn_sec.0..=cfg.turn_sec.1),
        });
        if changes == n_changes {
            break;
        }
        if rng.random::<f64>() >= cfg.repeat_prob {
            let next = rng.random_range(0..n_speakers - 1);
            speaker = if next >= speaker { next + 1 } else { next };
            changes += 1;
        }
    }
    Ok(SynthSpec {
        turns,
        gap_sec: rng.random_range(cfg.gap_sec.0..=cfg.gap_sec.1),
        sample_rate_hz: cfg.sample_rate_hz,
        seed,
        speaker_profiles: chosen,
        variation: cfg.variation,
    })
}

/// `count` conversations; conversation `i` uses seed stream `i` of `seed`.
pub fn synth_corpus(
    pool: &[SpeakerProfile],
    cfg: &ConversationConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<(AudioSignal, GroundTruth)>> {
    (0..count)
        .map(|i| {
            synth_conversation(&random_spec(
                pool,
                cfg,
                seed::derive(seed, Purpose::Corpus, i as u32),
            )?)
        })
        .collect()
}
