//! Quasi-silence detection.
//!
//! A noise magnitude spectrum is estimated from the quietest frames, removed
//! by magnitude spectral subtraction, and the residual per-frame energy is
//! thresholded relative to a robust peak (95th percentile). Maximal runs of
//! low-energy frames become [`QuasiSilenceRegion`]s, which anchor the change
//! point search.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{magnitude_spectra, FrameSequence};

/// Energy floor applied before taking logarithms.
pub const ENERGY_FLOOR: f64 = 1e-12;
const PEAK_PERCENTILE: f64 = 0.95;
const MIN_NOISE_FRAMES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SilenceConfig {
    /// Required drop below the peak frame energy, in dB.
    pub threshold_db: f64,
    pub min_region_frames: usize,
    /// Fraction of quietest frames used for the noise estimate.
    pub noise_percentile: f64,
}

impl Default for SilenceConfig {
    fn default() -> Self {
        Self {
            threshold_db: 60.0,
            min_region_frames: 10,
            noise_percentile: 0.1,
        }
    }
}

impl SilenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_db > 0.0) {
            return Err(Error::InvalidConfig("threshold_db must be positive".into()));
        }
        if !(self.noise_percentile > 0.0 && self.noise_percentile < 1.0) {
            return Err(Error::InvalidConfig(
                "noise_percentile must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    pub magnitude_spectrum_estimate: Vec<f64>,
    pub frames_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiSilenceRegion {
    pub start_frame: usize,
    /// Inclusive.
    pub end_frame: usize,
    pub mean_energy_db: f64,
}

impl QuasiSilenceRegion {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn midpoint(&self) -> usize {
        (self.start_frame + self.end_frame) / 2
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&frame)
    }
}

fn frame_energy(frame: &[f64]) -> f64 {
    frame.iter().map(|s| s * s).sum::<f64>() / frame.len() as f64
}

pub fn estimate_noise_profile(frames: &FrameSequence, cfg: &SilenceConfig) -> Result<NoiseProfile> {
    cfg.validate()?;
    if frames.len() < MIN_NOISE_FRAMES {
        return Err(Error::TooFewFrames {
            got: frames.len(),
            needed: MIN_NOISE_FRAMES,
        });
    }
    let mut order: Vec<(f64, usize)> = frames
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| (frame_energy(f), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let used =
        ((cfg.noise_percentile * frames.len() as f64).ceil() as usize).clamp(1, frames.len());

    let quiet = FrameSequence {
        frames: order[..used]
            .iter()
            .map(|&(_, i)| frames.frames[i].clone())
            .collect(),
        frame_len_samples: frames.frame_len_samples,
        hop_samples: frames.hop_samples,
        sample_rate_hz: frames.sample_rate_hz,
    };
    let spectra = magnitude_spectra(&quiet, frames.default_fft_len());
    let bins = spectra[0].len();
    let mut estimate = vec![0.0; bins];
    for spectrum in &spectra {
        for (acc, m) in estimate.iter_mut().zip(spectrum) {
            *acc += m;
        }
    }
    estimate.iter_mut().for_each(|v| *v /= used as f64);
    Ok(NoiseProfile {
        magnitude_spectrum_estimate: estimate,
        frames_used: used,
    })
}

/// Mean squared residual magnitude per frame after subtracting the noise
/// magnitude spectrum (floored at zero per bin).
pub fn spectral_subtract(frames: &FrameSequence, noise: &NoiseProfile) -> Result<Vec<f64>> {
    let fft_len = frames.default_fft_len();
    let bins = fft_len / 2 + 1;
    if noise.magnitude_spectrum_estimate.len() != bins {
        return Err(Error::DimensionMismatch {
            expected: bins,
            got: noise.magnitude_spectrum_estimate.len(),
        });
    }
    Ok(magnitude_spectra(frames, fft_len)
        .iter()
        .map(|spectrum| {
            spectrum
                .iter()
                .zip(&noise.magnitude_spectrum_estimate)
                .map(|(m, n)| (m - n).max(0.0).powi(2))
                .sum::<f64>()
                / bins as f64
        })
        .collect())
}

/// Noise estimate followed by subtraction.
pub fn energy_track(frames: &FrameSequence, cfg: &SilenceConfig) -> Result<Vec<f64>> {
    let noise = estimate_noise_profile(frames, cfg)?;
    spectral_subtract(frames, &noise)
}

fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Per-frame quasi-silence decision against the robust peak.
pub fn quasi_silent_frames(energy: &[f64], threshold_db: f64) -> Vec<bool> {
    if energy.is_empty() {
        return Vec::new();
    }
    let peak = percentile(energy, PEAK_PERCENTILE);
    if peak <= ENERGY_FLOOR {
        // nothing rises above the floor: the whole track is silence
        return vec![true; energy.len()];
    }
    energy
        .iter()
        .map(|&e| 10.0 * (peak / e.max(ENERGY_FLOOR)).log10() >= threshold_db)
        .collect()
}

pub fn detect_quasi_silences(energy: &[f64], cfg: &SilenceConfig) -> Vec<QuasiSilenceRegion> {
    let silent = quasi_silent_frames(energy, cfg.threshold_db);
    let mut regions = Vec::new();
    let mut i = 0;
    while i < silent.len() {
        if !silent[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < silent.len() && silent[i] {
            i += 1;
        }
        if i - start >= cfg.min_region_frames.max(1) {
            let mean = energy[start..i]
                .iter()
                .map(|e| e.max(ENERGY_FLOOR))
                .sum::<f64>()
                / (i - start) as f64;
            regions.push(QuasiSilenceRegion {
                start_frame: start,
                end_frame: i - 1,
                mean_energy_db: 10.0 * mean.log10(),
            });
        }
    }
    regions
}

/// Marks every frame covered by a region.
pub fn silence_mask(regions: &[QuasiSilenceRegion], num_frames: usize) -> Vec<bool> {
    let mut mask = vec![false; num_frames];
    for r in regions {
        for m in mask.iter_mut().take(r.end_frame + 1).skip(r.start_frame) {
            *m = true;
        }
    }
    mask
}

/// CSV `start_sec,end_sec,mean_energy_db`.
pub fn write_regions_csv<W: Write>(
    out: W,
    regions: &[QuasiSilenceRegion],
    hop_sec: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["start_sec", "end_sec", "mean_energy_db"])?;
    for r in regions {
        w.write_record(&[
            format!("{:.3}", r.start_frame as f64 * hop_sec),
            format!("{:.3}", (r.end_frame + 1) as f64 * hop_sec),
            format!("{:.2}", r.mean_energy_db),
        ])?;
    }
    w.flush()?;
    Ok(())
}
