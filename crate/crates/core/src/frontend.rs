//! Audio input, framing and MFCC extraction.
//!
//! Every downstream stage works on a [`FeatureMatrix`] of 12-dimensional
//! cepstral vectors, one per 10 ms frame by default. The chain is the usual
//! one: per-frame pre-emphasis, Hamming window, magnitude spectrum, triangular
//! mel filterbank, log with a floor, DCT-II, and coefficients `1..=12` (the
//! energy term `c0` is dropped; the silence detector tracks energy itself).

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono PCM audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, source_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        }
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Reads a RIFF/WAVE PCM-16 file, downmixing multichannel audio by channel mean.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedEncoding(
            "floating-point samples; only PCM 16-bit is accepted".into(),
        ));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding(format!(
            "{}-bit PCM; only 16-bit is accepted",
            spec.bits_per_sample
        )));
    }
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(Error::MalformedWav("zero channels or sample rate".into()));
    }
    let channels = spec.channels as usize;
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(wav_error)?;
    if !raw.len().is_multiple_of(channels) {
        return Err(Error::MalformedWav("truncated interleaved frame".into()));
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / 32768.0).sum();
            sum / channels as f64
        })
        .collect();
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioSignal::new(samples, spec.sample_rate, source_id))
}

/// Writes a mono PCM-16 file. Samples are clipped to the 16-bit range.
pub fn write_wav(path: impl AsRef<Path>, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec).map_err(wav_error)?;
    for &s in &signal.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(wav_error)?;
    }
    writer.finalize().map_err(wav_error)?;
    Ok(())
}

fn wav_error(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported wav encoding".into()),
        other => Error::MalformedWav(other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub num_coefficients: usize,
    pub num_mel_filters: usize,
    /// `None` picks the next power of two at or above the frame length.
    pub fft_size: Option<usize>,
    pub pre_emphasis: f64,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            num_coefficients: 12,
            num_mel_filters: 26,
            fft_size: None,
            pre_emphasis: 0.97,
            frame_ms: 25.0,
            hop_ms: 10.0,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        (self.frame_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate_hz: u32) -> usize {
        (self.hop_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_sec(&self) -> f64 {
        self.hop_ms / 1000.0
    }

    pub fn fft_len(&self, frame_len: usize) -> usize {
        self.fft_size
            .unwrap_or_else(|| frame_len.next_power_of_two())
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let frame_len = self.frame_len(sample_rate_hz);
        let hop = self.hop_len(sample_rate_hz);
        if self.num_coefficients == 0 || self.num_coefficients > self.num_mel_filters {
            return Err(Error::InvalidConfig(format!(
                "num_coefficients {} must be in 1..={}",
                self.num_coefficients, self.num_mel_filters
            )));
        }
        if frame_len == 0 || hop == 0 || hop > frame_len {
            return Err(Error::InvalidConfig(format!(
                "frame {frame_len} / hop {hop} samples: need 0 < hop <= frame"
            )));
        }
        if self.fft_len(frame_len) < frame_len {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} below frame length {frame_len}",
                self.fft_len(frame_len)
            )));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::InvalidConfig(
                "pre_emphasis must be in [0, 1)".into(),
            ));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed-length overlapping windows over a signal. Frame `i` starts at
/// sample `i * hop_samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Vec<f64>>,
    pub frame_len_samples: usize,
    pub hop_samples: usize,
    pub sample_rate_hz: u32,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn onset_sec(&self, index: usize) -> f64 {
        (index * self.hop_samples) as f64 / self.sample_rate_hz as f64
    }

    pub fn hop_sec(&self) -> f64 {
        self.hop_samples as f64 / self.sample_rate_hz as f64
    }

    /// FFT length used by spectral stages (next power of two >= frame length).
    pub fn default_fft_len(&self) -> usize {
        self.frame_len_samples.next_power_of_two()
    }
}

pub fn frame_signal(signal: &AudioSignal, cfg: &MfccConfig) -> Result<FrameSequence> {
    if signal.sample_rate_hz == 0 {
        return Err(Error::InvalidConfig("sample rate must be positive".into()));
    }
    cfg.validate(signal.sample_rate_hz)?;
    let frame_len = cfg.frame_len(signal.sample_rate_hz);
    let hop = cfg.hop_len(signal.sample_rate_hz);
    let len = signal.samples.len();
    if len < frame_len {
        return Err(Error::SignalTooShort {
            len,
            needed: frame_len,
        });
    }
    let count = (len - frame_len) / hop + 1;
    let frames = (0..count)
        .map(|i| signal.samples[i * hop..i * hop + frame_len].to_vec())
        .collect();
    Ok(FrameSequence {
        frames,
        frame_len_samples: frame_len,
        hop_samples: hop,
        sample_rate_hz: signal.sample_rate_hz,
    })
}

/// Per-frame feature vectors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    dim: usize,
    pub frame_times_sec: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, frame_times_sec: Vec<f64>) -> Result<Self> {
        if rows.len() != frame_times_sec.len() {
            return Err(Error::LengthMismatch(rows.len(), frame_times_sec.len()));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        if frame_times_sec.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::UnsortedInput);
        }
        Ok(Self {
            data,
            dim,
            frame_times_sec,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frame_times_sec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_times_sec.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim.max(1)).take(self.len())
    }

    /// Row views for a frame range.
    pub fn slice(&self, start: usize, end: usize) -> Vec<&[f64]> {
        (start..end).map(|i| self.row(i)).collect()
    }

    /// CSV with header `time_sec,c1..cD`, one row per frame.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time_sec".to_string()];
        header.extend((1..=self.dim).map(|k| format!("c{k}")));
        w.write_record(&header)?;
        for (i, row) in self.rows().enumerate() {
            let mut rec = vec![format!("{:.4}", self.frame_times_sec[i])];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Magnitude spectra (`fft_len / 2 + 1` bins) of Hamming-windowed frames.
pub(crate) struct SpectrumAnalyzer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    fft_len: usize,
    pre_emphasis: f64,
}

impl SpectrumAnalyzer {
    pub fn new(frame_len: usize, fft_len: usize, pre_emphasis: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft: planner.plan_fft_forward(fft_len),
            window: hamming(frame_len),
            fft_len,
            pre_emphasis,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_len];
        let mut prev = 0.0;
        for (i, (&x, &w)) in frame.iter().zip(&self.window).enumerate() {
            let y = if i == 0 {
                x
            } else {
                x - self.pre_emphasis * prev
            };
            prev = x;
            buf[i] = Complex::new(y * w, 0.0);
        }
        self.fft.process(&mut buf);
        buf[..self.bins()].iter().map(|c| c.norm()).collect()
    }
}

pub(crate) fn magnitude_spectra(frames: &FrameSequence, fft_len: usize) -> Vec<Vec<f64>> {
    let analyzer = SpectrumAnalyzer::new(frames.frame_len_samples, fft_len, 0.0);
    frames
        .frames
        .iter()
        .map(|f| analyzer.magnitude(f))
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters evenly spaced on the mel scale from 0 Hz to Nyquist.
pub(crate) fn mel_filterbank(
    num_filters: usize,
    fft_len: usize,
    sample_rate_hz: u32,
) -> Vec<Vec<f64>> {
    let bins = fft_len / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (num_filters + 1) as f64))
        .collect();
    (0..num_filters)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * sample_rate_hz as f64 / fft_len as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn compute_mfcc(frames: &FrameSequence, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    cfg.validate(frames.sample_rate_hz)?;
    if frames.frame_len_samples != cfg.frame_len(frames.sample_rate_hz) {
        return Err(Error::DimensionMismatch {
            expected: cfg.frame_len(frames.sample_rate_hz),
            got: frames.frame_len_samples,
        });
    }
    let fft_len = cfg.fft_len(frames.frame_len_samples);
    let analyzer = SpectrumAnalyzer::new(frames.frame_len_samples, fft_len, cfg.pre_emphasis);
    let bank = mel_filterbank(cfg.num_mel_filters, fft_len, frames.sample_rate_hz);
    let m = cfg.num_mel_filters;
    let scale = (2.0 / m as f64).sqrt();
    let dct: Vec<Vec<f64>> = (1..=cfg.num_coefficients)
        .map(|k| {
            (0..m)
                .map(|j| scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos())
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(frames.len());
    for frame in &frames.frames {
        let mag = analyzer.magnitude(frame);
        let log_mel: Vec<f64> = bank
            .iter()
            .map(|filter| {
                let e: f64 = filter.iter().zip(&mag).map(|(w, a)| w * a * a).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        rows.push(
            dct.iter()
                .map(|basis| basis.iter().zip(&log_mel).map(|(b, l)| b * l).sum())
                .collect(),
        );
    }
    let times = (0..frames.len()).map(|i| frames.onset_sec(i)).collect();
    FeatureMatrix::from_rows(rows, times)
}

/// Frames the signal and extracts MFCCs in one call.
pub fn extract_features(
    signal: &AudioSignal,
    cfg: &MfccConfig,
) -> Result<(FrameSequence, FeatureMatrix)> {
    let frames = frame_signal(signal, cfg)?;
    let features = compute_mfcc(&frames, cfg)?;
    Ok((frames, features))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn signal(samples: Vec<f64>) -> AudioSignal {
        AudioSignal::new(samples, 16_000, "t")
    }

    #[test]
    fn frame_count_follows_hop_formula() {
        let frames = frame_signal(&signal(vec![0.0; 16_000]), &MfccConfig::default()).unwrap();
        assert_eq!(frames.frame_len_samples, 400);
        assert_eq!(frames.hop_samples, 160);
        assert_eq!(frames.len(), (16_000 - 400) / 160 + 1);
        assert_eq!(frames.len(), 98);
    }

    #[test]
    fn exactly_one_frame_and_one_short() {
        let cfg = MfccConfig::default();
        assert_eq!(
            frame_signal(&signal(vec![0.1; 400]), &cfg).unwrap().len(),
            1
        );
        assert!(matches!(
            frame_signal(&signal(vec![0.1; 399]), &cfg),
            Err(Error::SignalTooShort {
                len: 399,
                needed: 400
            })
        ));
    }

    #[test]
    fn frames_start_at_hop_multiples() {
        let samples: Vec<f64> = (0..2000).map(|i| i as f64).collect();
        let frames = frame_signal(&signal(samples), &MfccConfig::default()).unwrap();
        for (i, f) in frames.frames.iter().enumerate() {
            assert_eq!(f[0], (i * 160) as f64);
            assert_eq!(f.len(), 400);
        }
    }

    #[test]
    fn silent_input_gives_constant_rows() {
        let cfg = MfccConfig::default();
        let (_, feats) = extract_features(&signal(vec![0.0; 8000]), &cfg).unwrap();
        assert_eq!(feats.dim(), 12);
        let first = feats.row(0).to_vec();
        for row in feats.rows() {
            assert_eq!(row, first.as_slice());
        }
    }

    #[test]
    fn sine_is_stationary_across_frames() {
        let samples: Vec<f64> = (0..16_000)
            .map(|n| 0.5 * (2.0 * PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let (_, feats) = extract_features(&signal(samples), &MfccConfig::default()).unwrap();
        let n = feats.len();
        let interior: Vec<&[f64]> = (2..n - 2).map(|i| feats.row(i)).collect();
        for k in 0..12 {
            let mean = interior.iter().map(|r| r[k]).sum::<f64>() / interior.len() as f64;
            let var =
                interior.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / interior.len() as f64;
            assert!(
                var.sqrt() < 1e-6 * mean.abs(),
                "coef {k}: sd {} mean {mean}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn scaling_keeps_shape() {
        let samples: Vec<f64> = (0..6000)
            .map(|n| ((n * 7919) % 101) as f64 / 101.0 - 0.5)
            .collect();
        let cfg = MfccConfig::default();
        let (_, a) = extract_features(&signal(samples.clone()), &cfg).unwrap();
        let scaled: Vec<f64> = samples.iter().map(|s| s * 0.3).collect();
        let (_, b) = extract_features(&signal(scaled), &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.dim(), b.dim());
        assert_eq!(a.frame_times_sec, b.frame_times_sec);
        // a gain is a constant log-mel offset, which the DCT maps onto c0 only
        for (ra, rb) in a.rows().zip(b.rows()) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = MfccConfig {
            num_coefficients: 30,
            ..MfccConfig::default()
        };
        assert!(matches!(
            frame_signal(&signal(vec![0.0; 1000]), &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn filterbank_rows_are_nonempty() {
        let bank = mel_filterbank(26, 512, 16_000);
        assert_eq!(bank.len(), 26);
        for f in &bank {
            assert!(f.iter().any(|&w| w > 0.0));
        }
    }
}
