//! Speaker change detection around quasi-silences.
//!
//! For every quasi-silence an analysis window of `analysis_window_sec` is
//! centred on the pause. A scan window starts at the left edge of the
//! analysis window and is split into two sub-windows at every multiple of
//! the stride, `stride_fraction` of the initial window length. The
//! divergence between the two sides is evaluated at each split:
//!
//! * [`Method::Bic`] takes the split with the largest ΔBIC and accepts a
//!   change when it is positive.
//! * [`Method::T2`] takes the split with the largest Hotelling T²; when that
//!   clears the gate it computes a single ΔBIC there to confirm the change.
//!
//! After a detection (for T²: after the gate fires) the scan window slides by
//! `slide_frames`, otherwise it grows by `grow_frames` up to the right edge
//! of the analysis window. The scan stops when a slide would leave the
//! analysis window or a window already reaching its edge finds nothing.
//!
//! Frames inside detected quasi-silences carry no speaker information, so
//! they are left out of the sub-window statistics. Split positions are still
//! expressed in frames.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::divergence::{delta_bic, hotelling_t2, BicConfig, ComputeCounter};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::silence::{silence_mask, QuasiSilenceRegion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bic,
    T2,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Bic => "bic",
            Method::T2 => "t2",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bic" => Ok(Method::Bic),
            "t2" => Ok(Method::T2),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Initial scan window length in frames.
    pub window_frames: usize,
    /// Spacing of split positions as a fraction of the scan window.
    pub stride_fraction: f64,
    pub analysis_window_sec: f64,
    /// Defaults to `window_frames / 2`.
    pub slide_frames: Option<usize>,
    /// Defaults to `window_frames / 4`.
    pub grow_frames: Option<usize>,
    pub method: Method,
    /// T² gate; defaults to the 95th percentile of χ²(d).
    pub t2_threshold: Option<f64>,
    /// Minimum non-silent rows per sub-window; defaults to `d + 2`.
    pub min_subwindow_rows: Option<usize>,
    /// Leave quasi-silent frames out of the sub-window statistics.
    pub exclude_silence: bool,
    pub bic: BicConfig,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            window_frames: 125,
            stride_fraction: 0.6,
            analysis_window_sec: 1.75,
            slide_frames: None,
            grow_frames: None,
            method: Method::T2,
            t2_threshold: None,
            min_subwindow_rows: None,
            exclude_silence: true,
            bic: BicConfig::default(),
        }
    }
}

impl SegConfig {
    pub fn new(window_frames: usize, stride_fraction: f64, method: Method) -> Self {
        Self {
            window_frames,
            stride_fraction,
            method,
            ..Self::default()
        }
    }

    pub fn slide(&self) -> usize {
        self.slide_frames.unwrap_or(self.window_frames / 2).max(1)
    }

    pub fn grow(&self) -> usize {
        self.grow_frames.unwrap_or(self.window_frames / 4).max(1)
    }

    pub fn analysis_frames(&self, hop_sec: f64) -> usize {
        (self.analysis_window_sec / hop_sec).round() as usize
    }

    pub fn t2_gate(&self, dim: usize) -> f64 {
        self.t2_threshold
            .unwrap_or_else(|| chi_squared_quantile(dim, 0.95))
    }

    pub fn min_rows(&self, dim: usize) -> usize {
        self.min_subwindow_rows.unwrap_or(dim + 2).max(2)
    }

    pub fn validate(&self, hop_sec: f64) -> Result<()> {
        if self.window_frames < 4 {
            return Err(Error::InvalidConfig(
                "window_frames must be at least 4".into(),
            ));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "stride_fraction must be in (0, 1]".into(),
            ));
        }
        if self.window_frames > self.analysis_frames(hop_sec) {
            return Err(Error::InvalidConfig(format!(
                "window of {} frames exceeds the {}-frame analysis window",
                self.window_frames,
                self.analysis_frames(hop_sec)
            )));
        }
        if self.slide_frames == Some(0) || self.grow_frames == Some(0) {
            return Err(Error::InvalidConfig(
                "slide and grow steps must be positive".into(),
            ));
        }
        self.bic.validate()
    }
}

pub fn chi_squared_quantile(dof: usize, p: f64) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub frame_index: usize,
    pub time_sec: f64,
    /// ΔBIC for the BIC method, T² for the T² method.
    pub divergence_value: f64,
    /// Index of the quasi-silence whose analysis window produced the point.
    pub anchor_silence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangePointList {
    pub points: Vec<ChangePoint>,
    pub config_used: SegConfig,
}

impl ChangePointList {
    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.time_sec).collect()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.frame_index).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV `time_sec,frame_index,divergence_value,method`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_sec", "frame_index", "divergence_value", "method"])?;
        for p in &self.points {
            w.write_record(&[
                format!("{:.3}", p.time_sec),
                p.frame_index.to_string(),
                format!("{:.6}", p.divergence_value),
                self.config_used.method.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanResult {
    /// Split position relative to the window start: the right sub-window
    /// begins at this frame.
    pub split: usize,
    pub value: f64,
    pub splits_evaluated: usize,
}

/// Split positions for a window of `len` frames: every multiple of `step`
/// measured from the window start. A step that does not fit inside the
/// window falls back to the single midpoint split.
pub fn split_positions(len: usize, step: usize) -> Vec<usize> {
    if len < 2 {
        return Vec::new();
    }
    let step = step.max(1);
    if step >= len {
        return vec![len / 2];
    }
    (1..).map(|k| k * step).take_while(|&p| p < len).collect()
}

/// Stride in frames for a window of `window_frames` frames.
pub fn stride_frames(window_frames: usize, stride_fraction: f64) -> usize {
    ((stride_fraction * window_frames as f64).round() as usize).max(1)
}

/// Feature rows inside a scan window, tagged with their frame offsets.
struct WindowRows<'a> {
    rows: Vec<&'a [f64]>,
    offsets: Vec<usize>,
}

impl<'a> WindowRows<'a> {
    fn contiguous(rows: &[&'a [f64]]) -> Self {
        Self {
            rows: rows.to_vec(),
            offsets: (0..rows.len()).collect(),
        }
    }

    fn from_features(
        features: &'a FeatureMatrix,
        start: usize,
        len: usize,
        excluded: &[bool],
    ) -> Self {
        let (mut rows, mut offsets) = (Vec::new(), Vec::new());
        for f in start..start + len {
            if !excluded.get(f).copied().unwrap_or(false) {
                rows.push(features.row(f));
                offsets.push(f - start);
            }
        }
        Self { rows, offsets }
    }

    fn split_at(&self, position: usize) -> usize {
        self.offsets.partition_point(|&o| o < position)
    }
}

struct ScanParams<'c> {
    step: usize,
    min_rows: usize,
    bic: &'c BicConfig,
    counter: &'c ComputeCounter,
}

impl ScanParams<'_> {
    fn divergence(&self, method: Method, left: &[&[f64]], right: &[&[f64]]) -> Result<f64> {
        match method {
            Method::Bic => delta_bic(left, right, self.bic, self.counter),
            Method::T2 => {
                hotelling_t2(left, right, Some(self.bic.regularization_eps), self.counter)
            }
        }
    }

    fn scan(&self, window: &WindowRows, len: usize, method: Method) -> Result<ScanResult> {
        let center = len / 2;
        let n = window.rows.len();
        // splits that fall on the same row partition are one candidate; keep
        // the position closest to the window centre
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for p in split_positions(len, self.step) {
            let k = window.split_at(p);
            if k < self.min_rows || n - k < self.min_rows {
                continue;
            }
            match candidates.iter_mut().find(|(ck, _)| *ck == k) {
                Some(c) if p.abs_diff(center) < c.1.abs_diff(center) => c.1 = p,
                Some(_) => {}
                None => candidates.push((k, p)),
            }
        }
        if candidates.is_empty() {
            return Err(Error::WindowTooSmall {
                got: n,
                needed: 2 * self.min_rows,
            });
        }
        let mut best: Option<ScanResult> = None;
        for &(k, p) in &candidates {
            let value = self.divergence(method, &window.rows[..k], &window.rows[k..])?;
            let better = match best {
                None => true,
                Some(b) => {
                    value > b.value
                        || (value == b.value
                            && (p.abs_diff(center), p) < (b.split.abs_diff(center), b.split))
                }
            };
            if better {
                best = Some(ScanResult {
                    split: p,
                    value,
                    splits_evaluated: candidates.len(),
                });
            }
        }
        Ok(best.expect("at least one candidate"))
    }
}

/// Scans a contiguous window of rows and returns the split with the largest
/// divergence. Ties go to the split nearest the centre.
pub fn scan_window(
    rows: &[&[f64]],
    stride_fraction: f64,
    method: Method,
    bic: &BicConfig,
    counter: &ComputeCounter,
) -> Result<ScanResult> {
    let d = rows.first().map_or(0, |r| r.len());
    let min_rows = match method {
        Method::Bic => 2,
        Method::T2 => d + 2,
    };
    let params = ScanParams {
        step: stride_frames(rows.len(), stride_fraction),
        min_rows,
        bic,
        counter,
    };
    params.scan(&WindowRows::contiguous(rows), rows.len(), method)
}

pub fn segment_bic(
    features: &FeatureMatrix,
    silences: &[QuasiSilenceRegion],
    cfg: &SegConfig,
    counter: &ComputeCounter,
) -> Result<ChangePointList> {
    segment_with(
        features,
        silences,
        &SegConfig {
            method: Method::Bic,
            ..cfg.clone()
        },
        counter,
    )
}

pub fn segment_t2(
    features: &FeatureMatrix,
    silences: &[QuasiSilenceRegion],
    cfg: &SegConfig,
    counter: &ComputeCounter,
) -> Result<ChangePointList> {
    segment_with(
        features,
        silences,
        &SegConfig {
            method: Method::T2,
            ..cfg.clone()
        },
        counter,
    )
}

/// Runs the method selected in `cfg.method`.
pub fn segment(
    features: &FeatureMatrix,
    silences: &[QuasiSilenceRegion],
    cfg: &SegConfig,
    counter: &ComputeCounter,
) -> Result<ChangePointList> {
    segment_with(features, silences, cfg, counter)
}

fn frame_hop(features: &FeatureMatrix) -> f64 {
    match features.frame_times_sec.as_slice() {
        [a, b, ..] => b - a,
        _ => 0.01,
    }
}

fn segment_with(
    features: &FeatureMatrix,
    silences: &[QuasiSilenceRegion],
    cfg: &SegConfig,
    counter: &ComputeCounter,
) -> Result<ChangePointList> {
    let hop = frame_hop(features);
    cfg.validate(hop)?;
    let n = features.len();
    if silences.is_empty() || n == 0 {
        return Ok(ChangePointList {
            points: Vec::new(),
            config_used: cfg.clone(),
        });
    }
    let excluded = if cfg.exclude_silence {
        silence_mask(silences, n)
    } else {
        vec![false; n]
    };
    let params = ScanParams {
        step: stride_frames(cfg.window_frames, cfg.stride_fraction),
        min_rows: cfg.min_rows(features.dim()),
        bic: &cfg.bic,
        counter,
    };
    let gate = cfg.t2_gate(features.dim());
    let n_aw = cfg.analysis_frames(hop).min(n);

    let per_silence: Vec<Vec<ChangePoint>> = silences
        .par_iter()
        .enumerate()
        .map(|(j, region)| {
            let aw_start = region.midpoint().saturating_sub(n_aw / 2).min(n - n_aw);
            let mut found = Vec::new();
            let (mut pos, mut len) = (0usize, cfg.window_frames);
            while pos + len <= n_aw {
                let start = aw_start + pos;
                let window = WindowRows::from_features(features, start, len, &excluded);
                let slide = match params.scan(&window, len, cfg.method) {
                    Err(Error::WindowTooSmall { .. }) => false,
                    Err(e) => return Err(e),
                    Ok(scan) => match cfg.method {
                        Method::Bic => {
                            if scan.value > 0.0 {
                                found.push(point(features, start + scan.split, scan.value, j));
                            }
                            scan.value > 0.0
                        }
                        Method::T2 => {
                            if scan.value > gate {
                                let k = window.split_at(scan.split);
                                let confirm = delta_bic(
                                    &window.rows[..k],
                                    &window.rows[k..],
                                    &cfg.bic,
                                    counter,
                                )?;
                                if confirm > 0.0 {
                                    found.push(point(features, start + scan.split, scan.value, j));
                                }
                            }
                            scan.value > gate
                        }
                    },
                };
                if slide {
                    pos += cfg.slide();
                } else if pos + len < n_aw {
                    len = (len + cfg.grow()).min(n_aw - pos);
                } else {
                    break;
                }
            }
            Ok(found)
        })
        .collect::<Result<_>>()?;

    let mut points: Vec<ChangePoint> = per_silence.into_iter().flatten().collect();
    points.sort_by(|a, b| {
        a.frame_index
            .cmp(&b.frame_index)
            .then(b.divergence_value.total_cmp(&a.divergence_value))
    });
    let points = merge_close(points, cfg.slide());
    Ok(ChangePointList {
        points,
        config_used: cfg.clone(),
    })
}

fn point(features: &FeatureMatrix, frame: usize, value: f64, anchor: usize) -> ChangePoint {
    ChangePoint {
        frame_index: frame,
        time_sec: features.frame_times_sec[frame],
        divergence_value: value,
        anchor_silence: anchor,
    }
}

/// Points closer than `min_gap` frames collapse onto the one with the larger
/// divergence.
fn merge_close(sorted: Vec<ChangePoint>, min_gap: usize) -> Vec<ChangePoint> {
    let mut out: Vec<ChangePoint> = Vec::with_capacity(sorted.len());
    for p in sorted {
        match out.last_mut() {
            Some(last) if p.frame_index - last.frame_index < min_gap => {
                if p.divergence_value > last.divergence_value {
                    *last = p;
                }
            }
            _ => out.push(p),
        }
    }
    out
}
