//! Gaussian window statistics and the two window divergences used for
//! change detection: the BIC difference between a one- and a two-Gaussian
//! model of a window, and Hotelling's two-sample T² statistic.
//!
//! Both routines count the covariance matrices they build in a shared
//! [`ComputeCounter`]; a ΔBIC evaluation always costs three covariance
//! computations and a T² evaluation exactly one.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REGULARIZATION_EPS: f64 = 1e-6;

/// Covariance divisor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Divide by `n`. Used by ΔBIC so the closed form equals the likelihood ratio.
    Mle,
    /// Divide by `n - 1`. Used by T².
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BicConfig {
    /// Penalty weight λ.
    pub lambda: f64,
    /// Parameter-count difference ΔK; `None` means `d + d(d+1)/2`.
    pub delta_k: Option<usize>,
    pub regularization_eps: f64,
}

impl Default for BicConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            delta_k: None,
            regularization_eps: DEFAULT_REGULARIZATION_EPS,
        }
    }
}

impl BicConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn delta_k_for(&self, dim: usize) -> usize {
        self.delta_k.unwrap_or(dim + dim * (dim + 1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        if self.delta_k == Some(0) {
            return Err(Error::InvalidConfig("delta_k must be positive".into()));
        }
        if !(self.regularization_eps > 0.0) {
            return Err(Error::InvalidConfig(
                "regularization_eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Running totals of the expensive operations.
#[derive(Debug, Default)]
pub struct ComputeCounter {
    covariance: AtomicU64,
    delta_bic: AtomicU64,
    t2: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub delta_bic_count: u64,
    pub t2_count: u64,
    pub covariance_count: u64,
}

impl ComputeCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            delta_bic_count: self.delta_bic.load(Ordering::Relaxed),
            t2_count: self.t2.load(Ordering::Relaxed),
            covariance_count: self.covariance.load(Ordering::Relaxed),
        }
    }

    pub fn absorb(&self, other: CounterSnapshot) {
        self.covariance
            .fetch_add(other.covariance_count, Ordering::Relaxed);
        self.delta_bic
            .fetch_add(other.delta_bic_count, Ordering::Relaxed);
        self.t2.fetch_add(other.t2_count, Ordering::Relaxed);
    }

    fn add_covariance(&self) {
        self.covariance.fetch_add(1, Ordering::Relaxed);
    }
}

impl std::ops::Sub for CounterSnapshot {
    type Output = CounterSnapshot;

    fn sub(self, rhs: Self) -> Self {
        CounterSnapshot {
            delta_bic_count: self.delta_bic_count - rhs.delta_bic_count,
            t2_count: self.t2_count - rhs.t2_count,
            covariance_count: self.covariance_count - rhs.covariance_count,
        }
    }
}

impl std::ops::Add for CounterSnapshot {
    type Output = CounterSnapshot;

    fn add(self, rhs: Self) -> Self {
        CounterSnapshot {
            delta_bic_count: self.delta_bic_count + rhs.delta_bic_count,
            t2_count: self.t2_count + rhs.t2_count,
            covariance_count: self.covariance_count + rhs.covariance_count,
        }
    }
}

/// Mean, covariance and log-determinant of a window of feature rows.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub log_det: f64,
    pub n: usize,
    pub estimator: Estimator,
    /// A ridge was added because the sample covariance was (near) singular.
    pub regularized: bool,
    cholesky: Cholesky<f64, Dyn>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Solves `covariance * z = v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        self.cholesky
            .solve(&DVector::from_column_slice(v))
            .iter()
            .copied()
            .collect()
    }
}

fn check_rows(rows: &[&[f64]], min_rows: usize) -> Result<usize> {
    if rows.len() < min_rows {
        return Err(Error::WindowTooSmall {
            got: rows.len(),
            needed: min_rows,
        });
    }
    let d = rows[0].len();
    if d == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: 0,
        });
    }
    for r in rows {
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
    }
    Ok(d)
}

fn mean_of(rows: &[&[f64]], d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Fits a Gaussian to `rows`. With `regularization_eps = None` a singular
/// covariance is an error instead of being ridged.
pub fn gaussian_fit(
    rows: &[&[f64]],
    estimator: Estimator,
    regularization_eps: Option<f64>,
    counter: &ComputeCounter,
) -> Result<GaussianStats> {
    let d = check_rows(rows, 2)?;
    let n = rows.len();
    let mean = mean_of(rows, d);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in rows {
        for (c, (v, m)) in centered.iter_mut().zip(r.iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in 0..=i {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let divisor = match estimator {
        Estimator::Mle => n as f64,
        Estimator::Unbiased => (n - 1) as f64,
    };
    for i in 0..d {
        for j in 0..=i {
            let v = cov[(i, j)] / divisor;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    counter.add_covariance();

    let trace = cov.trace();
    let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
    let mut regularized = false;
    let cholesky = match regularization_eps {
        Some(eps) => {
            let well_posed = Cholesky::new(cov.clone())
                .filter(|c| (0..d).all(|i| c.l_dirty()[(i, i)].powi(2) > eps * scale));
            match well_posed {
                Some(c) => c,
                None => {
                    regularized = true;
                    for i in 0..d {
                        cov[(i, i)] += eps * scale;
                    }
                    Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance)?
                }
            }
        }
        None => Cholesky::new(cov.clone()).ok_or(Error::SingularCovariance)?,
    };
    let l = cholesky.l_dirty();
    let log_det = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(GaussianStats {
        mean,
        covariance: cov,
        log_det,
        n,
        estimator,
        regularized,
        cholesky,
    })
}

/// ΔBIC between modelling `x ∪ y` with one Gaussian and `x`, `y` with one
/// each, at the maximum-likelihood fit:
///
/// `N/2·ln|Σ| − Nx/2·ln|Σx| − Ny/2·ln|Σy| − λ/2·ΔK·ln N`.
///
/// Positive values favour a change between the two windows.
pub fn delta_bic(
    x: &[&[f64]],
    y: &[&[f64]],
    cfg: &BicConfig,
    counter: &ComputeCounter,
) -> Result<f64> {
    let dx = check_rows(x, 2)?;
    let dy = check_rows(y, 2)?;
    if dx != dy {
        return Err(Error::DimensionMismatch {
            expected: dx,
            got: dy,
        });
    }
    let eps = Some(cfg.regularization_eps);
    let joint: Vec<&[f64]> = x.iter().chain(y.iter()).copied().collect();
    let s = gaussian_fit(&joint, Estimator::Mle, eps, counter)?;
    let fx = gaussian_fit(x, Estimator::Mle, eps, counter)?;
    let fy = gaussian_fit(y, Estimator::Mle, eps, counter)?;
    counter.delta_bic.fetch_add(1, Ordering::Relaxed);

    let (nx, ny, ns) = (x.len() as f64, y.len() as f64, joint.len() as f64);
    let delta_k = cfg.delta_k_for(dx) as f64;
    Ok(0.5 * ns * s.log_det
        - 0.5 * nx * fx.log_det
        - 0.5 * ny * fy.log_det
        - 0.5 * cfg.lambda * delta_k * ns.ln())
}

/// Hotelling's T² between the means of `x` and `y`, using the unbiased
/// covariance of the pooled window:
///
/// `Nx·Ny/N · (μx − μy)ᵀ Σ⁻¹ (μx − μy)`.
pub fn hotelling_t2(
    x: &[&[f64]],
    y: &[&[f64]],
    regularization_eps: Option<f64>,
    counter: &ComputeCounter,
) -> Result<f64> {
    let dx = check_rows(x, 1)?;
    let dy = check_rows(y, 1)?;
    if dx != dy {
        return Err(Error::DimensionMismatch {
            expected: dx,
            got: dy,
        });
    }
    let joint: Vec<&[f64]> = x.iter().chain(y.iter()).copied().collect();
    let s = gaussian_fit(&joint, Estimator::Unbiased, regularization_eps, counter)?;
    counter.t2.fetch_add(1, Ordering::Relaxed);

    let mx = mean_of(x, dx);
    let my = mean_of(y, dx);
    let delta: Vec<f64> = mx.iter().zip(&my).map(|(a, b)| a - b).collect();
    let z = s.solve(&delta);
    let quad: f64 = delta.iter().zip(&z).map(|(a, b)| a * b).sum();
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    Ok((nx * ny / (nx + ny) * quad).max(0.0))
}
