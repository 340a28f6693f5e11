//! AO peak detection by orthogonal subspace projection.
//!
//! The SCG is projected onto the span of the concurrent ECG and its delayed
//! copies. The projection keeps the part of the SCG that is linearly driven
//! by the electrical activity, which is dominated by the aortic-opening
//! complex. Peaks of the projected trace are located with a first-order
//! Gaussian differentiator and then snapped onto the raw SCG.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::SignalRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OspConfig {
    /// Number of delay taps; taps are `0..delays` samples.
    pub delays: usize,
    pub sigma_ms: f64,
    pub refractory_ms: f64,
    /// Candidates need a rising slope of at least this fraction of the local
    /// slope percentile.
    pub threshold_ratio: f64,
    pub threshold_percentile: f64,
    pub threshold_window_s: f64,
    /// Half-width of the raw-SCG refinement window.
    pub refine_ms: f64,
}

impl Default for OspConfig {
    fn default() -> Self {
        OspConfig {
            delays: 120,
            sigma_ms: 10.0,
            refractory_ms: 500.0,
            threshold_ratio: 0.4,
            threshold_percentile: 0.95,
            threshold_window_s: 2.0,
            refine_ms: 40.0,
        }
    }
}

impl OspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delays < 2 {
            return Err(Error::Config(format!("need at least 2 delay taps, got {}", self.delays)));
        }
        if !(self.sigma_ms > 0.0) {
            return Err(Error::Config("sigma_ms must be positive".into()));
        }
        if !(self.refractory_ms >= 250.0) {
            return Err(Error::Config(format!(
                "refractory_ms must be at least 250, got {}",
                self.refractory_ms
            )));
        }
        if !(self.threshold_ratio >= 0.0) || !(0.0..=1.0).contains(&self.threshold_percentile) {
            return Err(Error::Config("threshold ratio/percentile out of range".into()));
        }
        if !(self.threshold_window_s > 0.0) || !(self.refine_ms >= 0.0) {
            return Err(Error::Config("threshold window and refinement must be positive".into()));
        }
        Ok(())
    }

    pub fn delay_taps(&self) -> Vec<isize> {
        (0..self.delays as isize).collect()
    }
}

/// ECG and its delayed copies as the columns of an `n x q` matrix.
#[derive(Clone, Debug)]
pub struct EcgSubspace {
    basis: DMatrix<f64>,
    delays: Vec<isize>,
}

impl EcgSubspace {
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn delays(&self) -> &[isize] {
        &self.delays
    }

    pub fn rows(&self) -> usize {
        self.basis.nrows()
    }

    pub fn cols(&self) -> usize {
        self.basis.ncols()
    }

    /// Wraps an arbitrary basis; used for testing the projection on
    /// matrices that are not built from a delayed signal.
    pub fn from_matrix(basis: DMatrix<f64>) -> Self {
        let delays = (0..basis.ncols() as isize).collect();
        EcgSubspace { basis, delays }
    }
}

/// Column `j` holds `ecg[t - delays[j]]`, zero where that index falls outside the signal.
pub fn build_subspace(ecg: &[f64], delays: &[isize]) -> Result<EcgSubspace> {
    if delays.is_empty() {
        return Err(Error::DegenerateSubspace("no delay taps".into()));
    }
    if let Some(i) = ecg.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("ecg sample {i} is not finite")));
    }
    let mut seen = BTreeSet::new();
    for &d in delays {
        if !seen.insert(d) {
            return Err(Error::DegenerateSubspace(format!("delay {d} appears twice")));
        }
    }
    let n = ecg.len();
    if delays.len() > n {
        return Err(Error::DegenerateSubspace(format!(
            "{} delay taps exceed the signal length {n}",
            delays.len()
        )));
    }
    let basis = DMatrix::from_fn(n, delays.len(), |t, j| {
        let src = t as isize - delays[j];
        if src >= 0 && (src as usize) < n {
            ecg[src as usize]
        } else {
            0.0
        }
    });
    Ok(EcgSubspace {
        basis,
        delays: delays.to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub s_hat: Vec<f64>,
    pub residual: Vec<f64>,
    /// Least-squares coefficients of `s` in the subspace basis.
    pub coefficients: Vec<f64>,
    /// True when the ridge fallback was needed.
    pub regularized: bool,
}

/// Least-squares projection of `s` onto the column span of `subspace`.
///
/// Solved through a Householder QR factorization. When the triangular factor
/// is numerically rank deficient the normal equations are solved instead,
/// with a ridge of `1e-10 * trace(UᵀU) / q` on the diagonal.
pub fn project(s: &[f64], subspace: &EcgSubspace) -> Result<ProjectionResult> {
    let u = &subspace.basis;
    if s.len() != u.nrows() {
        return Err(Error::DimensionMismatch {
            expected: u.nrows(),
            got: s.len(),
        });
    }
    let q = u.ncols();
    let rhs = DVector::from_column_slice(s);

    let qr = u.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if diag_max == 0.0 {
        return Err(Error::SingularGram);
    }
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let rank_tol = (u.nrows().max(q) as f64) * f64::EPSILON * diag_max;

    let (coefficients, regularized) = if diag_min > rank_tol {
        let mut qts = rhs.clone();
        qr.q_tr_mul(&mut qts);
        let head = qts.rows(0, q).into_owned();
        let x = r.solve_upper_triangular(&head).ok_or(Error::SingularGram)?;
        (x, false)
    } else {
        let mut gram = u.tr_mul(u);
        let trace = gram.trace();
        if !(trace > 0.0) {
            return Err(Error::SingularGram);
        }
        let ridge = 1e-10 * trace / q as f64;
        for i in 0..q {
            gram[(i, i)] += ridge;
        }
        let chol = gram.cholesky().ok_or(Error::SingularGram)?;
        (chol.solve(&u.tr_mul(&rhs)), true)
    };

    let s_hat_v = u * &coefficients;
    if s_hat_v.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularGram);
    }
    let s_hat: Vec<f64> = s_hat_v.iter().copied().collect();
    let residual = s.iter().zip(&s_hat).map(|(a, b)| a - b).collect();
    Ok(ProjectionResult {
        s_hat,
        residual,
        coefficients: coefficients.iter().copied().collect(),
        regularized,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AoPeaks {
    pub indices: Vec<usize>,
    pub fs: f64,
}

impl AoPeaks {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// First derivative of a unit-area Gaussian, truncated at ±4σ.
pub fn fogd_kernel(sigma_samples: f64) -> Vec<f64> {
    let half = (4.0 * sigma_samples).ceil() as isize;
    let norm = 1.0 / (sigma_samples * (2.0 * std::f64::consts::PI).sqrt());
    (-half..=half)
        .map(|t| {
            let t = t as f64;
            -t / (sigma_samples * sigma_samples) * norm * (-t * t / (2.0 * sigma_samples * sigma_samples)).exp()
        })
        .collect()
}

/// Smoothed derivative of `x`: convolution with [`fogd_kernel`], edges replicated.
pub fn fogd_filter(x: &[f64], sigma_samples: f64) -> Vec<f64> {
    let kernel = fogd_kernel(sigma_samples);
    let half = (kernel.len() / 2) as isize;
    let n = x.len() as isize;
    (0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let src = (i - (k as isize - half)).clamp(0, n - 1);
                    w * x[src as usize]
                })
                .sum()
        })
        .collect()
}

fn percentile_abs(values: &[f64], p: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(values.iter().map(|v| v.abs()));
    if scratch.is_empty() {
        return 0.0;
    }
    let rank = ((p * scratch.len() as f64).ceil() as usize).clamp(1, scratch.len()) - 1;
    let (_, v, _) = scratch.select_nth_unstable_by(rank, |a, b| a.total_cmp(b));
    *v
}

/// Locates maxima of `s_hat` with a first-order Gaussian differentiator.
///
/// Candidates are positive-to-negative zero crossings of the smoothed
/// derivative whose preceding rising slope exceeds `threshold_ratio` times
/// the `threshold_percentile` of |derivative| in a window around them. The
/// tallest surviving candidate wins each refractory window.
pub fn fogd_peak_pick(s_hat: &[f64], fs: f64, sigma_ms: f64, refractory_ms: f64) -> Result<AoPeaks> {
    let cfg = OspConfig {
        sigma_ms,
        refractory_ms,
        ..OspConfig::default()
    };
    fogd_peak_pick_with(s_hat, fs, &cfg)
}

pub fn fogd_peak_pick_with(s_hat: &[f64], fs: f64, cfg: &OspConfig) -> Result<AoPeaks> {
    if !(cfg.sigma_ms > 0.0) || !(cfg.refractory_ms > 0.0) || !(fs > 0.0) {
        return Err(Error::InvalidArgument(
            "sigma, refractory period and sampling rate must be positive".into(),
        ));
    }
    let n = s_hat.len();
    if n < 3 {
        return Err(Error::NoPeaksFound);
    }
    let sigma = cfg.sigma_ms * 1e-3 * fs;
    let deriv = fogd_filter(s_hat, sigma);
    let slope_span = (4.0 * sigma).ceil() as usize;
    let half_window = ((cfg.threshold_window_s * fs) / 2.0).round() as usize;

    let mut scratch = Vec::new();
    let mut candidates = Vec::new();
    for i in 0..n - 1 {
        if !(deriv[i] > 0.0 && deriv[i + 1] <= 0.0) {
            continue;
        }
        let peak = if deriv[i].abs() <= deriv[i + 1].abs() { i } else { i + 1 };
        let rise = deriv[i.saturating_sub(slope_span)..=i]
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        let lo = i.saturating_sub(half_window);
        let hi = (i + half_window + 1).min(n);
        let level = percentile_abs(&deriv[lo..hi], cfg.threshold_percentile, &mut scratch);
        if level > 0.0 && rise >= cfg.threshold_ratio * level {
            candidates.push(peak);
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoPeaksFound);
    }

    let refractory = (cfg.refractory_ms * 1e-3 * fs).round() as usize;
    let indices = strongest_per_window(&candidates, s_hat, refractory);
    Ok(AoPeaks { indices, fs })
}

/// Greedy selection by amplitude: a candidate survives when no taller one
/// lies within `refractory` samples. Ties go to the earlier index.
fn strongest_per_window(candidates: &[usize], amplitude: &[f64], refractory: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| amplitude[b].total_cmp(&amplitude[a]).then(a.cmp(&b)));
    let mut kept = BTreeSet::new();
    for c in order {
        let lo = c.saturating_sub(refractory.saturating_sub(1));
        let hi = c + refractory.saturating_sub(1);
        if kept.range(lo..=hi).next().is_none() {
            kept.insert(c);
        }
    }
    kept.into_iter().collect()
}

/// Full detector: subspace, projection, peak picking, refinement on the raw SCG.
pub fn detect_ao(record: &SignalRecord, config: &OspConfig) -> Result<AoPeaks> {
    record.validate()?;
    config.validate()?;
    let n = record.len();
    if config.delays > n / 10 {
        return Err(Error::DegenerateSubspace(format!(
            "{} delay taps is too many for {n} samples (limit n/10)",
            config.delays
        )));
    }
    if is_flat(&record.ecg) {
        return Err(Error::SingularGram);
    }
    let subspace = build_subspace(&record.ecg, &config.delay_taps())?;
    let projection = project(&record.scg, &subspace)?;
    let coarse = fogd_peak_pick_with(&projection.s_hat, record.fs, config)?;

    let half = (config.refine_ms * 1e-3 * record.fs).round() as usize;
    let mut refined: Vec<usize> = coarse
        .indices
        .iter()
        .map(|&p| {
            let lo = p.saturating_sub(half);
            let hi = (p + half).min(n - 1);
            (lo..=hi).fold(lo, |best, i| if record.scg[i] > record.scg[best] { i } else { best })
        })
        .collect();
    refined.dedup();

    let refractory = (config.refractory_ms * 1e-3 * record.fs).round() as usize;
    let indices = strongest_per_window(&refined, &record.scg, refractory);
    Ok(AoPeaks {
        indices,
        fs: record.fs,
    })
}

fn is_flat(x: &[f64]) -> bool {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    var <= 1e-24 * mean.abs().max(1.0).powi(2)
}
