//! Heart cycles between consecutive AO instants, resampled to a fixed length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::osp::AoPeaks;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeatConfig {
    pub beat_length: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
}

impl Default for BeatConfig {
    fn default() -> Self {
        BeatConfig {
            beat_length: 1000,
            min_duration_s: 0.3,
            max_duration_s: 2.0,
        }
    }
}

/// SCG samples in `[start_idx, end_idx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawBeat {
    pub samples: Vec<f64>,
    pub start_idx: usize,
    pub end_idx: usize,
    pub duration_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Cycles {
    pub beats: Vec<RawBeat>,
    /// Cycles rejected by the duration guard.
    pub dropped: usize,
}

pub fn extract_cycles(scg: &[f64], peaks: &AoPeaks) -> Result<Cycles> {
    extract_cycles_with(scg, peaks, &BeatConfig::default())
}

pub fn extract_cycles_with(scg: &[f64], peaks: &AoPeaks, cfg: &BeatConfig) -> Result<Cycles> {
    if peaks.indices.len() < 2 {
        return Err(Error::TooFewPeaks(peaks.indices.len()));
    }
    if let Some(&last) = peaks.indices.last() {
        if last > scg.len() {
            return Err(Error::Validation(format!(
                "AO index {last} beyond signal length {}",
                scg.len()
            )));
        }
    }
    let mut out = Cycles::default();
    for w in peaks.indices.windows(2) {
        let (start, end) = (w[0], w[1]);
        if end <= start {
            return Err(Error::Validation("AO indices must be strictly increasing".into()));
        }
        let duration_s = (end - start) as f64 / peaks.fs;
        if duration_s < cfg.min_duration_s || duration_s > cfg.max_duration_s {
            out.dropped += 1;
            continue;
        }
        out.beats.push(RawBeat {
            samples: scg[start..end].to_vec(),
            start_idx: start,
            end_idx: end,
            duration_s,
        });
    }
    Ok(out)
}

/// A beat resampled to `L` points plus its two normalized forms.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatedBeat {
    /// Resampled beat.
    pub s_bar: Vec<f64>,
    /// Minimum-shifted, unit-sum version of `s_bar` (a distribution over the beat).
    pub s_bar1: Vec<f64>,
    /// `s_bar1` with its mean removed, scaled to unit peak magnitude.
    pub s_bar2: Vec<f64>,
    pub original_duration_s: f64,
}

impl InterpolatedBeat {
    pub fn len(&self) -> usize {
        self.s_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_bar.is_empty()
    }
}

/// Fritsch-Carlson slopes for a monotone piecewise-cubic Hermite interpolant
/// on unit-spaced knots.
fn pchip_slopes(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n == 2 {
        let d = y[1] - y[0];
        return vec![d, d];
    }
    let delta: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).collect();
    let mut m = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        // equal spacing: weighted harmonic mean reduces to the plain one
        m[k] = if a * b > 0.0 { 2.0 * a * b / (a + b) } else { 0.0 };
    }
    m[0] = end_slope(delta[0], delta[1]);
    m[n - 1] = end_slope(delta[n - 2], delta[n - 3]);
    m
}

fn end_slope(d0: f64, d1: f64) -> f64 {
    let m = (3.0 * d0 - d1) / 2.0;
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > (3.0 * d0).abs() {
        3.0 * d0
    } else {
        m
    }
}

/// Resamples `y` (unit-spaced) onto `len` equally spaced points spanning the
/// same interval, endpoints included. No overshoot between knots.
pub fn pchip_resample(y: &[f64], len: usize) -> Vec<f64> {
    assert!(y.len() >= 2 && len >= 2);
    let slopes = pchip_slopes(y);
    let span = (y.len() - 1) as f64;
    (0..len)
        .map(|l| {
            if l == len - 1 {
                return y[y.len() - 1];
            }
            let x = l as f64 * span / (len - 1) as f64;
            let k = (x.floor() as usize).min(y.len() - 2);
            let t = x - k as f64;
            let (t2, t3) = (t * t, t * t * t);
            let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
            let h10 = t3 - 2.0 * t2 + t;
            let h01 = -2.0 * t3 + 3.0 * t2;
            let h11 = t3 - t2;
            h00 * y[k] + h10 * slopes[k] + h01 * y[k + 1] + h11 * slopes[k + 1]
        })
        .collect()
}

/// Shift to zero minimum and divide by the elemental sum.
pub fn unit_sum_normalize(x: &[f64]) -> Option<Vec<f64>> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let total: f64 = x.iter().map(|v| v - min).sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    Some(x.iter().map(|v| (v - min) / total).collect())
}

pub fn interpolate_beat(beat: &RawBeat, len: usize) -> Result<InterpolatedBeat> {
    if len < 16 {
        return Err(Error::InvalidArgument(format!("beat length must be at least 16, got {len}")));
    }
    let (lo, hi) = beat
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    // spread at rounding level is still a flat beat
    if beat.samples.len() < 2 || !(hi - lo > 1e-12 * hi.abs().max(lo.abs())) {
        return Err(Error::ConstantBeat);
    }
    let s_bar = pchip_resample(&beat.samples, len);
    let s_bar1 = unit_sum_normalize(&s_bar).ok_or(Error::ConstantBeat)?;

    let mean = s_bar1.iter().sum::<f64>() / len as f64;
    let centred: Vec<f64> = s_bar1.iter().map(|v| v - mean).collect();
    let peak = centred.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(peak > 0.0) {
        return Err(Error::ConstantBeat);
    }
    let s_bar2 = centred.iter().map(|v| v / peak).collect();

    Ok(InterpolatedBeat {
        s_bar,
        s_bar1,
        s_bar2,
        original_duration_s: beat.duration_s,
    })
}

/// Quartile split points `(M1, M2, M3)` of a beat of length `len`.
///
/// `M2` is rounded down and `M3` up so the segment is symmetric about the
/// midpoint within one sample.
pub fn diastole_bounds(len: usize) -> (usize, usize, usize) {
    let last = len - 1;
    let m1 = last / 2;
    let m2 = last / 4;
    let m3 = (3 * last).div_ceil(4);
    (m1, m2, m3)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiastoleSegment {
    /// `s_bar2[M2..=M3]`.
    pub d: Vec<f64>,
    /// Zero-minimum, unit-sum version of `d`.
    pub d1: Vec<f64>,
    pub m1: usize,
    pub m2: usize,
    pub m3: usize,
}

pub fn segment_diastole(beat: &InterpolatedBeat) -> Result<DiastoleSegment> {
    let (m1, m2, m3) = diastole_bounds(beat.len());
    let d = beat.s_bar2[m2..=m3].to_vec();
    let d1 = unit_sum_normalize(&d).ok_or(Error::ConstantSegment)?;
    Ok(DiastoleSegment { d, d1, m1, m2, m3 })
}
