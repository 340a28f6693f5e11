//! The fifteen per-beat features and labeled feature matrices.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::beats::{
    extract_cycles_with, interpolate_beat, segment_diastole, BeatConfig, DiastoleSegment,
    InterpolatedBeat, RawBeat,
};
use crate::error::{Error, Result};
use crate::osp::AoPeaks;
use crate::signal_io::{LabelClass, SignalRecord};

/// Canonical column order.
pub const FEATURE_NAMES: [&str; 15] = [
    "HR", "DHR", "BEnr", "BEnt", "DBEnr", "DBEnt", "K", "IA", "ACF", "DEnt", "DEnr", "MSA", "FMSA",
    "BSEnt", "BSC",
];

pub const FEATURE_COUNT: usize = FEATURE_NAMES.len();

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub f_hr: f64,
    pub f_dhr: f64,
    pub f_benr: f64,
    pub f_bent: f64,
    pub f_dbenr: f64,
    pub f_dbent: f64,
    pub f_k: f64,
    pub f_ia: f64,
    pub f_acf: f64,
    pub f_dent: f64,
    pub f_denr: f64,
    pub f_msa: f64,
    pub f_fmsa: f64,
    pub f_bsent: f64,
    pub f_bsc: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.f_hr, self.f_dhr, self.f_benr, self.f_bent, self.f_dbenr, self.f_dbent, self.f_k,
            self.f_ia, self.f_acf, self.f_dent, self.f_denr, self.f_msa, self.f_fmsa, self.f_bsent,
            self.f_bsc,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        FeatureVector {
            f_hr: v[0],
            f_dhr: v[1],
            f_benr: v[2],
            f_bent: v[3],
            f_dbenr: v[4],
            f_dbent: v[5],
            f_k: v[6],
            f_ia: v[7],
            f_acf: v[8],
            f_dent: v[9],
            f_denr: v[10],
            f_msa: v[11],
            f_fmsa: v[12],
            f_bsent: v[13],
            f_bsc: v[14],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Beats × 15 feature table with per-row label and provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<FeatureVector>,
    pub labels: Vec<Option<LabelClass>>,
    pub record_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, record_id: String, row: FeatureVector, label: Option<LabelClass>) {
        self.rows.push(row);
        self.labels.push(label);
        self.record_ids.push(record_id);
    }

    pub fn extend(&mut self, other: FeatureMatrix) {
        self.rows.extend(other.rows);
        self.labels.extend(other.labels);
        self.record_ids.extend(other.record_ids);
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.rows.len() || self.record_ids.len() != self.rows.len() {
            return Err(Error::Validation("feature matrix columns have unequal lengths".into()));
        }
        if let Some(i) = self.rows.iter().position(|r| !r.is_finite()) {
            return Err(Error::Validation(format!("feature row {i} has a non-finite value")));
        }
        Ok(())
    }

    /// Labels for every row, failing if any row is unlabeled.
    pub fn require_labels(&self) -> Result<Vec<LabelClass>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::Validation(format!("feature row {i} has no label"))))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            record_ids: indices.iter().map(|&i| self.record_ids[i].clone()).collect(),
        }
    }

    pub fn to_rows(&self) -> Vec<[f64; FEATURE_COUNT]> {
        self.rows.iter().map(FeatureVector::to_array).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Delay of the circular difference features.
    pub delay_d: usize,
    /// Autocorrelation lag in resampled points; `None` means a quarter beat.
    pub acf_lag: Option<usize>,
    #[serde(flatten)]
    pub beats: BeatConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            delay_d: 3,
            acf_lag: None,
            beats: BeatConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn lag(&self) -> usize {
        self.acf_lag.unwrap_or(self.beats.beat_length / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay_d < 1 {
            return Err(Error::Config("delay D must be at least 1".into()));
        }
        if self.beats.beat_length < 16 {
            return Err(Error::Config("beat length must be at least 16".into()));
        }
        if self.lag() >= self.beats.beat_length {
            return Err(Error::Config(format!(
                "ACF lag {} must be smaller than the beat length {}",
                self.lag(),
                self.beats.beat_length
            )));
        }
        Ok(())
    }
}

/// `out[i] = |seq[i] - seq[(i - D) mod len]|`.
pub fn difference_features(seq: &[f64], delay: usize) -> Vec<f64> {
    let n = seq.len();
    if n == 0 {
        return Vec::new();
    }
    let shift = delay % n;
    (0..n)
        .map(|i| (seq[i] - seq[(i + n - shift) % n]).abs())
        .collect()
}

/// Heart rate per cycle in bpm and its circular difference at lag `delay`.
pub fn heart_rate_features(cycles: &[RawBeat], delay: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if cycles.len() < delay + 1 {
        return Err(Error::TooFewBeats {
            needed: delay + 1,
            got: cycles.len(),
        });
    }
    let hr: Vec<f64> = cycles.iter().map(|c| 60.0 / c.duration_s).collect();
    let dhr = difference_features(&hr, delay);
    Ok((hr, dhr))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Mean squared amplitude of the resampled beat and entropy of its unit-sum form.
pub fn beat_energy_entropy(beat: &InterpolatedBeat) -> (f64, f64) {
    let energy = mean_square(&beat.s_bar);
    (energy, shannon_entropy(&beat.s_bar1))
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Population kurtosis (fourth central moment over squared variance).
pub fn kurtosis_of(x: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (m2, m4) = x.iter().fold((0.0, 0.0), |(m2, m4), v| {
        let d2 = (v - mean) * (v - mean);
        (m2 + d2, m4 + d2 * d2)
    });
    let (m2, m4) = (m2 / n, m4 / n);
    if !(m2 > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(m4 / (m2 * m2))
}

pub fn kurtosis(beat: &InterpolatedBeat) -> Result<f64> {
    kurtosis_of(&beat.s_bar2)
}

/// Linear (zero-padded) autocorrelation at a single lag.
pub fn acf_of(x: &[f64], lag: usize) -> f64 {
    if lag >= x.len() {
        return 0.0;
    }
    x.iter().zip(&x[lag..]).map(|(a, b)| a * b).sum()
}

pub fn acf_feature(beat: &InterpolatedBeat, lag: usize) -> f64 {
    acf_of(&beat.s_bar2, lag)
}

/// Depth of the deepest trough of the normalized beat.
pub fn ia_feature(beat: &InterpolatedBeat) -> f64 {
    beat.s_bar2.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn diastole_features(seg: &DiastoleSegment) -> (f64, f64) {
    (mean_square(&seg.d), shannon_entropy(&seg.d1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralFeatures {
    /// Largest magnitude.
    pub msa: f64,
    /// Frequency of the largest magnitude, Hz.
    pub fmsa: f64,
    /// Magnitude-weighted mean frequency, Hz.
    pub bsc: f64,
    /// Entropy of the unit-sum magnitude spectrum, nats.
    pub bsent: f64,
}

/// One-sided DFT magnitudes, bins `0..=len/2`.
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.truncate(x.len() / 2 + 1);
    buf.iter().map(|c| c.norm()).collect()
}

/// Spectral quartet of an arbitrary sequence; bin `k` maps to `k * fs / len` Hz.
pub fn spectral_features_of(x: &[f64], fs: f64) -> Result<SpectralFeatures> {
    let mag = magnitude_spectrum(x);
    let bin_hz = fs / x.len() as f64;
    let total: f64 = mag.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroSpectrum);
    }
    // lowest bin wins ties
    let (k_max, msa) = mag
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
    let bsc = mag
        .iter()
        .enumerate()
        .map(|(k, m)| k as f64 * bin_hz * m)
        .sum::<f64>()
        / total;
    let normalized: Vec<f64> = mag.iter().map(|m| m / total).collect();
    Ok(SpectralFeatures {
        msa,
        fmsa: k_max as f64 * bin_hz,
        bsc,
        bsent: shannon_entropy(&normalized),
    })
}

/// Spectral quartet of the unit-sum beat.
pub fn spectral_features(beat: &InterpolatedBeat, fs: f64) -> Result<SpectralFeatures> {
    spectral_features_of(&beat.s_bar1, fs)
}

/// Why a cycle did not make it into the feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DropReason {
    pub record_id: String,
    pub start_idx: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Extraction {
    pub matrix: FeatureMatrix,
    pub dropped: Vec<DropReason>,
}

struct BeatShape {
    benr: f64,
    bent: f64,
    k: f64,
    ia: f64,
    acf: f64,
    dent: f64,
    denr: f64,
    spectral: SpectralFeatures,
}

fn beat_shape(beat: &RawBeat, fs: f64, cfg: &FeatureConfig) -> Result<BeatShape> {
    let ib = interpolate_beat(beat, cfg.beats.beat_length)?;
    let seg = segment_diastole(&ib)?;
    let (benr, bent) = beat_energy_entropy(&ib);
    let (denr, dent) = diastole_features(&seg);
    Ok(BeatShape {
        benr,
        bent,
        k: kurtosis(&ib)?,
        ia: ia_feature(&ib),
        acf: acf_feature(&ib, cfg.lag()),
        dent,
        denr,
        spectral: spectral_features(&ib, fs)?,
    })
}

/// Every retained beat of a record as a labeled feature row.
///
/// Circular differences run over the sequence of retained beats, so beats
/// rejected by the duration guard or a degenerate shape are skipped before
/// the sequence is formed.
pub fn extract_all(record: &SignalRecord, peaks: &AoPeaks, cfg: &FeatureConfig) -> Result<Extraction> {
    cfg.validate()?;
    let cycles = extract_cycles_with(&record.scg, peaks, &cfg.beats)?;
    let mut dropped = Vec::new();
    if cycles.dropped > 0 {
        dropped.push(DropReason {
            record_id: record.record_id.clone(),
            start_idx: None,
            reason: format!("{} cycle(s) outside the duration guard", cycles.dropped),
        });
    }

    let mut kept = Vec::with_capacity(cycles.beats.len());
    for beat in cycles.beats {
        match beat_shape(&beat, record.fs, cfg) {
            Ok(shape) => kept.push((beat, shape)),
            Err(e) => dropped.push(DropReason {
                record_id: record.record_id.clone(),
                start_idx: Some(beat.start_idx),
                reason: e.to_string(),
            }),
        }
    }

    let raw: Vec<RawBeat> = kept.iter().map(|(b, _)| b.clone()).collect();
    let (hr, dhr) = heart_rate_features(&raw, cfg.delay_d)?;
    let benr: Vec<f64> = kept.iter().map(|(_, s)| s.benr).collect();
    let bent: Vec<f64> = kept.iter().map(|(_, s)| s.bent).collect();
    let dbenr = difference_features(&benr, cfg.delay_d);
    let dbent = difference_features(&bent, cfg.delay_d);

    let mut matrix = FeatureMatrix::default();
    for (i, (beat, s)) in kept.iter().enumerate() {
        let row = FeatureVector {
            f_hr: hr[i],
            f_dhr: dhr[i],
            f_benr: s.benr,
            f_bent: s.bent,
            f_dbenr: dbenr[i],
            f_dbent: dbent[i],
            f_k: s.k,
            f_ia: s.ia,
            f_acf: s.acf,
            f_dent: s.dent,
            f_denr: s.denr,
            f_msa: s.spectral.msa,
            f_fmsa: s.spectral.fmsa,
            f_bsent: s.spectral.bsent,
            f_bsc: s.spectral.bsc,
        };
        if row.is_finite() {
            matrix.push(record.record_id.clone(), row, record.label);
        } else {
            tracing::warn!(record = %record.record_id, start = beat.start_idx, "dropping non-finite feature row");
            dropped.push(DropReason {
                record_id: record.record_id.clone(),
                start_idx: Some(beat.start_idx),
                reason: "non-finite feature value".into(),
            });
        }
    }
    Ok(Extraction { matrix, dropped })
}
