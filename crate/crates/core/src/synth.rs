//! Synthetic ECG/SCG record pairs with exact AO annotations.
//!
//! The ECG is a sum of P, Q, R, S and T Gaussians per beat. Each SCG beat
//! is an AO wavelet 40 ms after the R peak, a shallow IM/IC trough just
//! before it and a diastolic wavelet half a cycle later. The three
//! breathing classes differ in heart-rate variability, amplitude
//! modulation depth and rate, and wavelet shape. None of this is meant to
//! be physiologically faithful.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{LabelClass, SignalRecord};

/// Delay from R peak to AO.
pub const AO_OFFSET_S: f64 = 0.040;
const ECG_SNR_DB: f64 = 30.0;

/// Shape of one SCG beat. Times are in milliseconds relative to AO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Morphology {
    pub ao_width_ms: f64,
    pub ao_freq_hz: f64,
    pub im_depth: f64,
    pub im_offset_ms: f64,
    pub dia_amp: f64,
    pub dia_width_ms: f64,
    pub dia_freq_hz: f64,
    /// Beat-to-beat amplitude scatter, as a fraction.
    pub amp_scatter: f64,
}

impl Morphology {
    pub fn for_class(class: LabelClass) -> Self {
        let base = Morphology {
            ao_width_ms: 12.0,
            ao_freq_hz: 20.0,
            im_depth: 0.35,
            im_offset_ms: 22.0,
            dia_amp: 0.3,
            dia_width_ms: 40.0,
            dia_freq_hz: 10.0,
            amp_scatter: 0.02,
        };
        match class {
            LabelClass::SB => Morphology {
                ao_width_ms: 10.5,
                ao_freq_hz: 21.0,
                im_depth: 0.4,
                dia_amp: 0.22,
                dia_width_ms: 35.0,
                ..base
            },
            LabelClass::NB => base,
            LabelClass::LB => Morphology {
                ao_width_ms: 13.5,
                ao_freq_hz: 19.0,
                im_depth: 0.3,
                dia_amp: 0.4,
                dia_width_ms: 45.0,
                ..base
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class: LabelClass,
    pub duration_s: f64,
    pub fs: f64,
    pub base_hr_bpm: f64,
    /// Relative spread of the RR intervals.
    pub hr_jitter: f64,
    pub am_depth: f64,
    pub resp_rate_hz: f64,
    pub noise_snr_db: f64,
    pub seed: u64,
    pub morphology: Morphology,
    pub scg_gain: f64,
    pub ecg_gain: f64,
    pub record_id: String,
}

impl SynthConfig {
    /// Class defaults for a 40 s record at 1 kHz and 72 bpm.
    pub fn for_class(class: LabelClass, seed: u64) -> Self {
        let (hr_jitter, am_depth, resp_rate_hz) = match class {
            LabelClass::SB => (0.003, 0.02, 0.2),
            LabelClass::NB => (0.03, 0.2, 0.25),
            LabelClass::LB => (0.07, 0.5, 0.1),
        };
        SynthConfig {
            class,
            duration_s: 40.0,
            fs: 1000.0,
            base_hr_bpm: 72.0,
            hr_jitter,
            am_depth,
            resp_rate_hz,
            noise_snr_db: 20.0,
            seed,
            morphology: Morphology::for_class(class),
            scg_gain: 1.0,
            ecg_gain: 1.0,
            record_id: format!("synth_{class}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 10.0) {
            return Err(Error::Config(format!("duration must be at least 10 s, got {}", self.duration_s)));
        }
        if !(self.fs >= 250.0) {
            return Err(Error::Config(format!("fs must be at least 250 Hz, got {}", self.fs)));
        }
        if !(self.base_hr_bpm > 40.0 && self.base_hr_bpm < 140.0) {
            return Err(Error::Config(format!("base heart rate {} bpm outside (40, 140)", self.base_hr_bpm)));
        }
        if !(0.0..=1.0).contains(&self.am_depth) || !(0.0..0.2).contains(&self.hr_jitter) {
            return Err(Error::Config("am_depth must lie in [0, 1] and hr_jitter in [0, 0.2)".into()));
        }
        if !(self.resp_rate_hz > 0.0) || !self.noise_snr_db.is_finite() || !(self.scg_gain > 0.0 && self.ecg_gain > 0.0) {
            return Err(Error::Config("respiration rate, gains and SNR must be positive and finite".into()));
        }
        Ok(())
    }
}

fn gaussian(t: f64, width: f64) -> f64 {
    (-t * t / (2.0 * width * width)).exp()
}

fn gabor(t: f64, width: f64, freq: f64) -> f64 {
    gaussian(t, width) * (2.0 * PI * freq * t).cos()
}

/// (offset s, width s, amplitude) for P, Q, R, S, T.
const ECG_WAVES: [(f64, f64, f64); 5] = [
    (-0.16, 0.020, 0.15),
    (-0.03, 0.008, -0.15),
    (0.0, 0.008, 1.0),
    (0.03, 0.008, -0.25),
    (0.25, 0.040, 0.30),
];

fn add_noise(x: &mut [f64], snr_db: f64, rng: &mut ChaCha8Rng) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let sd = rms / 10f64.powf(snr_db / 20.0);
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("finite noise level");
        for v in x.iter_mut() {
            *v += normal.sample(rng);
        }
    }
}

/// R-peak sample indices. RR intervals follow a respiratory sinusoid plus
/// white scatter, scaled so that their relative spread is about `hr_jitter`.
fn beat_instants(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rr0 = 60.0 / cfg.base_hr_bpm;
    let phase = rng.random_range(0.0..2.0 * PI);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // last beat needs room for its AO wavelet
    let end = cfg.duration_s - 0.3;
    let mut t = rng.random_range(0.1..0.5) * rr0;
    let mut out = Vec::new();
    while t < end {
        out.push((t * cfg.fs).round() as usize);
        let resp = (2.0 * PI * cfg.resp_rate_hz * t + phase).sin();
        let z: f64 = normal.sample(rng);
        let rel = cfg.hr_jitter * (resp + z) / 1.5f64.sqrt();
        t += rr0 * (1.0 + rel.clamp(-0.3, 0.3));
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SignalRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = (cfg.duration_s * cfg.fs).round() as usize;
    let fs = cfg.fs;
    let r_peaks = beat_instants(cfg, &mut rng);
    let ao_offset = (AO_OFFSET_S * fs).round() as usize;
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let m = &cfg.morphology;

    let mut ecg = vec![0.0; n];
    let mut scg = vec![0.0; n];
    let mut ao_truth = Vec::with_capacity(r_peaks.len());
    for (b, &r) in r_peaks.iter().enumerate() {
        let rr = match (r_peaks.get(b + 1), b.checked_sub(1).map(|p| r_peaks[p])) {
            (Some(&next), _) => (next - r) as f64 / fs,
            (None, Some(prev)) => (r - prev) as f64 / fs,
            (None, None) => 60.0 / cfg.base_hr_bpm,
        };
        let lo = r.saturating_sub((0.3 * fs) as usize);
        let hi = (r + (0.5 * fs) as usize).min(n);
        for i in lo..hi {
            let t = (i as f64 - r as f64) / fs;
            ecg[i] += cfg.ecg_gain * ECG_WAVES.iter().map(|&(o, w, a)| a * gaussian(t - o, w)).sum::<f64>();
        }

        let ao = r + ao_offset;
        if ao >= n {
            continue;
        }
        ao_truth.push(ao);
        let t_ao = ao as f64 / fs;
        let envelope = 1.0 + cfg.am_depth * (2.0 * PI * cfg.resp_rate_hz * t_ao + am_phase).sin();
        let amp = cfg.scg_gain * envelope * (1.0 + m.amp_scatter * rng.random_range(-1.0..1.0));
        let (ao_w, im_off, im_w) = (m.ao_width_ms * 1e-3, m.im_offset_ms * 1e-3, 8e-3);
        let (dia_t, dia_w) = (0.5 * rr, m.dia_width_ms * 1e-3);
        let lo = ao.saturating_sub((0.1 * fs) as usize);
        let hi = (ao + ((dia_t + 4.0 * dia_w) * fs) as usize).min(n);
        for i in lo..hi {
            let t = (i as f64 - ao as f64) / fs;
            scg[i] += amp
                * (gabor(t, ao_w, m.ao_freq_hz) - m.im_depth * gaussian(t + im_off, im_w)
                    + m.dia_amp * gabor(t - dia_t, dia_w, m.dia_freq_hz));
        }
    }

    add_noise(&mut ecg, ECG_SNR_DB, &mut rng);
    add_noise(&mut scg, cfg.noise_snr_db, &mut rng);
    SignalRecord::new(cfg.record_id.clone(), fs, ecg, scg, Some(cfg.class), Some(ao_truth))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub subjects: usize,
    pub duration_s: f64,
    pub fs: f64,
    pub noise_snr_db: f64,
    pub classes: Vec<LabelClass>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            subjects: 8,
            duration_s: 40.0,
            fs: 1000.0,
            noise_snr_db: 20.0,
            classes: LabelClass::ALL.to_vec(),
            seed: 42,
        }
    }
}

fn class_hr_offset(class: LabelClass) -> f64 {
    match class {
        LabelClass::SB => -3.0,
        LabelClass::NB => 0.0,
        LabelClass::LB => 3.0,
    }
}

/// Per-subject configurations. Each subject draws its own heart rate,
/// gains and wavelet proportions; records are named `sNN_CLASS`.
pub fn corpus_configs(cfg: &CorpusConfig) -> Result<Vec<SynthConfig>> {
    if cfg.subjects == 0 {
        return Err(Error::InvalidArgument("corpus needs at least one subject".into()));
    }
    if cfg.classes.is_empty() {
        return Err(Error::InvalidArgument("corpus needs at least one class".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.subjects * cfg.classes.len());
    for s in 1..=cfg.subjects {
        let hr: f64 = master.random_range(66.0..80.0);
        let scg_gain: f64 = master.random_range(0.7..1.3);
        let ecg_gain: f64 = master.random_range(0.8..1.2);
        let width_scale: f64 = master.random_range(0.85..1.15);
        let dia_scale: f64 = master.random_range(0.75..1.25);
        for &class in &cfg.classes {
            let mut c = SynthConfig::for_class(class, master.random());
            c.duration_s = cfg.duration_s;
            c.fs = cfg.fs;
            c.noise_snr_db = cfg.noise_snr_db;
            c.base_hr_bpm = hr + class_hr_offset(class);
            c.scg_gain = scg_gain;
            c.ecg_gain = ecg_gain;
            c.morphology.ao_width_ms *= width_scale;
            c.morphology.dia_width_ms *= width_scale;
            c.morphology.dia_amp *= dia_scale;
            c.record_id = format!("s{s:02}_{class}");
            out.push(c);
        }
    }
    Ok(out)
}

pub fn generate_corpus_with(cfg: &CorpusConfig) -> Result<Vec<SignalRecord>> {
    corpus_configs(cfg)?.iter().map(generate).collect()
}

/// `n_subjects` subjects, each with one record per class.
pub fn generate_corpus(n_subjects: usize, per_class_duration_s: f64, seed: u64) -> Result<Vec<SignalRecord>> {
    generate_corpus_with(&CorpusConfig {
        subjects: n_subjects,
        duration_s: per_class_duration_s,
        seed,
        ..CorpusConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rr_cv(ao: &[usize]) -> f64 {
        let rr: Vec<f64> = ao.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        let mean = rr.iter().sum::<f64>() / rr.len() as f64;
        let var = rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rr.len() as f64;
        var.sqrt() / mean
    }

    #[test]
    fn stopped_breathing_has_steady_rhythm() {
        let rec = generate(&SynthConfig::for_class(LabelClass::SB, 1)).unwrap();
        assert!(rr_cv(rec.ao_truth.as_ref().unwrap()) < 0.01);
    }

    #[test]
    fn laboured_breathing_is_amplitude_modulated() {
        let rec = generate(&SynthConfig::for_class(LabelClass::LB, 2)).unwrap();
        let amps: Vec<f64> = rec.ao_truth.unwrap().iter().map(|&i| rec.scg[i]).collect();
        let max = amps.iter().cloned().fold(f64::MIN, f64::max);
        let min = amps.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min >= 1.8, "{max} / {min}");
    }

    #[test]
    fn beat_count_matches_rate() {
        for class in LabelClass::ALL {
            for seed in 0..5 {
                let cfg = SynthConfig::for_class(class, seed);
                let rec = generate(&cfg).unwrap();
                let expected = (cfg.duration_s * cfg.base_hr_bpm / 60.0).floor() as i64;
                let got = rec.ao_truth.unwrap().len() as i64;
                assert!((got - expected).abs() <= 1, "{class} seed {seed}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn variability_is_ordered_by_class() {
        let cv: Vec<f64> = LabelClass::ALL
            .iter()
            .map(|&c| rr_cv(&generate(&SynthConfig::for_class(c, 3)).unwrap().ao_truth.unwrap()))
            .collect();
        assert!(cv[0] < cv[1] && cv[1] < cv[2], "{cv:?}");
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig::for_class(LabelClass::NB, 9);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 10, ..cfg };
        assert_ne!(generate(&other).unwrap().scg, generate(&SynthConfig::for_class(LabelClass::NB, 9)).unwrap().scg);
    }

    #[test]
    fn corpus_layout() {
        let recs = generate_corpus(2, 12.0, 4).unwrap();
        let ids: Vec<&str> = recs.iter().map(|r| r.record_id.as_str()).collect();
        assert_eq!(ids, ["s01_SB", "s01_NB", "s01_LB", "s02_SB", "s02_NB", "s02_LB"]);
        for (i, a) in recs.iter().enumerate() {
            for b in &recs[i + 1..] {
                assert_ne!(a.scg, b.scg);
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let base = SynthConfig::for_class(LabelClass::SB, 0);
        assert!(generate(&SynthConfig { duration_s: 5.0, ..base.clone() }).is_err());
        assert!(generate(&SynthConfig { fs: 100.0, ..base.clone() }).is_err());
        assert!(generate(&SynthConfig { base_hr_bpm: 150.0, ..base }).is_err());
    }
}
