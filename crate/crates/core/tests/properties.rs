use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use scg_breath::eval::run_experiment;
use scg_breath::features::{extract_all, kurtosis_of};
use scg_breath::osp::detect_ao;
use scg_breath::pipeline::extract_corpus;
use scg_breath::sae::{argmax, load_model, pretrain, save_model, train_model, Standardizer};
use scg_breath::signal_io::{load_features, load_record, save_features, save_record};
use scg_breath::synth::{generate, generate_corpus_with};
use scg_breath::*;

fn truth_peaks(r: &SignalRecord) -> AoPeaks {
    AoPeaks { indices: r.ao_truth.clone().unwrap(), fs: r.fs }
}

fn small_corpus() -> Vec<SignalRecord> {
    generate_corpus_with(&CorpusConfig { subjects: 3, duration_s: 30.0, ..Default::default() }).unwrap()
}

fn corpus_features() -> FeatureMatrix {
    let recs = small_corpus();
    let peaks: Vec<AoPeaks> = recs.iter().map(truth_peaks).collect();
    extract_corpus(&recs, &peaks, &FeatureConfig::default()).unwrap().0
}

fn to_dmatrix(m: &FeatureMatrix) -> DMatrix<f64> {
    let flat: Vec<f64> = m.rows.iter().flat_map(|r| r.to_array()).collect();
    DMatrix::from_row_slice(m.len(), FEATURE_COUNT, &flat)
}

fn rotate(x: &[f64], k: usize) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| x[(i + n - k) % n]).collect()
}

#[test]
fn records_survive_csv_and_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig::for_class(LabelClass::NB, 3);
    cfg.duration_s = 10.0;
    cfg.record_id = "s01_NB".into();
    let rec = generate(&cfg).unwrap();
    for format in [RecordFormat::Csv, RecordFormat::Json] {
        let path = dir.path().join(format!("r.{}", format.extension()));
        save_record(&rec, &path, format).unwrap();
        let back = load_record(&path, format).unwrap();
        assert_eq!(back.len(), rec.len());
        assert_eq!(back.ao_truth, rec.ao_truth);
        let worst = rec
            .ecg
            .iter()
            .chain(&rec.scg)
            .zip(back.ecg.iter().chain(&back.scg))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{format:?} drifted by {worst}");
    }
}

#[test]
fn feature_csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = FeatureMatrix::default();
    for i in 0..10 {
        let mut v = [0.0; FEATURE_COUNT];
        for x in &mut v {
            *x = rng.random_range(-1e3..1e3) * 10f64.powi(rng.random_range(-6..4));
        }
        m.push(format!("s{i:02}_SB"), FeatureVector::from_array(v), LabelClass::from_index(i % 3));
    }
    let path = dir.path().join("f.csv");
    save_features(&m, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 11);
    let back = load_features(&path).unwrap();
    assert_eq!(back.labels, m.labels);
    assert_eq!(back.record_ids, m.record_ids);
    for (a, b) in m.rows.iter().zip(&back.rows) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn detection_moves_with_a_delay() {
    let mut cfg = SynthConfig::for_class(LabelClass::LB, 11);
    cfg.duration_s = 20.0;
    let rec = generate(&cfg).unwrap();
    let osp = OspConfig::default();
    let base = detect_ao(&rec, &osp).unwrap().indices;
    let n = rec.len();
    let margin = 500;
    for k in [1usize, 37, 250] {
        let shifted = SignalRecord::new("shifted", rec.fs, rotate(&rec.ecg, k), rotate(&rec.scg, k), None, None).unwrap();
        let moved = detect_ao(&shifted, &osp).unwrap().indices;
        let interior: Vec<usize> = base.iter().copied().filter(|&p| p > margin && p + k + margin < n).collect();
        assert!(interior.len() > 15);
        for p in interior {
            assert!(moved.contains(&(p + k)), "peak {p} delayed by {k} not found");
        }
    }
}

#[test]
fn detected_instants_respect_the_refractory_period() {
    let osp = OspConfig::default();
    for rec in small_corpus() {
        let peaks = detect_ao(&rec, &osp).unwrap().indices;
        let min_gap = (osp.refractory_ms * rec.fs / 1000.0).floor() as usize;
        for w in peaks.windows(2) {
            assert!(w[1] > w[0] && w[1] - w[0] >= min_gap, "{}: {:?}", rec.record_id, w);
        }
    }
}

#[test]
fn sixty_bpm_for_forty_seconds_gives_about_forty_beats() {
    let mut cfg = SynthConfig::for_class(LabelClass::NB, 8);
    cfg.base_hr_bpm = 60.0;
    let rec = generate(&cfg).unwrap();
    let n = detect_ao(&rec, &OspConfig::default()).unwrap().len();
    assert!((39..=41).contains(&n), "{n} peaks");
}

#[test]
fn shape_features_ignore_scg_gain_and_energies_scale_quadratically() {
    let mut cfg = SynthConfig::for_class(LabelClass::SB, 21);
    cfg.duration_s = 15.0;
    let rec = generate(&cfg).unwrap();
    let peaks = truth_peaks(&rec);
    let fc = FeatureConfig::default();
    let base = extract_all(&rec, &peaks, &fc).unwrap().matrix;
    let c = 3.7;
    let mut scaled = rec.clone();
    scaled.scg.iter_mut().for_each(|v| *v *= c);
    let other = extract_all(&scaled, &peaks, &fc).unwrap().matrix;
    assert_eq!(base.len(), other.len());
    for (a, b) in base.rows.iter().zip(&other.rows) {
        for (i, (x, y)) in a.to_array().iter().zip(b.to_array()).enumerate() {
            let expected = match FEATURE_NAMES[i] {
                "BEnr" | "DBEnr" => x * c * c,
                _ => *x,
            };
            assert!(
                (y - expected).abs() <= 1e-9 * expected.abs().max(1e-6),
                "f_{} {y} vs {expected}",
                FEATURE_NAMES[i]
            );
        }
    }
}

#[test]
fn features_stay_in_range_on_the_corpus() {
    let m = corpus_features();
    let l = FeatureConfig::default().beats.beat_length as f64;
    for r in &m.rows {
        assert!(r.is_finite());
        assert!(r.f_k >= 1.0);
        assert!(r.f_bent >= 0.0 && r.f_bent <= l.ln() + 1e-12);
        assert!(r.f_dent >= 0.0 && r.f_bsent >= 0.0);
        assert!(r.f_benr >= 0.0 && r.f_denr >= 0.0);
    }
}

#[test]
fn class_morphology_shows_up_in_the_features() {
    let m = corpus_features();
    let mean = |class: LabelClass, f: fn(&FeatureVector) -> f64| {
        let v: Vec<f64> = m.rows.iter().zip(&m.labels).filter(|(_, l)| **l == Some(class)).map(|(r, _)| f(r)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let ia = |r: &FeatureVector| r.f_ia.abs();
    let denr = |r: &FeatureVector| r.f_denr;
    assert!(mean(LabelClass::SB, ia) > mean(LabelClass::LB, ia));
    assert!(mean(LabelClass::SB, denr) < mean(LabelClass::NB, denr));
    assert!(mean(LabelClass::SB, denr) < mean(LabelClass::LB, denr));
}

#[test]
fn kurtosis_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let g: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
    assert!((kurtosis_of(&g).unwrap() - 3.0).abs() < 0.1);

    // one spike among zeros: mean 1/L, moments by hand
    let len = 1000usize;
    let mut spike = vec![0.0; len];
    spike[123] = 1.0;
    let l = len as f64;
    let expected = (l * l - 3.0 * l + 3.0) / (l - 1.0);
    assert!((kurtosis_of(&spike).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn standardized_training_data_has_zero_mean_unit_spread() {
    let x = to_dmatrix(&corpus_features());
    let norm = Standardizer::fit(&x).unwrap();
    let z = norm.apply(&x).unwrap();
    let n = z.nrows() as f64;
    for (j, col) in z.column_iter().enumerate() {
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10, "column {j} mean {mean}");
        // degenerate columns are only centred
        if norm.std[j] != 1.0 {
            assert!((sd - 1.0).abs() < 1e-10, "column {j} std {sd}");
        }
    }
}

#[test]
fn model_behaviour_on_the_corpus() {
    let m = corpus_features();
    let x = to_dmatrix(&m);
    let labels = m.require_labels().unwrap();
    let cfg = TrainConfig::default();

    let norm = Standardizer::fit(&x).unwrap();
    let z = norm.apply(&x).unwrap();
    let accuracy = |model: &SaeModel| {
        let p = model.predict_proba_batch(&x).unwrap();
        let hits = p
            .row_iter()
            .zip(&labels)
            .filter(|(r, l)| argmax(&r.iter().copied().collect::<Vec<_>>()) == l.index())
            .count();
        hits as f64 / labels.len() as f64
    };
    let pre = pretrain(&z, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (stacked, _) = SaeModel::from_pretrained(pre, &z, &labels, norm, &cfg, &mut rng).unwrap();
    let (tuned, _) = stacked.finetune(&z, &labels, &cfg).unwrap();
    assert!(accuracy(&tuned) >= accuracy(&stacked), "{} < {}", accuracy(&tuned), accuracy(&stacked));

    // a constant shift of every logit changes nothing
    let mut shifted = tuned.clone();
    shifted.softmax_bias.iter_mut().for_each(|b| *b += 7.5);
    let (p, q) = (tuned.predict_proba_batch(&x).unwrap(), shifted.predict_proba_batch(&x).unwrap());
    assert!((p - q).abs().max() < 1e-12);

    let (model, _) = train_model(&x, &labels, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    for row in m.rows.iter().take(50) {
        let (a, b) = (model.classify(&row.to_array()).unwrap(), loaded.classify(&row.to_array()).unwrap());
        assert_eq!(a.label, b.label);
        assert_eq!(a.probabilities, b.probabilities);
    }
}

#[test]
fn pooled_confusion_is_the_sum_of_the_folds() {
    let m = corpus_features();
    let train = TrainConfig { epochs_pretrain: 60, epochs_finetune: 60, ..Default::default() };
    let eval = EvalConfig { k: 4, ..Default::default() };
    let report = run_experiment(&m, &train, &eval).unwrap();
    let mut sum = ConfusionMatrix::default();
    for f in &report.per_fold {
        sum.merge(&f.confusion);
        assert_eq!(f.confusion.total() as usize, f.n_test);
    }
    assert_eq!(sum, report.pooled);
    assert_eq!(report.pooled.total() as usize, m.len());
    let micro = 100.0 * report.pooled.trace() as f64 / report.pooled.total() as f64;
    assert!((report.pooled.accuracy().unwrap() - micro).abs() < 1e-12);
}
