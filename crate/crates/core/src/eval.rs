//! Cross-validation, one-vs-rest metrics, ROC analysis and report output.
//!
//! Metric values are percentages. A metric whose denominator is zero is
//! `None`; it is written as `null` in JSON and `n/a` in tables and is left
//! out of fold averages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_COUNT};
use crate::sae::{train_model, Standardizer, TrainConfig};
use crate::signal_io::LabelClass;

const N: usize = LabelClass::COUNT;

/// Rows are the true class, columns the predicted class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N]; N],
}

impl ConfusionMatrix {
    pub fn from_predictions(truth: &[LabelClass], predicted: &[LabelClass]) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (t, p) in truth.iter().zip(predicted) {
            cm.add(*t, *p);
        }
        cm
    }

    pub fn add(&mut self, truth: LabelClass, predicted: LabelClass) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for i in 0..N {
            for j in 0..N {
                self.counts[i][j] += other.counts[i][j];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }

    /// `(TP, TN, FP, FN)` with `class` as the positive class.
    pub fn one_vs_rest(&self, class: LabelClass) -> (u64, u64, u64, u64) {
        let c = class.index();
        let tp = self.counts[c][c];
        let fn_ = (0..N).map(|j| self.counts[c][j]).sum::<u64>() - tp;
        let fp = (0..N).map(|i| self.counts[i][c]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, tn, fp, fn_)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub acc: Option<f64>,
    pub precision: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    pub fn as_array(&self) -> [Option<f64>; 5] {
        [self.acc, self.precision, self.tpr, self.tnr, self.f1]
    }
}

pub const METRIC_NAMES: [&str; 5] = ["ACC", "Pr", "TPR", "TNR", "F1"];

/// Harmonic mean of precision and recall, in the same units as its inputs.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

pub fn class_metrics(cm: &ConfusionMatrix, class: LabelClass) -> ClassMetrics {
    let (tp, tn, fp, fn_) = cm.one_vs_rest(class);
    ClassMetrics {
        acc: ratio(tp + tn, tp + tn + fp + fn_),
        precision: ratio(tp, tp + fp),
        tpr: ratio(tp, tp + fn_),
        tnr: ratio(tn, tn + fp),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> [ClassMetrics; N] {
    LabelClass::ALL.map(|c| class_metrics(cm, c))
}

/// Mean over the defined values, with the number of values left out.
fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut missing) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => missing += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), missing)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub fold_id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn folds_from_assignment(assign: &[usize], k: usize) -> Vec<Fold> {
    (0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..assign.len()).partition(|&i| assign[i] == f);
            Fold { fold_id: f, train, test }
        })
        .collect()
}

/// Stratified k-fold split. Within each class the rows are shuffled, the
/// classes are laid end to end and fold `i mod k` takes position `i`, which
/// keeps both class proportions and fold sizes within one of each other.
pub fn kfold_split(labels: &[LabelClass], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for class in LabelClass::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::TooFewSamples(format!(
                "class {class} has {} rows, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut assign = vec![0; labels.len()];
    for (pos, &row) in order.iter().enumerate() {
        assign[row] = pos % k;
    }
    Ok(folds_from_assignment(&assign, k))
}

/// Subject key of a record id: the part before the first `_`.
pub fn subject_of(record_id: &str) -> &str {
    record_id.split('_').next().unwrap_or(record_id)
}

/// k-fold split that keeps every subject's rows in a single test fold.
pub fn subject_split(record_ids: &[String], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut subjects: Vec<&str> = record_ids.iter().map(|r| subject_of(r)).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < k {
        return Err(Error::TooFewSamples(format!(
            "{} subjects cannot fill {k} subject-wise folds",
            subjects.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let fold_of: BTreeMap<&str, usize> = subjects.iter().enumerate().map(|(i, s)| (*s, i % k)).collect();
    let assign: Vec<usize> = record_ids.iter().map(|r| fold_of[subject_of(r)]).collect();
    Ok(folds_from_assignment(&assign, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value count as positive. `None` on the
    /// first point, where nothing is.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC of a binary scoring. The threshold sweeps the distinct scores from
/// high to low and tied scores move together, so the curve runs diagonally
/// through ties.
pub fn roc_binary(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch { expected: scores.len(), got: positive.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("ROC scores must be finite".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassFold(positive.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: None }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().expect("seeded with origin");
        let (fpr, tpr) = (fp as f64 / n_neg as f64, tp as f64 / n_pos as f64);
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint { fpr, tpr, threshold: Some(threshold) });
    }
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: LabelClass,
    #[serde(flatten)]
    pub curve: RocCurve,
}

/// One-vs-rest ROC for each class from a beats × 3 probability matrix.
pub fn roc_curve(scores: &DMatrix<f64>, labels: &[LabelClass]) -> Result<Vec<ClassRoc>> {
    if scores.ncols() != N {
        return Err(Error::DimensionMismatch { expected: N, got: scores.ncols() });
    }
    LabelClass::ALL
        .iter()
        .map(|&class| {
            let col: Vec<f64> = scores.column(class.index()).iter().copied().collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
            Ok(ClassRoc { class, curve: roc_binary(&col, &pos)? })
        })
        .collect()
}

/// k-nearest-neighbour vote under Euclidean distance. Distance ties keep
/// training order; a tied vote goes to the class of the nearest neighbour
/// among the tied classes.
pub fn knn_predict(train: &DMatrix<f64>, train_labels: &[LabelClass], test: &DMatrix<f64>, k: usize) -> Result<Vec<LabelClass>> {
    if k == 0 || train.nrows() < k {
        return Err(Error::TooFewSamples(format!("kNN with k = {k} on {} training rows", train.nrows())));
    }
    if train.ncols() != test.ncols() {
        return Err(Error::DimensionMismatch { expected: train.ncols(), got: test.ncols() });
    }
    let predictions = test
        .row_iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = train
                .row_iter()
                .enumerate()
                .map(|(i, r)| ((r - q).norm_squared(), i))
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut votes = [0usize; N];
            for &(_, i) in &dist[..k] {
                votes[train_labels[i].index()] += 1;
            }
            let best = *votes.iter().max().expect("three classes");
            let winner = dist[..k]
                .iter()
                .map(|&(_, i)| train_labels[i])
                .find(|c| votes[c.index()] == best)
                .expect("some neighbour holds the top vote");
            winner
        })
        .collect();
    Ok(predictions)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[default]
    Beat,
    Subject,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beat" => Ok(SplitMode::Beat),
            "subject" => Ok(SplitMode::Subject),
            other => Err(Error::Config(format!("unknown split mode {other:?} (expected beat or subject)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    pub split: SplitMode,
    /// Run the kNN baseline on the same folds.
    pub knn_baseline: bool,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 10,
            seed: 42,
            split: SplitMode::Beat,
            knn_baseline: true,
            knn_k: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: LabelClass,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

fn class_entries(cm: &ConfusionMatrix) -> Vec<ClassEntry> {
    LabelClass::ALL
        .iter()
        .zip(compute_metrics(cm))
        .map(|(&class, metrics)| ClassEntry { class, metrics })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Vec<ClassEntry>,
    pub overall_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAverage {
    pub class: LabelClass,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    /// Fold values left out of each average because they were undefined,
    /// in the order ACC, Pr, TPR, TNR, F1.
    pub undefined_folds: [usize; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub per_class: Vec<ClassAverage>,
    pub overall_accuracy: Option<f64>,
}

fn average_folds(folds: &[FoldReport]) -> Averages {
    let per_class = LabelClass::ALL
        .iter()
        .map(|&class| {
            let c = class.index();
            let mut means = [None; 5];
            let mut undefined = [0; 5];
            for m in 0..5 {
                let (mean, missing) = mean_defined(folds.iter().map(|f| f.metrics[c].metrics.as_array()[m]));
                means[m] = mean;
                undefined[m] = missing;
            }
            ClassAverage {
                class,
                metrics: ClassMetrics {
                    acc: means[0],
                    precision: means[1],
                    tpr: means[2],
                    tnr: means[3],
                    f1: means[4],
                },
                undefined_folds: undefined,
            }
        })
        .collect();
    Averages {
        per_class,
        overall_accuracy: mean_defined(folds.iter().map(|f| f.overall_accuracy)).0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub name: String,
    pub k_neighbours: usize,
    pub fold_accuracy: Vec<Option<f64>>,
    pub average_accuracy: Option<f64>,
    pub pooled: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub seed: u64,
    pub split: SplitMode,
    pub n_observations: usize,
    pub per_fold: Vec<FoldReport>,
    pub averages: Averages,
    /// Sum of the fold confusion matrices.
    pub pooled: ConfusionMatrix,
    /// ROC over the pooled out-of-fold probabilities.
    pub roc: Vec<ClassRoc>,
    pub baseline: Option<BaselineReport>,
}

struct FoldOutcome {
    report: FoldReport,
    probabilities: DMatrix<f64>,
    knn: Option<ConfusionMatrix>,
}

fn features_to_matrix(m: &FeatureMatrix) -> DMatrix<f64> {
    let flat: Vec<f64> = m.rows.iter().flat_map(|r| r.to_array()).collect();
    DMatrix::from_row_slice(m.len(), FEATURE_COUNT, &flat)
}

fn run_fold(x: &DMatrix<f64>, labels: &[LabelClass], fold: &Fold, train_cfg: &TrainConfig, eval_cfg: &EvalConfig) -> Result<FoldOutcome> {
    let x_train = x.select_rows(&fold.train);
    let x_test = x.select_rows(&fold.test);
    let y_train: Vec<LabelClass> = fold.train.iter().map(|&i| labels[i]).collect();
    let y_test: Vec<LabelClass> = fold.test.iter().map(|&i| labels[i]).collect();

    let (model, _) = train_model(&x_train, &y_train, train_cfg)?;
    let probabilities = model.predict_proba_batch(&x_test)?;
    let predicted: Vec<LabelClass> = probabilities
        .row_iter()
        .map(|r| {
            let p: Vec<f64> = r.iter().copied().collect();
            LabelClass::from_index(crate::sae::argmax(&p)).expect("three classes")
        })
        .collect();
    let confusion = ConfusionMatrix::from_predictions(&y_test, &predicted);

    let knn = if eval_cfg.knn_baseline {
        let norm = Standardizer::fit(&x_train)?;
        let pred = knn_predict(&norm.apply(&x_train)?, &y_train, &norm.apply(&x_test)?, eval_cfg.knn_k)?;
        Some(ConfusionMatrix::from_predictions(&y_test, &pred))
    } else {
        None
    };

    tracing::debug!(fold = fold.fold_id, accuracy = confusion.accuracy(), "fold finished");
    Ok(FoldOutcome {
        report: FoldReport {
            fold_id: fold.fold_id,
            n_train: fold.train.len(),
            n_test: fold.test.len(),
            metrics: class_entries(&confusion),
            overall_accuracy: confusion.accuracy(),
            confusion,
        },
        probabilities,
        knn,
    })
}

/// k-fold evaluation of the SAE classifier (and optionally the kNN
/// baseline). Each fold standardizes and trains on its own training rows.
/// Folds run in parallel and are merged in fold order.
pub fn run_experiment(matrix: &FeatureMatrix, train_cfg: &TrainConfig, eval_cfg: &EvalConfig) -> Result<EvalReport> {
    eval_cfg.validate()?;
    train_cfg.validate()?;
    matrix.validate()?;
    let labels = matrix.require_labels()?;
    let folds = match eval_cfg.split {
        SplitMode::Beat => kfold_split(&labels, eval_cfg.k, eval_cfg.seed)?,
        SplitMode::Subject => subject_split(&matrix.record_ids, eval_cfg.k, eval_cfg.seed)?,
    };
    if let Some(f) = folds.iter().find(|f| f.test.is_empty() || f.train.is_empty()) {
        return Err(Error::TooFewSamples(format!("fold {} is empty", f.fold_id)));
    }
    let x = features_to_matrix(matrix);

    let outcomes: Vec<FoldOutcome> = folds
        .par_iter()
        .map(|fold| run_fold(&x, &labels, fold, train_cfg, eval_cfg))
        .collect::<Result<_>>()?;

    let mut pooled = ConfusionMatrix::default();
    let mut scores = DMatrix::zeros(matrix.len(), N);
    for (fold, outcome) in folds.iter().zip(&outcomes) {
        pooled.merge(&outcome.report.confusion);
        for (r, &row) in fold.test.iter().enumerate() {
            scores.set_row(row, &outcome.probabilities.row(r));
        }
    }
    let roc = roc_curve(&scores, &labels)?;

    let baseline = eval_cfg.knn_baseline.then(|| {
        let mut knn_pooled = ConfusionMatrix::default();
        let fold_accuracy: Vec<Option<f64>> = outcomes
            .iter()
            .map(|o| {
                let cm = o.knn.expect("baseline requested");
                knn_pooled.merge(&cm);
                cm.accuracy()
            })
            .collect();
        BaselineReport {
            name: "knn".into(),
            k_neighbours: eval_cfg.knn_k,
            average_accuracy: mean_defined(fold_accuracy.iter().copied()).0,
            fold_accuracy,
            pooled: knn_pooled,
        }
    });

    let per_fold: Vec<FoldReport> = outcomes.into_iter().map(|o| o.report).collect();
    Ok(EvalReport {
        k: eval_cfg.k,
        seed: eval_cfg.seed,
        split: eval_cfg.split,
        n_observations: matrix.len(),
        averages: average_folds(&per_fold),
        per_fold,
        pooled,
        roc,
        baseline,
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}-fold evaluation, {} observations, {:?} split, seed {}", self.k, self.n_observations, self.split, self.seed);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<6}{:>10}", "fold", "ACC");
        for f in &self.per_fold {
            let _ = writeln!(out, "{:<6}{:>10}", f.fold_id + 1, fmt_metric(f.overall_accuracy));
        }
        let _ = writeln!(out, "{:<6}{:>10}", "mean", fmt_metric(self.averages.overall_accuracy));
        let _ = writeln!(out);
        let _ = write!(out, "{:<6}", "class");
        for name in METRIC_NAMES {
            let _ = write!(out, "{name:>10}");
        }
        let _ = writeln!(out);
        let mut footnote = false;
        for c in &self.averages.per_class {
            let _ = write!(out, "{:<6}", c.class.as_str());
            for (v, missing) in c.metrics.as_array().iter().zip(c.undefined_folds) {
                let mark = if missing > 0 {
                    footnote = true;
                    "*"
                } else {
                    ""
                };
                let _ = write!(out, "{:>10}", format!("{}{mark}", fmt_metric(*v)));
            }
            let _ = writeln!(out);
        }
        if footnote {
            let _ = writeln!(out, "* averaged over the folds where the metric is defined");
        }
        let _ = writeln!(out);
        let _ = write!(out, "AUC");
        for r in &self.roc {
            let _ = write!(out, "  {}={:.4}", r.class, r.curve.auc);
        }
        let _ = writeln!(out);
        if let Some(b) = &self.baseline {
            let _ = writeln!(out, "baseline {} (k={}): mean ACC {}", b.name, b.k_neighbours, fmt_metric(b.average_accuracy));
        }
        out
    }

    /// One row per ROC point: `class,fpr,tpr,threshold`.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,fpr,tpr,threshold\n");
        for r in &self.roc {
            for p in &r.curve.points {
                let t = p.threshold.map_or_else(|| "inf".to_string(), |t| t.to_string());
                let _ = writeln!(out, "{},{},{},{t}", r.class, p.fpr, p.tpr);
            }
        }
        out
    }
}
