//! Stacked sparse autoencoder with a softmax head.
//!
//! Each autoencoder has a logistic encoder and a linear decoder and is
//! trained on
//!
//! ```text
//! J = 1/(2R) Σ_r ‖x_r − x̂_r‖² + λ/2 (‖A‖² + ‖A′‖² + ‖b‖² + ‖b′‖²) + β Σ_j KL(ρ ‖ ρ̂_j)
//! ```
//!
//! where `ρ̂_j` is the batch-mean activation of hidden unit `j`. The first
//! encoder is trained on standardized features, the second on the first
//! one's codes. A softmax layer is then fitted on the second code and the
//! whole stack is fine-tuned with cross-entropy.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{write_file, LabelClass};

const RHO_HAT_CLAMP: f64 = 1e-8;
const MAX_HALVINGS: usize = 50;
const STEP_GROWTH: f64 = 1.25;
const N_CLASSES: usize = LabelClass::COUNT;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `KL(ρ ‖ ρ̂)` between Bernoulli distributions.
pub fn kl_bernoulli(rho: f64, rho_hat: f64) -> f64 {
    rho * (rho / rho_hat).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - rho_hat)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub beta: f64,
    /// Target mean activation of each hidden layer.
    pub sparsity: (f64, f64),
    pub hidden: (usize, usize),
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.001,
            beta: 4.0,
            sparsity: (0.5, 0.35),
            hidden: (12, 10),
            epochs_pretrain: 400,
            epochs_finetune: 400,
            learning_rate: 0.1,
            rng_seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lambda >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("lambda and beta must be non-negative".into()));
        }
        if !in_unit(self.sparsity.0) || !in_unit(self.sparsity.1) {
            return Err(Error::Config("sparsity targets must lie in (0, 1)".into()));
        }
        if self.hidden.0 == 0 || self.hidden.1 == 0 {
            return Err(Error::Config("hidden layers need at least one unit".into()));
        }
        if !(self.learning_rate > 0.0) || self.epochs_pretrain == 0 || self.epochs_finetune == 0 {
            return Err(Error::Config("learning rate and epoch counts must be positive".into()));
        }
        Ok(())
    }
}

/// One sparse autoencoder: `z = σ(Ax + b)`, `x̂ = A′z + b′`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAutoencoder {
    /// N × K
    pub encode_weights: DMatrix<f64>,
    /// K × N
    pub decode_weights: DMatrix<f64>,
    pub encode_bias: DVector<f64>,
    pub decode_bias: DVector<f64>,
    pub rho: f64,
    pub lambda: f64,
    pub beta: f64,
}

/// The three terms of the autoencoder cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostTerms {
    pub reconstruction: f64,
    pub weight_decay: f64,
    pub sparsity: f64,
}

impl CostTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.weight_decay + self.sparsity
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeGradients {
    pub encode_weights: DMatrix<f64>,
    pub decode_weights: DMatrix<f64>,
    pub encode_bias: DVector<f64>,
    pub decode_bias: DVector<f64>,
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // explicit row-major fill order so the draw sequence is layout independent
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.random_range(-bound..bound);
        }
    }
    m
}

/// Adds `bias` to every row.
fn add_row_bias(mut m: DMatrix<f64>, bias: &DVector<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        row += bias.transpose();
    }
    m
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

impl SparseAutoencoder {
    pub fn new_random(input: usize, hidden: usize, rho: f64, lambda: f64, beta: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (input + hidden) as f64).sqrt();
        let encode_weights = uniform_init(hidden, input, bound, rng);
        let decode_weights = uniform_init(input, hidden, bound, rng);
        SparseAutoencoder {
            encode_weights,
            decode_weights,
            encode_bias: DVector::zeros(hidden),
            decode_bias: DVector::zeros(input),
            rho,
            lambda,
            beta,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encode_weights.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encode_weights.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.encode_weights.iter().all(|v| v.is_finite())
            && self.decode_weights.iter().all(|v| v.is_finite())
            && self.encode_bias.iter().all(|v| v.is_finite())
            && self.decode_bias.iter().all(|v| v.is_finite())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let a = &self.encode_weights * DVector::from_column_slice(x) + &self.encode_bias;
        Ok(a.iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.hidden_dim() {
            return Err(Error::DimensionMismatch { expected: self.hidden_dim(), got: z.len() });
        }
        let x = &self.decode_weights * DVector::from_column_slice(z) + &self.decode_bias;
        Ok(x.iter().copied().collect())
    }

    /// Codes for a batch with one observation per row (R × K → R × N).
    pub fn encode_batch(&self, batch: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: batch.ncols() });
        }
        let pre = add_row_bias(batch * self.encode_weights.transpose(), &self.encode_bias);
        Ok(pre.map(sigmoid))
    }

    fn decode_batch(&self, codes: &DMatrix<f64>) -> DMatrix<f64> {
        add_row_bias(codes * self.decode_weights.transpose(), &self.decode_bias)
    }

    /// Cost terms and analytic gradients on a batch with one observation per row.
    ///
    /// Mean activations are clamped to `[1e-8, 1 − 1e-8]` before the KL term.
    pub fn cost_and_gradient(&self, batch: &DMatrix<f64>) -> Result<(CostTerms, AeGradients)> {
        let r = batch.nrows();
        if r == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let rf = r as f64;
        let hidden = self.encode_batch(batch)?;
        let recon = self.decode_batch(&hidden);
        let err = recon - batch;

        let reconstruction = err.norm_squared() / (2.0 * rf);
        let weight_decay = self.lambda / 2.0
            * (self.encode_weights.norm_squared()
                + self.decode_weights.norm_squared()
                + self.encode_bias.norm_squared()
                + self.decode_bias.norm_squared());
        let rho_hat: Vec<f64> = hidden
            .column_iter()
            .map(|c| (c.sum() / rf).clamp(RHO_HAT_CLAMP, 1.0 - RHO_HAT_CLAMP))
            .collect();
        let sparsity = self.beta * rho_hat.iter().map(|&q| kl_bernoulli(self.rho, q)).sum::<f64>();

        let d_out = err / rf;
        let g_decode_w = d_out.transpose() * &hidden + &self.decode_weights * self.lambda;
        let g_decode_b = column_sums(&d_out) + &self.decode_bias * self.lambda;

        let mut d_hidden = &d_out * &self.decode_weights;
        for (j, mut col) in d_hidden.column_iter_mut().enumerate() {
            let q = rho_hat[j];
            let kl_grad = self.beta / rf * (-self.rho / q + (1.0 - self.rho) / (1.0 - q));
            col.add_scalar_mut(kl_grad);
        }
        d_hidden.component_mul_assign(&hidden.map(|h| h * (1.0 - h)));
        let g_encode_w = d_hidden.transpose() * batch + &self.encode_weights * self.lambda;
        let g_encode_b = column_sums(&d_hidden) + &self.encode_bias * self.lambda;

        Ok((
            CostTerms { reconstruction, weight_decay, sparsity },
            AeGradients {
                encode_weights: g_encode_w,
                decode_weights: g_decode_w,
                encode_bias: g_encode_b,
                decode_bias: g_decode_b,
            },
        ))
    }

    fn to_params(&self) -> Vec<DMatrix<f64>> {
        vec![
            self.encode_weights.clone(),
            self.decode_weights.clone(),
            vec_to_mat(&self.encode_bias),
            vec_to_mat(&self.decode_bias),
        ]
    }

    fn with_params(&self, p: &[DMatrix<f64>]) -> Self {
        SparseAutoencoder {
            encode_weights: p[0].clone(),
            decode_weights: p[1].clone(),
            encode_bias: mat_to_vec(&p[2]),
            decode_bias: mat_to_vec(&p[3]),
            ..self.clone()
        }
    }
}

fn vec_to_mat(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn mat_to_vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Loss trace of one optimization run; entry 0 is the initial loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent with backtracking: a step that raises the
/// loss is halved and retried; an accepted step lets the next one grow.
fn minimize<F>(mut params: Vec<DMatrix<f64>>, epochs: usize, step0: f64, stage: &'static str, f: F) -> Result<(Vec<DMatrix<f64>>, LossTrace)>
where
    F: Fn(&[DMatrix<f64>]) -> Result<(f64, Vec<DMatrix<f64>>)>,
{
    let (mut loss, mut grad) = f(&params)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(stage));
    }
    let mut trace = LossTrace { losses: vec![loss] };
    let mut step = step0;
    for _ in 0..epochs {
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<DMatrix<f64>> = params
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - g * step)
                .collect();
            let (new_loss, new_grad) = f(&candidate)?;
            if new_loss.is_finite() && new_loss <= loss {
                params = candidate;
                loss = new_loss;
                grad = new_grad;
                accepted = true;
                step *= STEP_GROWTH;
                break;
            }
            step *= 0.5;
        }
        trace.losses.push(loss);
        if !accepted {
            break;
        }
    }
    Ok((params, trace))
}

/// Trains a single sparse autoencoder on `data` (one observation per row).
pub fn train_autoencoder(ae: SparseAutoencoder, data: &DMatrix<f64>, epochs: usize, step: f64) -> Result<(SparseAutoencoder, LossTrace)> {
    let (params, trace) = minimize(ae.to_params(), epochs, step, "autoencoder pretraining", |p| {
        let candidate = ae.with_params(p);
        let (cost, g) = candidate.cost_and_gradient(data)?;
        Ok((
            cost.total(),
            vec![
                g.encode_weights,
                g.decode_weights,
                vec_to_mat(&g.encode_bias),
                vec_to_mat(&g.decode_bias),
            ],
        ))
    })?;
    Ok((ae.with_params(&params), trace))
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub enc1: SparseAutoencoder,
    pub enc2: SparseAutoencoder,
    pub traces: (LossTrace, LossTrace),
}

/// Greedy layerwise pretraining on standardized features.
pub fn pretrain(features: &DMatrix<f64>, cfg: &TrainConfig) -> Result<Pretrained> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    pretrain_with_rng(features, cfg, &mut rng)
}

fn pretrain_with_rng(features: &DMatrix<f64>, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Pretrained> {
    let k = features.ncols();
    let ae1 = SparseAutoencoder::new_random(k, cfg.hidden.0, cfg.sparsity.0, cfg.lambda, cfg.beta, rng);
    let (enc1, t1) = train_autoencoder(ae1, features, cfg.epochs_pretrain, cfg.learning_rate)?;
    let codes = enc1.encode_batch(features)?;
    let ae2 = SparseAutoencoder::new_random(cfg.hidden.0, cfg.hidden.1, cfg.sparsity.1, cfg.lambda, cfg.beta, rng);
    let (enc2, t2) = train_autoencoder(ae2, &codes, cfg.epochs_pretrain, cfg.learning_rate)?;
    Ok(Pretrained { enc1, enc2, traces: (t1, t2) })
}

/// Per-column z-score statistics from the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns whose spread is negligible relative to their magnitude are
    /// treated as constant and get a unit scale, so rounding noise is not
    /// amplified into a feature.
    pub fn fit(data: &DMatrix<f64>) -> Result<Self> {
        let r = data.nrows();
        if r == 0 {
            return Err(Error::EmptyMatrix);
        }
        let mut mean = Vec::with_capacity(data.ncols());
        let mut std = Vec::with_capacity(data.ncols());
        for col in data.column_iter() {
            let m = col.sum() / r as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r as f64;
            let s = var.sqrt();
            mean.push(m);
            std.push(if s > 1e-9 * m.abs().max(1e-300) && s > 0.0 { s } else { 1.0 });
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), got: data.ncols() });
        }
        Ok(DMatrix::from_fn(data.nrows(), data.ncols(), |i, j| (data[(i, j)] - self.mean[j]) / self.std[j]))
    }

    pub fn apply_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch { expected: self.mean.len(), got: x.len() });
        }
        Ok(x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect())
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

fn one_hot_matrix(labels: &[LabelClass]) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), N_CLASSES, |i, j| if labels[i].index() == j { 1.0 } else { 0.0 })
}

/// Mean cross-entropy of row-wise logits against one-hot targets, computed
/// with log-sum-exp.
fn cross_entropy(logits: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (row, t) in logits.row_iter().zip(targets.row_iter()) {
        let max = row.max();
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row.iter().zip(t.iter()).map(|(z, y)| y * (lse - z)).sum::<f64>();
    }
    total / logits.nrows() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaeModel {
    pub enc1: SparseAutoencoder,
    pub enc2: SparseAutoencoder,
    /// 3 × N2
    pub softmax_weights: DMatrix<f64>,
    pub softmax_bias: DVector<f64>,
    pub norm: Standardizer,
    pub rng_seed: u64,
    pub config: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: LabelClass,
    pub probabilities: [f64; 3],
}

/// Lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Loss and gradients of the full stack (both encoders and the softmax
/// layer) under cross-entropy plus `λ/2` weight decay on the three weight
/// matrices.
pub struct StackObjective<'a> {
    pub inputs: &'a DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub lambda: f64,
}

impl StackObjective<'_> {
    /// Parameters are `[A1, b1, A2, b2, W, c]` with biases as column matrices.
    pub fn evaluate(&self, p: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
        let (a1, b1, a2, b2, w, c) = (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5]);
        let rf = self.inputs.nrows() as f64;
        let g = add_row_bias(self.inputs * a1.transpose(), &mat_to_vec(b1)).map(sigmoid);
        let h = add_row_bias(&g * a2.transpose(), &mat_to_vec(b2)).map(sigmoid);
        let logits = add_row_bias(&h * w.transpose(), &mat_to_vec(c));
        let loss = cross_entropy(&logits, &self.targets)
            + self.lambda / 2.0 * (a1.norm_squared() + a2.norm_squared() + w.norm_squared());

        let d_logits = (softmax_rows(&logits) - &self.targets) / rf;
        let g_w = d_logits.transpose() * &h + w * self.lambda;
        let g_c = vec_to_mat(&column_sums(&d_logits));
        let mut d_h = &d_logits * w;
        d_h.component_mul_assign(&h.map(|v| v * (1.0 - v)));
        let g_a2 = d_h.transpose() * &g + a2 * self.lambda;
        let g_b2 = vec_to_mat(&column_sums(&d_h));
        let mut d_g = &d_h * a2;
        d_g.component_mul_assign(&g.map(|v| v * (1.0 - v)));
        let g_a1 = d_g.transpose() * self.inputs + a1 * self.lambda;
        let g_b1 = vec_to_mat(&column_sums(&d_g));
        (loss, vec![g_a1, g_b1, g_a2, g_b2, g_w, g_c])
    }
}

/// Loss and gradients of the softmax layer alone on fixed codes.
fn softmax_objective(codes: &DMatrix<f64>, targets: &DMatrix<f64>, lambda: f64, p: &[DMatrix<f64>]) -> (f64, Vec<DMatrix<f64>>) {
    let (w, c) = (&p[0], &p[1]);
    let rf = codes.nrows() as f64;
    let logits = add_row_bias(codes * w.transpose(), &mat_to_vec(c));
    let loss = cross_entropy(&logits, targets) + lambda / 2.0 * w.norm_squared();
    let d = (softmax_rows(&logits) - targets) / rf;
    let g_w = d.transpose() * codes + w * lambda;
    let g_c = vec_to_mat(&column_sums(&d));
    (loss, vec![g_w, g_c])
}

fn check_labels(data: &DMatrix<f64>, labels: &[LabelClass]) -> Result<()> {
    if data.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: data.nrows(), got: labels.len() });
    }
    if data.nrows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(())
}

impl SaeModel {
    /// Stacks pretrained encoders under a softmax layer fitted on their codes.
    pub fn from_pretrained(
        pre: Pretrained,
        standardized: &DMatrix<f64>,
        labels: &[LabelClass],
        norm: Standardizer,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, LossTrace)> {
        check_labels(standardized, labels)?;
        let codes = pre.enc2.encode_batch(&pre.enc1.encode_batch(standardized)?)?;
        let n2 = pre.enc2.hidden_dim();
        let bound = (6.0 / (n2 + N_CLASSES) as f64).sqrt();
        let w0 = uniform_init(N_CLASSES, n2, bound, rng);
        let targets = one_hot_matrix(labels);
        let (p, trace) = minimize(vec![w0, DMatrix::zeros(N_CLASSES, 1)], cfg.epochs_pretrain, cfg.learning_rate, "softmax training", |p| {
            Ok(softmax_objective(&codes, &targets, cfg.lambda, p))
        })?;
        Ok((
            SaeModel {
                enc1: pre.enc1,
                enc2: pre.enc2,
                softmax_weights: p[0].clone(),
                softmax_bias: mat_to_vec(&p[1]),
                norm,
                rng_seed: cfg.rng_seed,
                config: cfg.clone(),
            },
            trace,
        ))
    }

    fn stack_params(&self) -> Vec<DMatrix<f64>> {
        vec![
            self.enc1.encode_weights.clone(),
            vec_to_mat(&self.enc1.encode_bias),
            self.enc2.encode_weights.clone(),
            vec_to_mat(&self.enc2.encode_bias),
            self.softmax_weights.clone(),
            vec_to_mat(&self.softmax_bias),
        ]
    }

    fn with_stack_params(&self, p: &[DMatrix<f64>]) -> Self {
        let mut m = self.clone();
        m.enc1.encode_weights = p[0].clone();
        m.enc1.encode_bias = mat_to_vec(&p[1]);
        m.enc2.encode_weights = p[2].clone();
        m.enc2.encode_bias = mat_to_vec(&p[3]);
        m.softmax_weights = p[4].clone();
        m.softmax_bias = mat_to_vec(&p[5]);
        m
    }

    /// Supervised fine-tuning of the whole stack on standardized features.
    /// The sparsity penalty is not used here.
    pub fn finetune(&self, standardized: &DMatrix<f64>, labels: &[LabelClass], cfg: &TrainConfig) -> Result<(SaeModel, LossTrace)> {
        check_labels(standardized, labels)?;
        let objective = StackObjective {
            inputs: standardized,
            targets: one_hot_matrix(labels),
            lambda: cfg.lambda,
        };
        let (p, trace) = minimize(self.stack_params(), cfg.epochs_finetune, cfg.learning_rate, "fine-tuning", |p| {
            Ok(objective.evaluate(p))
        })?;
        Ok((self.with_stack_params(&p), trace))
    }

    /// Raw feature rows in, class probabilities out (one row per observation).
    pub fn predict_proba_batch(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let x = self.norm.apply(raw)?;
        let h = self.enc2.encode_batch(&self.enc1.encode_batch(&x)?)?;
        Ok(softmax_rows(&add_row_bias(&h * self.softmax_weights.transpose(), &self.softmax_bias)))
    }

    pub fn classify(&self, x: &[f64]) -> Result<Prediction> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("feature {i} is not finite")));
        }
        let z = self.norm.apply_row(x)?;
        let h = self.enc2.encode(&self.enc1.encode(&z)?)?;
        let logits = &self.softmax_weights * DVector::from_vec(h) + &self.softmax_bias;
        let probs = softmax_rows(&DMatrix::from_row_slice(1, N_CLASSES, logits.as_slice()));
        let probabilities = [probs[(0, 0)], probs[(0, 1)], probs[(0, 2)]];
        Ok(Prediction {
            label: LabelClass::from_index(argmax(&probabilities)).expect("three classes"),
            probabilities,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.enc1.input_dim(), self.enc1.hidden_dim(), self.enc2.hidden_dim(), N_CLASSES]
    }
}

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub pretrain: (LossTrace, LossTrace),
    pub softmax: LossTrace,
    pub finetune: LossTrace,
}

/// Standardize, pretrain both encoders, fit the softmax layer, fine-tune.
pub fn train_model(raw: &DMatrix<f64>, labels: &[LabelClass], cfg: &TrainConfig) -> Result<(SaeModel, TrainingReport)> {
    cfg.validate()?;
    check_labels(raw, labels)?;
    let norm = Standardizer::fit(raw)?;
    let x = norm.apply(raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let pre = pretrain_with_rng(&x, cfg, &mut rng)?;
    let pre_traces = pre.traces.clone();
    let (stacked, softmax_trace) = SaeModel::from_pretrained(pre, &x, labels, norm, cfg, &mut rng)?;
    let (model, finetune_trace) = stacked.finetune(&x, labels, cfg)?;
    Ok((
        model,
        TrainingReport {
            pretrain: pre_traces,
            softmax: softmax_trace,
            finetune: finetune_trace,
        },
    ))
}

pub const MODEL_FORMAT: &str = "scg-breath-sae";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AutoencoderFile {
    input_dim: usize,
    hidden_dim: usize,
    rho: f64,
    lambda: f64,
    beta: f64,
    encode_weights: Vec<f64>,
    encode_bias: Vec<f64>,
    decode_weights: Vec<f64>,
    decode_bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dims: [usize; 4],
    enc1: AutoencoderFile,
    enc2: AutoencoderFile,
    softmax_weights: Vec<f64>,
    softmax_bias: Vec<f64>,
    norm_mean: Vec<f64>,
    norm_std: Vec<f64>,
    rng_seed: u64,
    config: TrainConfig,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], what: &str) -> std::result::Result<DMatrix<f64>, String> {
    if data.len() != rows * cols {
        return Err(format!("{what}: expected {} values, found {}", rows * cols, data.len()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl AutoencoderFile {
    fn from_ae(ae: &SparseAutoencoder) -> Self {
        AutoencoderFile {
            input_dim: ae.input_dim(),
            hidden_dim: ae.hidden_dim(),
            rho: ae.rho,
            lambda: ae.lambda,
            beta: ae.beta,
            encode_weights: row_major(&ae.encode_weights),
            encode_bias: ae.encode_bias.as_slice().to_vec(),
            decode_weights: row_major(&ae.decode_weights),
            decode_bias: ae.decode_bias.as_slice().to_vec(),
        }
    }

    fn into_ae(self, name: &str) -> std::result::Result<SparseAutoencoder, String> {
        let (k, n) = (self.input_dim, self.hidden_dim);
        if self.encode_bias.len() != n || self.decode_bias.len() != k {
            return Err(format!("{name}: bias lengths do not match dims"));
        }
        Ok(SparseAutoencoder {
            encode_weights: from_row_major(n, k, &self.encode_weights, name)?,
            decode_weights: from_row_major(k, n, &self.decode_weights, name)?,
            encode_bias: DVector::from_vec(self.encode_bias),
            decode_bias: DVector::from_vec(self.decode_bias),
            rho: self.rho,
            lambda: self.lambda,
            beta: self.beta,
        })
    }
}

impl SaeModel {
    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            dims: self.dims(),
            enc1: AutoencoderFile::from_ae(&self.enc1),
            enc2: AutoencoderFile::from_ae(&self.enc2),
            softmax_weights: row_major(&self.softmax_weights),
            softmax_bias: self.softmax_bias.as_slice().to_vec(),
            norm_mean: self.norm.mean.clone(),
            norm_std: self.norm.std.clone(),
            rng_seed: self.rng_seed,
            config: self.config.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::parse(path, e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(MODEL_FORMAT) {
            return Err(Error::parse(path, "not a scg-breath model file"));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MODEL_VERSION {
            return Err(Error::VersionMismatch { found: version, expected: MODEL_VERSION });
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?;
        let bad = |m: String| Error::parse(path, m);
        let [d0, d1, d2, d3] = file.dims;
        if d3 != N_CLASSES
            || file.enc1.input_dim != d0
            || file.enc1.hidden_dim != d1
            || file.enc2.input_dim != d1
            || file.enc2.hidden_dim != d2
            || file.norm_mean.len() != d0
            || file.norm_std.len() != d0
            || file.softmax_bias.len() != d3
        {
            return Err(bad("layer dimensions are inconsistent".into()));
        }
        if file.norm_std.iter().any(|s| !(*s > 0.0)) {
            return Err(bad("normalization std must be positive".into()));
        }
        let model = SaeModel {
            enc1: file.enc1.into_ae("enc1").map_err(bad)?,
            enc2: file.enc2.into_ae("enc2").map_err(bad)?,
            softmax_weights: from_row_major(d3, d2, &file.softmax_weights, "softmax").map_err(bad)?,
            softmax_bias: DVector::from_vec(file.softmax_bias),
            norm: Standardizer { mean: file.norm_mean, std: file.norm_std },
            rng_seed: file.rng_seed,
            config: file.config,
        };
        if !(model.enc1.is_finite() && model.enc2.is_finite()) {
            return Err(Error::parse(path, "non-finite weights"));
        }
        Ok(model)
    }
}

pub fn save_model(model: &SaeModel, path: &Path) -> Result<()> {
    write_file(path, &model.to_json())
}

pub fn load_model(path: &Path) -> Result<SaeModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SaeModel::from_json(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_encode_to_half() {
        let mut ae = SparseAutoencoder::new_random(4, 3, 0.5, 0.0, 0.0, &mut rng(1));
        ae.encode_weights.fill(0.0);
        assert_eq!(ae.encode(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.5; 3]);
        assert!(matches!(ae.encode(&[1.0]), Err(Error::DimensionMismatch { expected: 4, got: 1 })));
    }

    #[test]
    fn decode_at_origin_is_bias() {
        let mut ae = SparseAutoencoder::new_random(4, 3, 0.5, 0.0, 0.0, &mut rng(2));
        ae.decode_bias = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ae.decode(&[0.0; 3]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(ae.decode(&[0.0; 4]).is_err());
    }

    #[test]
    fn encode_decode_match_scalar_loops() {
        let mut r = rng(3);
        let ae = SparseAutoencoder::new_random(6, 4, 0.3, 0.0, 0.0, &mut r);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
        let z = ae.encode(&x).unwrap();
        for j in 0..4 {
            let mut a = ae.encode_bias[j];
            for k in 0..6 {
                a += ae.encode_weights[(j, k)] * x[k];
            }
            assert!((z[j] - 1.0 / (1.0 + (-a).exp())).abs() < 1e-15);
        }
        let xh = ae.decode(&z).unwrap();
        for k in 0..6 {
            let mut v = ae.decode_bias[k];
            for j in 0..4 {
                v += ae.decode_weights[(k, j)] * z[j];
            }
            assert!((xh[k] - v).abs() < 1e-14);
        }
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        // one hidden unit; with zero encode weights its activation is 0.5 == ρ
        let data = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let ae = SparseAutoencoder {
            encode_weights: DMatrix::zeros(1, 2),
            decode_weights: DMatrix::zeros(2, 1),
            encode_bias: DVector::zeros(1),
            decode_bias: DVector::from_vec(vec![1.0, 2.0]),
            rho: 0.5,
            lambda: 0.0,
            beta: 4.0,
        };
        let (c, _) = ae.cost_and_gradient(&data).unwrap();
        assert_eq!(c.total(), 0.0);
    }

    #[test]
    fn zero_data_zero_weights() {
        let ae = SparseAutoencoder {
            encode_weights: DMatrix::zeros(3, 4),
            decode_weights: DMatrix::zeros(4, 3),
            encode_bias: DVector::zeros(3),
            decode_bias: DVector::zeros(4),
            rho: 0.5,
            lambda: 0.5,
            beta: 0.0,
        };
        let (c, _) = ae.cost_and_gradient(&DMatrix::zeros(5, 4)).unwrap();
        assert_eq!(c.total(), 0.0);
    }

    #[test]
    fn kl_is_non_negative_and_zero_at_target() {
        for rho in [0.05, 0.35, 0.5, 0.9] {
            assert_eq!(kl_bernoulli(rho, rho), 0.0);
            for q in [1e-6, 0.1, 0.3, 0.6, 0.999] {
                assert!(kl_bernoulli(rho, q) >= 0.0);
            }
        }
    }

    #[test]
    fn cost_terms_match_independent_sums() {
        let mut r = rng(11);
        let ae = SparseAutoencoder::new_random(5, 3, 0.35, 0.01, 4.0, &mut r);
        let x = random_matrix(9, 5, &mut r);
        let (c, _) = ae.cost_and_gradient(&x).unwrap();

        let mut recon = 0.0;
        let mut act = [0.0; 3];
        for row in 0..9 {
            let xr: Vec<f64> = (0..5).map(|k| x[(row, k)]).collect();
            let z = ae.encode(&xr).unwrap();
            for j in 0..3 {
                act[j] += z[j] / 9.0;
            }
            let xh = ae.decode(&z).unwrap();
            recon += xr.iter().zip(&xh).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let recon = recon / 18.0;
        let decay: f64 = 0.005
            * ae.encode_weights
                .iter()
                .chain(ae.decode_weights.iter())
                .chain(ae.encode_bias.iter())
                .chain(ae.decode_bias.iter())
                .map(|v| v * v)
                .sum::<f64>();
        let sparse: f64 = 4.0 * act.iter().map(|&q| kl_bernoulli(0.35, q)).sum::<f64>();
        assert!((c.reconstruction - recon).abs() < 1e-12);
        assert!((c.weight_decay - decay).abs() < 1e-12);
        assert!((c.sparsity - sparse).abs() < 1e-12);
        assert!((c.total() - (recon + decay + sparse)).abs() < 1e-12);
    }

    #[test]
    fn autoencoder_gradient_matches_finite_differences() {
        let mut r = rng(4);
        let x = random_matrix(7, 5, &mut r);
        let ae = SparseAutoencoder::new_random(5, 3, 0.35, 0.001, 4.0, &mut r);
        let (_, g) = ae.cost_and_gradient(&x).unwrap();
        let analytic = [
            g.encode_weights,
            g.decode_weights,
            vec_to_mat(&g.encode_bias),
            vec_to_mat(&g.decode_bias),
        ];
        let params = ae.to_params();
        let cost = |p: &[DMatrix<f64>]| ae.with_params(p).cost_and_gradient(&x).unwrap().0.total();
        let h = 1e-6;
        for (b, g) in analytic.iter().enumerate() {
            for idx in 0..g.len() {
                let mut plus = params.clone();
                plus[b][idx] += h;
                let mut minus = params.clone();
                minus[b][idx] -= h;
                let fd = (cost(&plus) - cost(&minus)) / (2.0 * h);
                let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
                assert!(rel < 1e-5, "block {b} idx {idx}: fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn separable_classes_are_learned() {
        let mut r = rng(9);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..150 {
            let c = i % 3;
            for k in 0..15 {
                let centre = if k % 3 == c { 3.0 } else { 0.0 };
                rows.push(centre + r.random_range(-0.5..0.5));
            }
            labels.push(LabelClass::from_index(c).unwrap());
        }
        let x = DMatrix::from_row_slice(150, 15, &rows);
        let cfg = TrainConfig { epochs_pretrain: 100, epochs_finetune: 200, ..TrainConfig::default() };
        let (model, _) = train_model(&x, &labels, &cfg).unwrap();
        let probs = model.predict_proba_batch(&x).unwrap();
        let mut correct = 0;
        for (i, row) in probs.row_iter().enumerate() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            let p: Vec<f64> = row.iter().copied().collect();
            let single = model.classify(&rows[i * 15..(i + 1) * 15]).unwrap();
            assert_eq!(single.label.index(), argmax(&p));
            if argmax(&p) == labels[i].index() {
                correct += 1;
            }
        }
        assert!(correct as f64 / 150.0 >= 0.99, "{correct}/150");

        let text = model.to_json();
        let back = SaeModel::from_json(&text, Path::new("m.json")).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn finetune_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let x = random_matrix(8, 5, &mut r);
        let labels: Vec<LabelClass> = (0..8).map(|i| LabelClass::from_index(i % 3).unwrap()).collect();
        let obj = StackObjective { inputs: &x, targets: one_hot_matrix(&labels), lambda: 0.01 };
        let params = vec![
            random_matrix(4, 5, &mut r),
            random_matrix(4, 1, &mut r),
            random_matrix(3, 4, &mut r),
            random_matrix(3, 1, &mut r),
            random_matrix(3, 3, &mut r),
            random_matrix(3, 1, &mut r),
        ];
        let (_, grads) = obj.evaluate(&params);
        let h = 1e-6;
        for (b, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let mut plus = params.clone();
                plus[b][idx] += h;
                let mut minus = params.clone();
                minus[b][idx] -= h;
                let fd = (obj.evaluate(&plus).0 - obj.evaluate(&minus).0) / (2.0 * h);
                let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
                assert!(rel < 1e-5, "block {b} idx {idx}: fd {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic_and_monotone() {
        let mut r = rng(8);
        let x = random_matrix(40, 15, &mut r);
        let cfg = TrainConfig { epochs_pretrain: 60, ..TrainConfig::default() };
        let a = pretrain(&x, &cfg).unwrap();
        let b = pretrain(&x, &cfg).unwrap();
        assert_eq!(a.enc1, b.enc1);
        assert_eq!(a.enc2, b.enc2);
        assert_eq!((a.enc1.input_dim(), a.enc1.hidden_dim()), (15, 12));
        assert_eq!((a.enc2.input_dim(), a.enc2.hidden_dim()), (12, 10));
        for t in [&a.traces.0, &a.traces.1] {
            assert!(t.losses.windows(2).all(|w| w[1] <= w[0] + 1e-8));
            assert!(t.losses.last().unwrap() < t.losses.first().unwrap());
        }
    }

    #[test]
    fn reconstruction_improves_with_training() {
        let mut r = rng(21);
        // ten points on a 2-D plane inside a 4-D space
        let basis = random_matrix(2, 4, &mut r);
        let x = random_matrix(10, 2, &mut r) * basis;
        let ae = SparseAutoencoder::new_random(4, 3, 0.5, 0.0, 0.0, &mut r);
        let before = ae.cost_and_gradient(&x).unwrap().0.reconstruction;
        let (trained, _) = train_autoencoder(ae, &x, 300, 0.1).unwrap();
        let after = trained.cost_and_gradient(&x).unwrap().0.reconstruction;
        assert!(after < 0.1 * before, "{before} -> {after}");
    }

    #[test]
    fn standardizer_guards_constant_columns() {
        let data = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = Standardizer::fit(&data).unwrap();
        assert_eq!(s.std[1], 1.0);
        let z = s.apply(&data).unwrap();
        assert!(z.column(1).iter().all(|v| *v == 0.0));
        assert!(z.column(0).sum().abs() < 1e-12);
    }

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0, 1.0, 1.0]), 0);
    }

    #[test]
    fn truncated_or_foreign_model_files_fail() {
        let p = Path::new("m.json");
        assert!(matches!(SaeModel::from_json("{\"format\": \"scg-br", p), Err(Error::Parse { .. })));
        assert!(matches!(SaeModel::from_json("{}", p), Err(Error::Parse { .. })));
        assert!(matches!(
            SaeModel::from_json("{\"format\": \"scg-breath-sae\", \"version\": 7}", p),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }
}
