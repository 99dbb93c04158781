//! One-hidden-layer MLP: forward pass, posterior energy, exact backprop, Adam.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{gemm, log_sum_exp, softmax_rows_in_place, Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Hidden-layer nonlinearity. Only ReLU is implemented; the tag exists so
/// configs and checkpoints record it explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub prior_std: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 512,
            prior_std: 1.0,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn with_hidden(hidden_size: usize) -> Self {
        Self {
            hidden_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 {
            return Err(Error::arg("hidden_size must be >= 1"));
        }
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::arg("prior_std must be > 0"));
        }
        Ok(())
    }
}

/// Layer sizes of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden_size: usize,
    pub num_classes: usize,
}

impl Arch {
    pub fn new(input_dim: usize, hidden_size: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_size,
            num_classes,
        }
    }

    pub fn mnist(hidden_size: usize) -> Self {
        Self::new(784, hidden_size, 10)
    }

    pub fn for_data(d: &Dataset, hidden_size: usize) -> Self {
        Self::new(d.input_dim(), hidden_size, d.num_classes)
    }

    /// `H·D + H + C·H + C`
    pub fn flat_len(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_size, self.num_classes);
        h * d + h + c * h + c
    }

    /// Whether flat coordinate `i` is a bias.
    pub fn is_bias(&self, i: usize) -> bool {
        let (d, h, c) = (self.input_dim, self.hidden_size, self.num_classes);
        let b1 = h * d..h * d + h;
        let b2 = h * d + h + c * h..self.flat_len();
        b1.contains(&i) || b2.contains(&i)
    }
}

/// MLP parameters: `w1` is `H × D`, `w2` is `C × H`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl WeightSet {
    pub fn new(w1: Matrix, b1: Vec<f64>, w2: Matrix, b2: Vec<f64>) -> Result<Self> {
        let h = w1.rows();
        if b1.len() != h || w2.cols() != h || b2.len() != w2.rows() {
            return Err(Error::shape(format!(
                "inconsistent layers: w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.shape(),
                b1.len(),
                w2.shape(),
                b2.len()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn zeros(arch: Arch) -> Self {
        Self {
            w1: Matrix::zeros(arch.hidden_size, arch.input_dim),
            b1: vec![0.0; arch.hidden_size],
            w2: Matrix::zeros(arch.num_classes, arch.hidden_size),
            b2: vec![0.0; arch.num_classes],
        }
    }

    /// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(arch: Arch, rng: &mut Rng) -> Self {
        let mut w = Self::zeros(arch);
        let s1 = (2.0 / arch.input_dim as f64).sqrt();
        let s2 = (2.0 / arch.hidden_size as f64).sqrt();
        w.w1.data_mut().iter_mut().for_each(|x| *x = s1 * rng.normal());
        w.w2.data_mut().iter_mut().for_each(|x| *x = s2 * rng.normal());
        w
    }

    pub fn arch(&self) -> Arch {
        Arch::new(self.w1.cols(), self.w1.rows(), self.w2.rows())
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.rows()
    }

    pub fn flat_len(&self) -> usize {
        self.arch().flat_len()
    }

    /// Concatenation `w1 | b1 | w2 | b2`, matrices row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.extend_from_slice(self.w1.data());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.data());
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn from_flat(arch: Arch, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.flat_len() {
            return Err(Error::shape(format!(
                "flat vector of length {} for architecture needing {}",
                flat.len(),
                arch.flat_len()
            )));
        }
        let (d, h, c) = (arch.input_dim, arch.hidden_size, arch.num_classes);
        let (w1, rest) = flat.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        Ok(Self {
            w1: Matrix::new(h, d, w1.to_vec())?,
            b1: b1.to_vec(),
            w2: Matrix::new(c, h, w2.to_vec())?,
            b2: b2.to_vec(),
        })
    }

    /// Overwrites every parameter from `flat` without reallocating.
    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        let (d, h, c) = (self.w1.cols(), self.w1.rows(), self.w2.rows());
        assert_eq!(flat.len(), h * d + h + c * h + c);
        let (w1, rest) = flat.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        self.w1.data_mut().copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.data_mut().copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
    }

    pub fn squared_norm(&self) -> f64 {
        self.w1.data().iter().chain(&self.b1).chain(self.w2.data()).chain(&self.b2).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite() && self.w2.is_finite() && self.b1.iter().chain(&self.b2).all(|x| x.is_finite())
    }

    pub fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.w1.cols() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.w1.cols()
            )));
        }
        Ok(())
    }
}

/// Returns `(hidden, logits)`; `hidden` is post-activation, `N × H`.
pub fn forward(w: &WeightSet, x: &Matrix) -> Result<(Matrix, Matrix)> {
    w.check_input(x)?;
    let mut hidden = Matrix::zeros(x.rows(), w.hidden_size());
    gemm(1.0, x, false, &w.w1, true, 0.0, &mut hidden);
    hidden.add_row_vector(&w.b1);
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut logits = Matrix::zeros(x.rows(), w.w2.rows());
    gemm(1.0, &hidden, false, &w.w2, true, 0.0, &mut logits);
    logits.add_row_vector(&w.b2);
    Ok((hidden, logits))
}

pub fn logits(w: &WeightSet, x: &Matrix) -> Result<Matrix> {
    Ok(forward(w, x)?.1)
}

/// Softmax class probabilities.
pub fn predict_proba(w: &WeightSet, x: &Matrix) -> Result<Matrix> {
    let mut l = logits(w, x)?;
    softmax_rows_in_place(&mut l);
    Ok(l)
}

/// `Σ −log softmax(logits)[label]`, natural log.
pub fn cross_entropy_sum(logits: &Matrix, labels: &[usize]) -> f64 {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            log_sum_exp(row) - row[labels[i]]
        })
        .sum()
}

/// `‖w‖² / (2 σ²)`
pub fn log_prior_penalty(w: &WeightSet, prior_std: f64) -> f64 {
    w.squared_norm() / (2.0 * prior_std * prior_std)
}

const EVAL_CHUNK: usize = 2048;

/// Summed cross-entropy over `d`, evaluated in chunks.
pub fn data_nll(w: &WeightSet, d: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..d.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(d.len())).collect();
        let x = d.images.select_rows(&idx);
        let l = logits(w, &x)?;
        total += cross_entropy_sum(&l, &d.labels[start..start + idx.len()]);
    }
    Ok(total)
}

/// Summed cross-entropy plus the Gaussian prior penalty, constants dropped.
pub fn neg_log_posterior(w: &WeightSet, d: &Dataset, prior_std: f64) -> Result<f64> {
    Ok(data_nll(w, d)? + log_prior_penalty(w, prior_std))
}

/// Mean cross-entropy over `d`.
pub fn mean_loss(w: &WeightSet, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Ok(0.0);
    }
    Ok(data_nll(w, d)? / d.len() as f64)
}

/// Weights on the two energy terms:
/// `likelihood_scale · Σ_batch CE + prior_scale · ‖w‖²/(2σ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyScale {
    pub likelihood: f64,
    pub prior: f64,
    pub prior_std: f64,
}

impl EnergyScale {
    /// Exact full-data posterior energy.
    pub fn full(prior_std: f64) -> Self {
        Self {
            likelihood: 1.0,
            prior: 1.0,
            prior_std,
        }
    }

    /// Unbiased full-data estimate from a minibatch.
    pub fn stochastic(n: usize, batch: usize, prior_std: f64) -> Self {
        Self {
            likelihood: n as f64 / batch as f64,
            ..Self::full(prior_std)
        }
    }

    /// Full-data estimate divided by `n`: batch mean loss plus prior / n.
    pub fn per_example(n: usize, batch: usize, prior_std: f64) -> Self {
        Self {
            likelihood: 1.0 / batch as f64,
            prior: 1.0 / n as f64,
            prior_std,
        }
    }
}

/// Energy and its exact gradient on one batch, by backpropagation.
pub fn energy_and_grad(w: &WeightSet, x: &Matrix, labels: &[usize], scale: EnergyScale) -> Result<(f64, WeightSet)> {
    if x.rows() != labels.len() {
        return Err(Error::shape("batch rows and labels differ"));
    }
    let (hidden, mut delta) = forward(w, x)?;
    let nll = cross_entropy_sum(&delta, labels);

    // delta ← likelihood_scale · (softmax − onehot)
    softmax_rows_in_place(&mut delta);
    for (i, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(i);
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale.likelihood);
    }

    let mut grad = WeightSet::zeros(w.arch());
    gemm(1.0, &delta, true, &hidden, false, 0.0, &mut grad.w2);
    grad.b2 = delta.column_sums();

    let mut dh = Matrix::zeros(x.rows(), w.hidden_size());
    gemm(1.0, &delta, false, &w.w2, false, 0.0, &mut dh);
    for (g, &h) in dh.data_mut().iter_mut().zip(hidden.data()) {
        if h <= 0.0 {
            *g = 0.0;
        }
    }
    gemm(1.0, &dh, true, x, false, 0.0, &mut grad.w1);
    grad.b1 = dh.column_sums();

    let prior_coef = scale.prior / (scale.prior_std * scale.prior_std);
    let add_prior = |g: &mut [f64], p: &[f64]| {
        for (gi, pi) in g.iter_mut().zip(p) {
            *gi += prior_coef * pi;
        }
    };
    add_prior(grad.w1.data_mut(), w.w1.data());
    add_prior(&mut grad.b1, &w.b1);
    add_prior(grad.w2.data_mut(), w.w2.data());
    add_prior(&mut grad.b2, &w.b2);

    let energy = scale.likelihood * nll + scale.prior * log_prior_penalty(w, scale.prior_std);
    Ok((energy, grad))
}

/// Gradient of [`neg_log_posterior`] restricted to a batch, rescaled to a
/// full-data estimate when `n_total` exceeds the batch size.
pub fn grad_neg_log_posterior(
    w: &WeightSet,
    x: &Matrix,
    labels: &[usize],
    n_total: usize,
    prior_std: f64,
) -> Result<WeightSet> {
    let scale = EnergyScale::stochastic(n_total, labels.len().max(1), prior_std);
    Ok(energy_and_grad(w, x, labels, scale)?.1)
}

/// Fraction of rows whose argmax logit equals the label (ties → smallest index).
pub fn accuracy(w: &WeightSet, d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for start in (0..d.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(d.len())).collect();
        let l = logits(w, &d.images.select_rows(&idx))?;
        correct += idx
            .iter()
            .enumerate()
            .filter(|(r, &i)| crate::numerics::argmax(l.row(*r)) == d.labels[i])
            .count();
    }
    Ok(correct as f64 / d.len() as f64)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if state.m.len() != params.len() || grad.len() != params.len() {
        return Err(Error::shape(format!(
            "adam state {} / params {} / grad {}",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}
