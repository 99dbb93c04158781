//! Posterior approximation engines: MAP / deep ensembles, mean-field Gaussian
//! variational inference, and Hamiltonian Monte Carlo.

use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{energy_and_grad, adam_step, AdamState, Arch, EnergyScale, ModelConfig, WeightSet};
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Ordered collection of weight samples from one inference method.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<WeightSet>,
    /// `hmc`, `ensemble`, `vi-draws`, …
    pub method: String,
    pub meta: Value,
}

impl SampleSet {
    pub fn new(samples: Vec<WeightSet>, method: impl Into<String>) -> Self {
        Self {
            samples,
            method: method.into(),
            meta: Value::Null,
        }
    }

    pub fn with_meta(mut self, meta: Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn arch(&self) -> Option<Arch> {
        self.samples.first().map(WeightSet::arch)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(arch) = self.arch() else {
            return Err(Error::arg("sample set is empty"));
        };
        if self.samples.iter().any(|s| s.arch() != arch) {
            return Err(Error::arg("samples do not share one architecture"));
        }
        Ok(())
    }

    pub fn flats(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(WeightSet::to_flat).collect()
    }
}

// Stream tags for Rng::split.
const TAG_INIT: u64 = 1;
const TAG_BATCHES: u64 = 2;
const TAG_MEMBER: u64 = 0x100;
const TAG_NOISE: u64 = 3;
const TAG_MOMENTUM: u64 = 4;
const TAG_CHAIN: u64 = 0x200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, batch_size: usize) -> Self {
        Self { epochs, lr, batch_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("learning rate must be > 0"));
        }
        Ok(())
    }
}

/// MAP training from a random Kaiming initialization.
pub fn train_map(d: &Dataset, cfg: &ModelConfig, train: &TrainConfig, seed: u64) -> Result<WeightSet> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let init = WeightSet::init(Arch::for_data(d, cfg.hidden_size), &mut root.split(TAG_INIT));
    Ok(train_map_from(init, d, cfg, train, root.split(TAG_BATCHES).seed())?.0)
}

/// MAP training from given weights; `batch_seed` fixes the minibatch order.
/// Returns the weights and the mean per-example energy of each epoch.
pub fn train_map_from(
    init: WeightSet,
    d: &Dataset,
    cfg: &ModelConfig,
    train: &TrainConfig,
    batch_seed: u64,
) -> Result<(WeightSet, Vec<f64>)> {
    train.validate()?;
    if d.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let mut rng = Rng::new(batch_seed);
    let mut w = init;
    let mut params = w.to_flat();
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut epoch_loss = 0.0;
        for idx in batch_indices(d.len(), train.batch_size, &mut rng) {
            let x = d.images.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| d.labels[i]).collect();
            let scale = EnergyScale::per_example(d.len(), idx.len(), cfg.prior_std);
            let (loss, grad) = energy_and_grad(&w, &x, &y, scale)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite loss".into(),
                });
            }
            epoch_loss += loss * idx.len() as f64;
            adam_step(&mut adam, &mut params, &grad.to_flat(), train.lr)?;
            w.copy_from_flat(&params);
        }
        history.push(epoch_loss / d.len() as f64);
    }
    if !w.is_finite() {
        return Err(Error::Training {
            epoch: train.epochs - 1,
            message: "non-finite weights".into(),
        });
    }
    Ok((w, history))
}

/// Seed of ensemble member `k` under root `seed`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    Rng::new(seed).split(TAG_MEMBER + k as u64).seed()
}

/// Independently initialized and trained MAP networks.
pub fn train_ensemble(d: &Dataset, cfg: &ModelConfig, members: usize, train: &TrainConfig, seed: u64) -> Result<SampleSet> {
    if members < 2 {
        return Err(Error::arg(format!("an ensemble needs >= 2 members, got {members}")));
    }
    let seeds: Vec<u64> = (0..members).map(|k| member_seed(seed, k)).collect();
    let mut set = train_ensemble_with_seeds(d, cfg, train, &seeds)?;
    set.meta["seed"] = json!(seed);
    Ok(set)
}

pub fn train_ensemble_with_seeds(d: &Dataset, cfg: &ModelConfig, train: &TrainConfig, seeds: &[u64]) -> Result<SampleSet> {
    let samples = seeds
        .iter()
        .map(|&s| train_map(d, cfg, train, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet::new(samples, "ensemble").with_meta(json!({
        "member_seeds": seeds,
        "model": cfg,
        "train": train,
    })))
}

// ---------------------------------------------------------------------------
// Variational inference

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `KL(N(mu, σ²) ‖ N(0, s²))` summed over coordinates.
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64], prior_std: f64) -> f64 {
    let s2 = prior_std * prior_std;
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| (prior_std / s).ln() + (s * s + m * m) / (2.0 * s2) - 0.5)
        .sum()
}

/// Mean-field Gaussian posterior with `σ = softplus(rho)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViPosterior {
    pub arch: Arch,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
}

impl ViPosterior {
    pub fn new(arch: Arch, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if mu.len() != arch.flat_len() || rho.len() != mu.len() {
            return Err(Error::shape("mu/rho lengths do not match the architecture"));
        }
        Ok(Self { arch, mu, rho })
    }

    pub fn init(arch: Arch, sigma: f64, rng: &mut Rng) -> Self {
        let mu = WeightSet::init(arch, rng).to_flat();
        let rho = vec![inverse_softplus(sigma); mu.len()];
        Self { arch, mu, rho }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn mean_weights(&self) -> WeightSet {
        WeightSet::from_flat(self.arch, &self.mu).expect("length checked at construction")
    }

    pub fn kl(&self, prior_std: f64) -> f64 {
        kl_diag_gaussian(&self.mu, &self.sigma(), prior_std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub init_sigma: f64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 128,
            init_sigma: 1e-2,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        TrainConfig::new(self.epochs, self.lr, self.batch_size).validate()?;
        if !(self.init_sigma > 0.0) {
            return Err(Error::arg("init_sigma must be > 0"));
        }
        Ok(())
    }
}

/// Single-sample estimate of the negative ELBO on a batch with fixed noise
/// `eps`, and its reparameterized gradients `(value, ∂/∂mu, ∂/∂rho)`.
///
/// `value = (n_total / batch) · Σ_batch CE(mu + σ ⊙ eps) + KL(q ‖ prior)`
pub fn neg_elbo_and_grad(
    q: &ViPosterior,
    x: &Matrix,
    labels: &[usize],
    n_total: usize,
    prior_std: f64,
    eps: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let sigma = q.sigma();
    let w_flat: Vec<f64> = q.mu.iter().zip(&sigma).zip(eps).map(|((m, s), e)| m + s * e).collect();
    let w = WeightSet::from_flat(q.arch, &w_flat)?;
    let scale = EnergyScale {
        prior: 0.0,
        ..EnergyScale::stochastic(n_total, labels.len().max(1), prior_std)
    };
    let (nll, g) = energy_and_grad(&w, x, labels, scale)?;
    let g = g.to_flat();
    let kl = kl_diag_gaussian(&q.mu, &sigma, prior_std);
    let s2 = prior_std * prior_std;
    let grad_mu: Vec<f64> = g.iter().zip(&q.mu).map(|(gw, m)| gw + m / s2).collect();
    let grad_rho: Vec<f64> = (0..g.len())
        .map(|i| {
            let s = sigma[i];
            let dsigma = g[i] * eps[i] - 1.0 / s + s / s2;
            dsigma * sigmoid(q.rho[i])
        })
        .collect();
    Ok((nll + kl, grad_mu, grad_rho))
}

/// Maximizes the ELBO with one reparameterized sample per minibatch step,
/// analytic KL, and Adam. Returns the posterior and the per-epoch mean
/// negative ELBO divided by the data size.
pub fn train_vi_with_log(d: &Dataset, cfg: &ModelConfig, vi: &ViConfig, seed: u64) -> Result<(ViPosterior, Vec<f64>)> {
    cfg.validate()?;
    vi.validate()?;
    if d.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let root = Rng::new(seed);
    let mut q = ViPosterior::init(Arch::for_data(d, cfg.hidden_size), vi.init_sigma, &mut root.split(TAG_INIT));
    let mut batch_rng = root.split(TAG_BATCHES);
    let mut noise_rng = root.split(TAG_NOISE);
    let m = q.mu.len();
    let mut params: Vec<f64> = q.mu.iter().chain(&q.rho).copied().collect();
    let mut adam = AdamState::new(2 * m);
    let mut eps = vec![0.0; m];
    let n = d.len() as f64;
    let mut history = Vec::with_capacity(vi.epochs);
    for epoch in 0..vi.epochs {
        let mut total = 0.0;
        let mut steps = 0;
        for idx in batch_indices(d.len(), vi.batch_size, &mut batch_rng) {
            let x = d.images.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| d.labels[i]).collect();
            noise_rng.fill_normal(&mut eps);
            let (value, gm, gr) = neg_elbo_and_grad(&q, &x, &y, d.len(), cfg.prior_std, &eps)?;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: "non-finite ELBO".into(),
                });
            }
            total += value / n;
            steps += 1;
            let grad: Vec<f64> = gm.iter().chain(&gr).map(|g| g / n).collect();
            adam_step(&mut adam, &mut params, &grad, vi.lr)?;
            q.mu.copy_from_slice(&params[..m]);
            q.rho.copy_from_slice(&params[m..]);
        }
        history.push(total / steps as f64);
    }
    Ok((q, history))
}

pub fn train_vi(d: &Dataset, cfg: &ModelConfig, vi: &ViConfig, seed: u64) -> Result<ViPosterior> {
    Ok(train_vi_with_log(d, cfg, vi, seed)?.0)
}

/// `k` reparameterized draws `mu + σ ⊙ ε`.
pub fn vi_draws(q: &ViPosterior, k: usize, seed: u64) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::arg("need at least one draw"));
    }
    let sigma = q.sigma();
    let mut rng = Rng::new(seed);
    let samples = (0..k)
        .map(|_| {
            let flat: Vec<f64> = q.mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.normal()).collect();
            WeightSet::from_flat(q.arch, &flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet::new(samples, "vi-draws").with_meta(json!({ "seed": seed, "k": k })))
}

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo

/// Potential energy `U(q)` with gradient.
pub trait Potential {
    fn dim(&self) -> usize;

    /// Writes `∇U(q)` into `grad` and returns `U(q)`.
    fn value_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64;
}

/// Posterior energy of the MLP on a full dataset.
pub struct MlpPosterior<'a> {
    pub data: &'a Dataset,
    pub arch: Arch,
    pub prior_std: f64,
}

impl Potential for MlpPosterior<'_> {
    fn dim(&self) -> usize {
        self.arch.flat_len()
    }

    fn value_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let w = WeightSet::from_flat(self.arch, q).expect("position has the architecture's length");
        match energy_and_grad(&w, &self.data.images, &self.data.labels, EnergyScale::full(self.prior_std)) {
            Ok((u, g)) => {
                grad.copy_from_slice(&g.to_flat());
                u
            }
            Err(_) => f64::NAN,
        }
    }
}

/// `N(mean, cov)` in any dimension, through its precision matrix.
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub precision: Matrix,
}

impl GaussianTarget {
    /// 2-D target from its covariance.
    pub fn new_2d(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        if !(det > 0.0) || cov[0][1] != cov[1][0] {
            return Err(Error::arg("covariance must be symmetric positive definite"));
        }
        let precision = Matrix::from_rows(&[
            vec![cov[1][1] / det, -cov[0][1] / det],
            vec![-cov[1][0] / det, cov[0][0] / det],
        ])?;
        Ok(Self {
            mean: mean.to_vec(),
            precision,
        })
    }
}

impl Potential for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn value_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        let d: Vec<f64> = q.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut u = 0.0;
        for i in 0..d.len() {
            grad[i] = crate::numerics::dot(self.precision.row(i), &d);
            u += 0.5 * d[i] * grad[i];
        }
        u
    }
}

/// `n_steps` leapfrog steps of size `step` with unit mass, updating `q`, `p`
/// and `grad` (which must hold `∇U(q)` on entry) in place. Returns `U` at the
/// final position.
pub fn leapfrog<P: Potential + ?Sized>(
    potential: &P,
    q: &mut [f64],
    p: &mut [f64],
    grad: &mut [f64],
    step: f64,
    n_steps: usize,
) -> f64 {
    let mut u = f64::NAN;
    for _ in 0..n_steps {
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi -= 0.5 * step * gi;
        }
        for (qi, pi) in q.iter_mut().zip(p.iter()) {
            *qi += step * pi;
        }
        u = potential.value_and_grad(q, grad);
        for (pi, gi) in p.iter_mut().zip(grad.iter()) {
            *pi -= 0.5 * step * gi;
        }
    }
    u
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|x| x * x).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcConfig {
    pub burn_in_epochs: usize,
    pub thin: usize,
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub target_samples: usize,
    pub step_size_adapt: bool,
    pub target_accept: f64,
    /// Independent chains; `target_samples` is split across them.
    pub chains: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            burn_in_epochs: 600,
            thin: 10,
            leapfrog_steps: 500,
            step_size: 1e-3,
            target_samples: 1000,
            step_size_adapt: true,
            target_accept: 0.65,
            chains: 1,
        }
    }
}

impl HmcConfig {
    /// Budget that runs on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            burn_in_epochs: 100,
            thin: 5,
            leapfrog_steps: 50,
            target_samples: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.leapfrog_steps == 0 || self.target_samples == 0 || self.chains == 0 {
            return Err(Error::arg("HMC counts must be >= 1"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::arg("HMC step size must be > 0"));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::arg("target acceptance must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HmcStats {
    pub proposals: usize,
    pub accepted: usize,
    pub non_finite: usize,
    pub burn_in_accept_rate: f64,
    pub sampling_accept_rate: f64,
    pub final_step_size: f64,
    pub final_energy: f64,
}

/// Consecutive rejections tolerated before the chain is declared stuck.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 100;

/// Runs one chain and returns the recorded positions.
///
/// Each epoch draws a fresh standard-normal momentum, integrates
/// `leapfrog_steps` steps and applies a Metropolis correction with
/// `min(1, exp(H_before − H_after))`. During burn-in the log step size follows
/// a Robbins–Monro recursion toward `target_accept`; it is then frozen at the
/// average over the second half of burn-in. After burn-in a sample is recorded
/// every `thin` epochs until `n_samples` are collected.
pub fn run_chain<P: Potential + ?Sized>(
    potential: &P,
    init: &[f64],
    cfg: &HmcConfig,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<(Vec<Vec<f64>>, HmcStats)> {
    cfg.validate()?;
    let dim = potential.dim();
    if init.len() != dim {
        return Err(Error::shape(format!("initial position has length {}, expected {dim}", init.len())));
    }
    let mut q = init.to_vec();
    let mut grad = vec![0.0; dim];
    let mut u = potential.value_and_grad(&q, &mut grad);
    if !u.is_finite() {
        return Err(Error::Numerical("potential is not finite at the initial position".into()));
    }

    let mut log_step = cfg.step_size.ln();
    let mut log_step_sum = 0.0;
    let mut log_step_count = 0usize;
    let mut stats = HmcStats::default();
    let mut burn_accept = 0.0;
    let mut sample_accept = 0.0;
    let mut sample_epochs = 0usize;
    let mut consecutive_rejections = 0usize;

    let mut samples = Vec::with_capacity(n_samples);
    let mut p = vec![0.0; dim];
    let mut q_new = vec![0.0; dim];
    let mut grad_new = vec![0.0; dim];
    let mut epoch = 0usize;
    while samples.len() < n_samples {
        let burning = epoch < cfg.burn_in_epochs;
        let step = log_step.exp();

        rng.fill_normal(&mut p);
        let h_before = u + kinetic(&p);
        q_new.copy_from_slice(&q);
        grad_new.copy_from_slice(&grad);
        let u_new = leapfrog(potential, &mut q_new, &mut p, &mut grad_new, step, cfg.leapfrog_steps);
        let h_after = u_new + kinetic(&p);

        let accept_prob = if h_after.is_finite() {
            (h_before - h_after).exp().min(1.0)
        } else {
            stats.non_finite += 1;
            0.0
        };
        stats.proposals += 1;
        if rng.uniform() < accept_prob {
            std::mem::swap(&mut q, &mut q_new);
            std::mem::swap(&mut grad, &mut grad_new);
            u = u_new;
            stats.accepted += 1;
            consecutive_rejections = 0;
        } else {
            consecutive_rejections += 1;
            if consecutive_rejections > MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::Numerical(format!(
                    "HMC chain stuck: {consecutive_rejections} consecutive rejections at epoch {epoch} (step size {step:.3e})"
                )));
            }
        }

        if burning {
            burn_accept += accept_prob;
            if cfg.step_size_adapt {
                let gain = 1.0 / ((epoch + 1) as f64).powf(0.6);
                log_step += gain * (accept_prob - cfg.target_accept);
                if 2 * epoch >= cfg.burn_in_epochs {
                    log_step_sum += log_step;
                    log_step_count += 1;
                }
                if epoch + 1 == cfg.burn_in_epochs && log_step_count > 0 {
                    log_step = log_step_sum / log_step_count as f64;
                }
            }
        } else {
            sample_accept += accept_prob;
            sample_epochs += 1;
            let since = epoch - cfg.burn_in_epochs + 1;
            if since.is_multiple_of(cfg.thin) {
                samples.push(q.clone());
            }
        }
        epoch += 1;
    }
    stats.burn_in_accept_rate = if cfg.burn_in_epochs > 0 {
        burn_accept / cfg.burn_in_epochs as f64
    } else {
        f64::NAN
    };
    stats.sampling_accept_rate = sample_accept / sample_epochs.max(1) as f64;
    stats.final_step_size = log_step.exp();
    stats.final_energy = u;
    Ok((samples, stats))
}

/// One HMC chain on the full-data MLP posterior, started at `init`.
pub fn hmc_sample(d: &Dataset, cfg: &ModelConfig, h: &HmcConfig, init: &WeightSet, seed: u64) -> Result<SampleSet> {
    hmc_sample_chains(d, cfg, &HmcConfig { chains: 1, ..h.clone() }, std::slice::from_ref(init), seed)
}

/// Independent chains, one per initial state, with `h.target_samples` split
/// as evenly as possible between them. Samples are ordered chain by chain.
pub fn hmc_sample_chains(d: &Dataset, cfg: &ModelConfig, h: &HmcConfig, inits: &[WeightSet], seed: u64) -> Result<SampleSet> {
    cfg.validate()?;
    h.validate()?;
    if inits.is_empty() {
        return Err(Error::arg("need at least one initial state"));
    }
    let arch = inits[0].arch();
    if inits.iter().any(|w| w.arch() != arch) || arch != Arch::for_data(d, arch.hidden_size) {
        return Err(Error::arg("initial states do not match the data/architecture"));
    }
    let potential = MlpPosterior {
        data: d,
        arch,
        prior_std: cfg.prior_std,
    };
    let root = Rng::new(seed);
    let chains = inits.len();
    let mut samples = Vec::with_capacity(h.target_samples);
    let mut chain_stats = Vec::with_capacity(chains);
    for (c, init) in inits.iter().enumerate() {
        let n = h.target_samples / chains + usize::from(c < h.target_samples % chains);
        if n == 0 {
            continue;
        }
        let mut rng = root.split(TAG_CHAIN + c as u64).split(TAG_MOMENTUM);
        let (draws, stats) = run_chain(&potential, &init.to_flat(), h, n, &mut rng)?;
        for flat in draws {
            samples.push(WeightSet::from_flat(arch, &flat)?);
        }
        chain_stats.push(stats);
    }
    let accepted: usize = chain_stats.iter().map(|s| s.accepted).sum();
    let proposals: usize = chain_stats.iter().map(|s| s.proposals).sum();
    Ok(SampleSet::new(samples, "hmc").with_meta(json!({
        "seed": seed,
        "model": cfg,
        "hmc": h,
        "acceptance_rate": accepted as f64 / proposals.max(1) as f64,
        "chains": chain_stats,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    #[test]
    fn softplus_round_trip() {
        for y in [1e-4, 1e-2, 0.5, 1.0, 5.0, 30.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_at_prior() {
        assert_eq!(kl_diag_gaussian(&[0.0; 5], &[1.0; 5], 1.0), 0.0);
        assert!(kl_diag_gaussian(&[0.0; 5], &[2.0; 5], 2.0).abs() < 1e-15);
        assert!(kl_diag_gaussian(&[0.1], &[1.0], 1.0) > 0.0);
    }

    #[test]
    fn train_map_guards_and_determinism() {
        let d = synthetic_blobs(3, 10, 4, &mut Rng::new(0)).unwrap();
        let cfg = ModelConfig::with_hidden(5);
        assert!(matches!(
            train_map(&d, &cfg, &TrainConfig::new(0, 1e-2, 8), 1),
            Err(Error::Argument(_))
        ));
        let t = TrainConfig::new(3, 1e-2, 8);
        assert_eq!(train_map(&d, &cfg, &t, 1).unwrap(), train_map(&d, &cfg, &t, 1).unwrap());
        assert_ne!(train_map(&d, &cfg, &t, 1).unwrap(), train_map(&d, &cfg, &t, 2).unwrap());
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = synthetic_blobs(3, 10, 4, &mut Rng::new(0)).unwrap();
        let cfg = ModelConfig::with_hidden(5);
        let mut init = WeightSet::zeros(Arch::for_data(&d, 5));
        init.b2[0] = f64::INFINITY;
        let err = train_map_from(init, &d, &cfg, &TrainConfig::new(2, 1e-2, 8), 0).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }));
    }

    #[test]
    fn ensemble_seed_plumbing() {
        let d = synthetic_blobs(3, 10, 4, &mut Rng::new(0)).unwrap();
        let cfg = ModelConfig::with_hidden(4);
        let t = TrainConfig::new(2, 1e-2, 8);
        let same = train_ensemble_with_seeds(&d, &cfg, &t, &[7, 7]).unwrap();
        assert_eq!(same.samples[0], same.samples[1]);
        let ens = train_ensemble(&d, &cfg, 3, &t, 1).unwrap();
        assert_ne!(ens.samples[0], ens.samples[1]);
        assert!(train_ensemble(&d, &cfg, 1, &t, 1).is_err());
    }

    #[test]
    fn vi_draws_cases() {
        let arch = Arch::new(3, 2, 2);
        let mu: Vec<f64> = (0..arch.flat_len()).map(|i| i as f64 * 0.1).collect();
        let q = ViPosterior::new(arch, mu.clone(), vec![-800.0; arch.flat_len()]).unwrap();
        let draws = vi_draws(&q, 4, 1).unwrap();
        assert!(draws.samples.iter().all(|s| s.to_flat() == mu));
        assert_eq!(vi_draws(&q, 3, 5).unwrap(), vi_draws(&q, 3, 5).unwrap());
        assert!(vi_draws(&q, 0, 5).is_err());

        let sigma = 0.3;
        let q = ViPosterior::new(arch, mu, vec![inverse_softplus(sigma); arch.flat_len()]).unwrap();
        let draws = vi_draws(&q, 10_000, 2).unwrap();
        let (_, var) = crate::numerics::mean_var_per_coordinate(&draws.flats()).unwrap();
        for v in var {
            assert!((v.sqrt() / sigma - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn leapfrog_tiny_steps_leave_state_in_place() {
        let target = GaussianTarget::new_2d([1.0, -1.0], [[1.0, 0.3], [0.3, 2.0]]).unwrap();
        let mut q = vec![0.5, 0.2];
        let mut grad = vec![0.0; 2];
        let u0 = target.value_and_grad(&q, &mut grad);
        let mut p = vec![0.7, -1.1];
        let h0 = u0 + kinetic(&p);
        let u1 = leapfrog(&target, &mut q, &mut p, &mut grad, 1e-8, 3);
        let h1 = u1 + kinetic(&p);
        assert!((q[0] - 0.5).abs() < 1e-7 && (q[1] - 0.2).abs() < 1e-7);
        assert!((h0 - h1).abs() < 1e-12);
        assert!((h0 - h1).exp().min(1.0) > 1.0 - 1e-12);
    }

    #[test]
    fn stuck_chain_errors() {
        struct Nan;
        impl Potential for Nan {
            fn dim(&self) -> usize {
                1
            }
            fn value_and_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
                grad[0] = 1.0;
                if q[0] == 0.0 {
                    0.0
                } else {
                    f64::NAN
                }
            }
        }
        let cfg = HmcConfig {
            burn_in_epochs: 0,
            thin: 1,
            leapfrog_steps: 1,
            step_size: 0.1,
            target_samples: 10,
            step_size_adapt: false,
            ..HmcConfig::default()
        };
        let err = run_chain(&Nan, &[0.0], &cfg, 200, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let d = synthetic_blobs(3, 4, 6, &mut Rng::new(9)).unwrap();
        let arch = Arch::for_data(&d, 5);
        assert!(arch.flat_len() <= 300);
        let mut rng = Rng::new(4);
        let mut q = ViPosterior::init(arch, 0.3, &mut rng);
        q.mu.iter_mut().for_each(|m| *m += 0.1 * rng.normal());
        let mut eps = vec![0.0; arch.flat_len()];
        rng.fill_normal(&mut eps);
        let eval = |q: &ViPosterior| neg_elbo_and_grad(q, &d.images, &d.labels, 40, 1.5, &eps).unwrap();
        let (_, gm, gr) = eval(&q);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..arch.flat_len() {
            for (which, analytic) in [(0, gm[i]), (1, gr[i])] {
                let mut plus = q.clone();
                let mut minus = q.clone();
                let (a, b) = if which == 0 {
                    (&mut plus.mu[i], &mut minus.mu[i])
                } else {
                    (&mut plus.rho[i], &mut minus.rho[i])
                };
                *a += h;
                *b -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                worst = worst.max((fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3));
            }
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    fn gaussian_chain(seed: u64) -> (Vec<Vec<f64>>, HmcStats) {
        let target = GaussianTarget::new_2d([1.0, -2.0], [[1.0, 0.6], [0.6, 2.0]]).unwrap();
        let cfg = HmcConfig {
            burn_in_epochs: 500,
            thin: 2,
            leapfrog_steps: 10,
            step_size: 0.2,
            target_samples: 5000,
            ..HmcConfig::default()
        };
        run_chain(&target, &[0.0, 0.0], &cfg, 5000, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn hmc_recovers_2d_gaussian() {
        let (samples, stats) = gaussian_chain(21);
        assert_eq!(samples.len(), 5000);
        assert!(stats.sampling_accept_rate > 0.4);
        let n = samples.len() as f64;
        let mean: Vec<f64> = (0..2).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
        assert!((mean[0] - 1.0).abs() < 0.05 * 1.0, "{mean:?}");
        assert!((mean[1] + 2.0).abs() < 0.05 * 2.0, "{mean:?}");
        let cov = |a: usize, b: usize| {
            samples.iter().map(|s| (s[a] - mean[a]) * (s[b] - mean[b])).sum::<f64>() / (n - 1.0)
        };
        assert!((cov(0, 0) - 1.0).abs() < 0.1);
        assert!((cov(1, 1) - 2.0).abs() < 0.2);
        assert!((cov(0, 1) - 0.6).abs() < 0.06);
    }

    #[test]
    fn hmc_chain_is_seeded() {
        assert_eq!(gaussian_chain(3).0[..50], gaussian_chain(3).0[..50]);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let d = synthetic_blobs(3, 6, 5, &mut Rng::new(1)).unwrap();
        let arch = Arch::for_data(&d, 4);
        let pot = MlpPosterior {
            data: &d,
            arch,
            prior_std: 1.0,
        };
        let mut rng = Rng::new(2);
        let q0 = WeightSet::init(arch, &mut rng).to_flat();
        let mut p0 = vec![0.0; q0.len()];
        rng.fill_normal(&mut p0);
        let (mut q, mut p) = (q0.clone(), p0.clone());
        let mut grad = vec![0.0; q.len()];
        pot.value_and_grad(&q, &mut grad);
        leapfrog(&pot, &mut q, &mut p, &mut grad, 1e-2, 50);
        p.iter_mut().for_each(|x| *x = -*x);
        leapfrog(&pot, &mut q, &mut p, &mut grad, 1e-2, 50);
        let err = q.iter().zip(&q0).chain(p.iter().map(|x| -x).collect::<Vec<_>>().iter().zip(&p0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "reversibility error {err}");
    }

    #[test]
    fn hmc_config_validation() {
        assert!(HmcConfig { thin: 0, ..HmcConfig::desk() }.validate().is_err());
        assert!(HmcConfig { step_size: 0.0, ..HmcConfig::desk() }.validate().is_err());
        assert!(HmcConfig::default().validate().is_ok());
        let d = HmcConfig::default();
        assert_eq!((d.burn_in_epochs, d.thin, d.leapfrog_steps, d.target_samples), (600, 10, 500, 1000));
    }
}
