//! Predictive comparisons, interpolation geometry and the tables and
//! histograms built from them.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{train_map_from, SampleSet, TrainConfig};
use crate::model::{mean_loss, predict_proba, accuracy, Arch, ModelConfig, WeightSet};
use crate::numerics::{argmax, derive_seed, squared_distance, Matrix, Rng};
use crate::permutation::{apply_to_weights, random_with_not};
use crate::posterior::{draw, prune, prune_mask, DiagGaussian, PruneOptions};
use crate::rebasin::{match_weights, MatchMethod};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Number of λ values used for barrier estimates.
pub const BARRIER_GRID: usize = 25;

/// Draws used to turn a diagonal Gaussian into a predictive.
pub const DEFAULT_PREDICTIVE_DRAWS: usize = 100;

/// Class probabilities per test input.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveTable {
    pub probs: Matrix,
    pub source: String,
    pub n_mc: usize,
}

impl PredictiveTable {
    pub fn new(probs: Matrix, source: impl Into<String>, n_mc: usize) -> Result<Self> {
        for i in 0..probs.rows() {
            let row = probs.row(i);
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::arg(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self {
            probs,
            source: source.into(),
            n_mc,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.probs.row(i))).collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.len() {
            return Err(Error::arg("label count differs from table size"));
        }
        if labels.is_empty() {
            return Ok(0.0);
        }
        let hits = self.predictions().iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Bayesian model average: mean of the per-sample softmax tables, summed in
/// sample order.
pub fn predictive_from_samples(s: &SampleSet, d: &Dataset) -> Result<PredictiveTable> {
    if s.is_empty() {
        return Err(Error::arg("empty sample set"));
    }
    let mut acc = Matrix::zeros(d.len(), d.num_classes);
    for w in &s.samples {
        let p = predict_proba(w, &d.images)?;
        if p.shape() != acc.shape() {
            return Err(Error::shape("network output does not match the dataset's classes"));
        }
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
    }
    let k = s.len() as f64;
    acc.data_mut().iter_mut().for_each(|a| *a /= k);
    PredictiveTable::new(acc, s.method.clone(), s.len())
}

fn same_size(p: &PredictiveTable, q: &PredictiveTable) -> Result<()> {
    if p.probs.shape() != q.probs.shape() {
        return Err(Error::arg(format!(
            "predictive tables differ in size: {:?} vs {:?}",
            p.probs.shape(),
            q.probs.shape()
        )));
    }
    Ok(())
}

/// Fraction of inputs on which both tables predict the same class.
pub fn agreement(p: &PredictiveTable, q: &PredictiveTable) -> Result<f64> {
    same_size(p, q)?;
    if p.is_empty() {
        return Ok(1.0);
    }
    let same = (0..p.len())
        .filter(|&i| argmax(p.probs.row(i)) == argmax(q.probs.row(i)))
        .count();
    Ok(same as f64 / p.len() as f64)
}

/// Mean over inputs of `½ Σ_y |p − q|`.
pub fn total_variation(p: &PredictiveTable, q: &PredictiveTable) -> Result<f64> {
    same_size(p, q)?;
    if p.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = (0..p.len())
        .map(|i| 0.5 * p.probs.row(i).iter().zip(q.probs.row(i)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum();
    Ok(total / p.len() as f64)
}

/// `n` evenly spaced values from 0 to 1 inclusive.
pub fn lambda_grid(n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn interpolate_one(w0: &[f64], w1: &[f64], lambda: f64) -> Vec<f64> {
    if lambda == 1.0 {
        return w1.to_vec();
    }
    w0.iter().zip(w1).map(|(a, b)| a + lambda * (b - a)).collect()
}

/// `(1 − λ) W₀ + λ W₁` for each λ, evaluated as `W₀ + λ (W₁ − W₀)` so that
/// both endpoints are reproduced exactly.
pub fn interpolate(w0: &WeightSet, w1: &WeightSet, lambdas: &[f64]) -> Result<Vec<WeightSet>> {
    let arch = check_pair(w0, w1)?;
    check_lambdas(lambdas)?;
    let (f0, f1) = (w0.to_flat(), w1.to_flat());
    lambdas
        .iter()
        .map(|&l| WeightSet::from_flat(arch, &interpolate_one(&f0, &f1, l)))
        .collect()
}

fn check_pair(w0: &WeightSet, w1: &WeightSet) -> Result<Arch> {
    if w0.arch() != w1.arch() {
        return Err(Error::arg(format!(
            "endpoints differ in architecture: {:?} vs {:?}",
            w0.arch(),
            w1.arch()
        )));
    }
    Ok(w0.arch())
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::arg("interpolation weights must lie in [0, 1]"));
    }
    Ok(())
}

/// `max_λ L(W_λ) − ½ (L(W₀) + L(W₁))` over a `grid`-point λ grid, with `L`
/// the mean cross-entropy on `d`.
pub fn barrier(w0: &WeightSet, w1: &WeightSet, d: &Dataset, grid: usize) -> Result<f64> {
    if grid < 3 {
        return Err(Error::arg("barrier grid needs at least 3 points"));
    }
    let losses = interpolate(w0, w1, &lambda_grid(grid))?
        .iter()
        .map(|w| mean_loss(w, d))
        .collect::<Result<Vec<_>>>()?;
    let ends = 0.5 * (losses[0] + losses[grid - 1]);
    Ok(losses.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l)) - ends)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCurve {
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub nots: Vec<usize>,
}

impl InterpolationCurve {
    pub fn barrier(&self) -> f64 {
        let n = self.losses.len();
        if n == 0 {
            return 0.0;
        }
        let ends = 0.5 * (self.losses[0] + self.losses[n - 1]);
        self.losses.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l)) - ends
    }

    /// Total decrease of NoT along the path (0 for a non-decreasing curve).
    pub fn not_inversions(&self) -> usize {
        self.nots.windows(2).map(|w| w[0].saturating_sub(w[1])).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,loss,accuracy,not\n");
        for i in 0..self.lambdas.len() {
            let _ = writeln!(s, "{},{},{},{}", self.lambdas[i], self.losses[i], self.accuracies[i], self.nots[i]);
        }
        s
    }
}

/// Loss, accuracy and NoT of the rebasin permutation matching `W_λ` to `w0`
/// at each λ.
pub fn not_along_path(
    w0: &WeightSet,
    w1: &WeightSet,
    lambdas: &[f64],
    method: MatchMethod,
    probe: Option<&Dataset>,
    eval: &Dataset,
) -> Result<InterpolationCurve> {
    if lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::arg("interpolation weights must be strictly increasing"));
    }
    let path = interpolate(w0, w1, lambdas)?;
    let mut curve = InterpolationCurve {
        lambdas: lambdas.to_vec(),
        losses: Vec::with_capacity(path.len()),
        accuracies: Vec::with_capacity(path.len()),
        nots: Vec::with_capacity(path.len()),
    };
    for w in &path {
        curve.losses.push(mean_loss(w, eval)?);
        curve.accuracies.push(accuracy(w, eval)?);
        curve.nots.push(match_weights(w0, w, method, probe)?.not);
    }
    Ok(curve)
}

/// One row of the NoT stability experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotRow {
    /// Minibatch seed of the permuted network.
    pub seed: u64,
    pub not_init: usize,
    pub not_trained: usize,
    pub l2_before: f64,
    pub l2_after_match: f64,
    pub barrier: f64,
}

#[derive(Clone, Debug)]
pub struct NotExperiment<'a> {
    pub train_data: &'a Dataset,
    /// Data for the barrier loss.
    pub barrier_data: &'a Dataset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub method: MatchMethod,
    pub probe: Option<&'a Dataset>,
}

/// Trains a base network from `W_init` and, for each `k`, a network from
/// `P_k · W_init` with `NoT(P_k) = k` and its own minibatch order, then
/// matches the latter to the base network.
pub fn not_stability_experiment(exp: &NotExperiment<'_>, base_seed: u64, not_values: &[usize]) -> Result<Vec<NotRow>> {
    exp.model.validate()?;
    let h = exp.model.hidden_size;
    if let Some(&bad) = not_values.iter().find(|&&k| k >= h) {
        return Err(Error::arg(format!("NoT {bad} impossible with {h} hidden units")));
    }
    let root = Rng::new(base_seed);
    let arch = Arch::for_data(exp.train_data, h);
    let w_init = WeightSet::init(arch, &mut root.split(0));
    let (base, _) = train_map_from(w_init.clone(), exp.train_data, &exp.model, &exp.train, derive_seed(base_seed, 1))?;
    let base_flat = base.to_flat();
    let mut rows = Vec::with_capacity(not_values.len());
    for (i, &k) in not_values.iter().enumerate() {
        let tag = 2 + i as u64;
        let p = random_with_not(h, k, &mut root.split(tag))?;
        let seed = derive_seed(base_seed, tag);
        let (trained, _) = train_map_from(apply_to_weights(&p, &w_init)?, exp.train_data, &exp.model, &exp.train, seed)?;
        let rep = match_weights(&base, &trained, exp.method, exp.probe)?;
        let aligned = apply_to_weights(&rep.permutation, &trained)?;
        rows.push(NotRow {
            seed,
            not_init: p.not_count(),
            not_trained: rep.not,
            l2_before: rep.l2_before,
            l2_after_match: squared_distance(&base_flat, &aligned.to_flat()).sqrt(),
            barrier: barrier(&base, &trained, exp.barrier_data, BARRIER_GRID)?,
        });
    }
    Ok(rows)
}

pub fn not_experiment_csv(rows: &[NotRow]) -> String {
    let mut s = String::from("seed,not_init,not_trained,l2_after_match,barrier\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.seed, r.not_init, r.not_trained, r.l2_after_match, r.barrier);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Histogram of `σ = sqrt(sigma2)` over `[0, max σ]` in equal-width bins.
pub fn sigma_histogram(g: &DiagGaussian, bins: usize) -> Result<Histogram> {
    let hi = g.sigma2.iter().fold(0.0_f64, |m, &v| m.max(v)).sqrt();
    sigma_histogram_range(g, bins, hi)
}

/// Same as [`sigma_histogram`] over a caller-chosen `[0, hi]`; values above
/// `hi` land in the last bin.
pub fn sigma_histogram_range(g: &DiagGaussian, bins: usize, hi: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::arg("need at least one bin"));
    }
    if !(hi >= 0.0 && hi.is_finite()) {
        return Err(Error::arg("histogram upper edge must be finite and >= 0"));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| hi * i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for &v in &g.sigma2 {
        let s = v.sqrt();
        let b = if hi > 0.0 { ((s / hi) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Fraction of coordinates with `σ` strictly inside `(lo, hi)`.
pub fn sigma_fraction_in(g: &DiagGaussian, lo: f64, hi: f64) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let n = g.sigma2.iter().map(|v| v.sqrt()).filter(|&s| s > lo && s < hi).count();
    n as f64 / g.len() as f64
}

pub fn sigma_hist_csv(entries: &[(&str, &str, &Histogram)]) -> String {
    let mut s = String::from("method,representation,bin_lo,bin_hi,count\n");
    for (method, repr, h) in entries {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(s, "{method},{repr},{},{},{c}", h.edges[i], h.edges[i + 1]);
        }
    }
    s
}

/// One line of the predictive-agreement table. Missing cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub method: String,
    pub representation: String,
    pub agreement: Option<f64>,
    pub tv: Option<f64>,
    /// Mean of the individual samples' accuracies.
    pub acc_samples: Option<f64>,
    /// Accuracy of the mean network.
    pub acc_mean: Option<f64>,
    /// Accuracy of the averaged predictive.
    pub acc_predictive: Option<f64>,
}

/// Artifacts of one inference method for the table.
pub struct MethodArtifacts<'a> {
    pub method: &'a str,
    pub samples: Option<&'a SampleSet>,
    pub fits: Vec<&'a DiagGaussian>,
}

fn mean_sample_accuracy(s: &SampleSet, d: &Dataset) -> Result<f64> {
    let total = s.samples.iter().map(|w| accuracy(w, d)).sum::<Result<f64>>()?;
    Ok(total / s.len() as f64)
}

/// Agreement and TV against `baseline`'s raw-sample predictive, per method
/// and representation. Each fit is evaluated through `draws` samples.
pub fn table1_rows(
    baseline: &SampleSet,
    methods: &[MethodArtifacts<'_>],
    d_test: &Dataset,
    draws: usize,
    seed: u64,
) -> Result<Vec<Table1Row>> {
    let reference = predictive_from_samples(baseline, d_test)?;
    let mut rows = Vec::new();
    let mut push = |method: &str, representation: &str, s: &SampleSet, mean: Option<&WeightSet>| -> Result<()> {
        let p = predictive_from_samples(s, d_test)?;
        rows.push(Table1Row {
            method: method.to_string(),
            representation: representation.to_string(),
            agreement: Some(agreement(&p, &reference)?),
            tv: Some(total_variation(&p, &reference)?),
            acc_samples: Some(mean_sample_accuracy(s, d_test)?),
            acc_mean: mean.map(|w| accuracy(w, d_test)).transpose()?,
            acc_predictive: Some(p.accuracy(&d_test.labels)?),
        });
        Ok(())
    };
    let mut fit_index = 0u64;
    for m in methods {
        if let Some(s) = m.samples {
            push(m.method, "samples", s, None)?;
        }
        for g in &m.fits {
            let s = draw(g, draws, derive_seed(seed, fit_index))?;
            fit_index += 1;
            push(m.method, g.tag.as_str(), &s, Some(&g.mean_weights()))?;
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn table1_csv(rows: &[Table1Row]) -> String {
    let mut s = String::from("method,representation,agreement,tv,acc_samples,acc_mean\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.representation,
            opt(r.agreement),
            opt(r.tv),
            opt(r.acc_samples),
            opt(r.acc_mean)
        );
    }
    s
}

/// How a pruned posterior is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneEval {
    /// The deterministic pruned mean network.
    Mean,
    /// Averaged predictive of `draws` samples with pruned coordinates at 0.
    Draws { draws: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub variant: String,
    pub retain_fraction: f64,
    pub accuracy: f64,
}

/// Accuracy of `g` pruned to each retain fraction.
pub fn prune_sweep(
    variant: &str,
    g: &DiagGaussian,
    fractions: &[f64],
    d: &Dataset,
    opts: PruneOptions,
    eval: PruneEval,
) -> Result<Vec<PruneRow>> {
    fractions
        .iter()
        .map(|&f| {
            let acc = match eval {
                PruneEval::Mean => accuracy(&prune(g, f, opts)?, d)?,
                PruneEval::Draws { draws, seed } => {
                    let mask = prune_mask(g, f, opts)?;
                    let mut s = draw(g, draws, seed)?;
                    for w in &mut s.samples {
                        let flat: Vec<f64> =
                            w.to_flat().iter().zip(&mask).map(|(&x, &k)| if k { x } else { 0.0 }).collect();
                        w.copy_from_flat(&flat);
                    }
                    predictive_from_samples(&s, d)?.accuracy(&d.labels)?
                }
            };
            Ok(PruneRow {
                variant: variant.to_string(),
                retain_fraction: f,
                accuracy: acc,
            })
        })
        .collect()
}

pub fn prune_csv(rows: &[PruneRow]) -> String {
    let mut s = String::from("variant,retain_fraction,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.variant, r.retain_fraction, r.accuracy);
    }
    s
}
