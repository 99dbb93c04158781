//! Aligning hidden units of one network to a reference network.
//!
//! With a single hidden layer, the permutation minimizing
//! `‖flat(reference) − flat(P·candidate)‖₂` is exactly the linear assignment
//! maximizing the summed unit inner products, so weight matching needs one
//! assignment solve and no coordinate descent.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::SampleSet;
use crate::model::{forward, WeightSet};
use crate::numerics::{gemm, squared_distance, Matrix};
use crate::permutation::{apply_to_weights, Permutation};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    Weight,
    #[default]
    Activation,
}

impl FromStr for MatchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(MatchMethod::Weight),
            "activation" => Ok(MatchMethod::Activation),
            other => Err(Error::arg(format!("unknown match method {other:?} (weight | activation)"))),
        }
    }
}

impl std::fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MatchMethod::Weight => "weight",
            MatchMethod::Activation => "activation",
        })
    }
}

/// Number of probe inputs used for activation matching by default.
pub const DEFAULT_PROBE_SIZE: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub permutation: Permutation,
    pub not: usize,
    pub l2_before: f64,
    pub l2_after: f64,
    pub objective: f64,
}

/// Square assignment maximizing `Σᵢ c[i, map[i]]`.
///
/// Shortest-augmenting-path Hungarian algorithm with row/column potentials,
/// `O(n³)`. Rows are inserted in index order and columns scanned in index
/// order, which fixes how ties resolve.
pub fn solve_lap_max(c: &Matrix) -> Result<Permutation> {
    let n = c.rows();
    if c.cols() != n {
        return Err(Error::arg(format!("cost matrix must be square, got {:?}", c.shape())));
    }
    if !c.is_finite() {
        return Err(Error::arg("cost matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(Permutation::identity(0));
    }
    // Minimize −c. Index 0 is a sentinel column; rows/columns are 1-based.
    let cost = |i: usize, j: usize| -c.get(i - 1, j - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|u| *u = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut map = vec![0; n];
    for j in 1..=n {
        map[row_of[j] - 1] = j - 1;
    }
    Permutation::new(map)
}

/// `Σᵢ c[i, map[i]]`
pub fn assignment_value(c: &Matrix, p: &Permutation) -> f64 {
    (0..p.len()).map(|i| c.get(i, p.get(i))).sum()
}

fn check_arch(a: &WeightSet, b: &WeightSet) -> Result<()> {
    if a.arch() != b.arch() {
        return Err(Error::arg(format!(
            "architecture mismatch: {:?} vs {:?}",
            a.arch(),
            b.arch()
        )));
    }
    Ok(())
}

/// `cost[i][j] = ⟨uᵢ(reference), uⱼ(candidate)⟩` with `uᵢ = (w1 row i, b1[i], w2 column i)`.
pub fn weight_cost(reference: &WeightSet, candidate: &WeightSet) -> Result<Matrix> {
    check_arch(reference, candidate)?;
    let h = reference.hidden_size();
    let mut cost = Matrix::zeros(h, h);
    gemm(1.0, &reference.w1, false, &candidate.w1, true, 0.0, &mut cost);
    gemm(1.0, &reference.w2, true, &candidate.w2, false, 1.0, &mut cost);
    for i in 0..h {
        for j in 0..h {
            let v = cost.get(i, j) + reference.b1[i] * candidate.b1[j];
            cost.set(i, j, v);
        }
    }
    Ok(cost)
}

fn report(reference: &WeightSet, candidate: &WeightSet, permutation: Permutation, objective: f64) -> Result<AlignmentReport> {
    let aligned = apply_to_weights(&permutation, candidate)?;
    let r = reference.to_flat();
    Ok(AlignmentReport {
        not: permutation.not_count(),
        l2_before: squared_distance(&r, &candidate.to_flat()).sqrt(),
        l2_after: squared_distance(&r, &aligned.to_flat()).sqrt(),
        objective,
        permutation,
    })
}

pub fn weight_match(reference: &WeightSet, candidate: &WeightSet) -> Result<AlignmentReport> {
    let cost = weight_cost(reference, candidate)?;
    let p = solve_lap_max(&cost)?;
    let objective = assignment_value(&cost, &p);
    report(reference, candidate, p, objective)
}

/// Hidden activations on `probe`, centered and scaled to unit norm per unit
/// (column). Units with zero variance are left as zero columns.
fn normalized_activations(w: &WeightSet, probe: &Matrix) -> Result<Matrix> {
    let (mut z, _) = forward(w, probe)?;
    let n = z.rows() as f64;
    let mean: Vec<f64> = z.column_sums().into_iter().map(|s| s / n).collect();
    z.add_row_vector(&mean.iter().map(|m| -m).collect::<Vec<_>>());
    let mut norms = vec![0.0; z.cols()];
    for i in 0..z.rows() {
        for (s, x) in norms.iter_mut().zip(z.row(i)) {
            *s += x * x;
        }
    }
    let scale: Vec<f64> = norms
        .iter()
        .map(|s| {
            let s = s.sqrt();
            if s > 1e-12 {
                1.0 / s
            } else {
                0.0
            }
        })
        .collect();
    for i in 0..z.rows() {
        for (x, k) in z.row_mut(i).iter_mut().zip(&scale) {
            *x *= k;
        }
    }
    Ok(z)
}

/// Weight of the weight-matching term that breaks activation ties.
pub const ACTIVATION_TIE_BREAK: f64 = 1e-9;

/// `cost[i][j]` = correlation of reference unit `i` with candidate unit `j` on
/// `probe`, plus [`ACTIVATION_TIE_BREAK`] times the weight cost scaled to
/// `[-1, 1]`. Units that never fire on the probe have all-zero correlations;
/// the weight term pairs them up instead of leaving the choice arbitrary.
pub fn activation_cost(reference: &WeightSet, candidate: &WeightSet, probe: &Dataset) -> Result<Matrix> {
    check_arch(reference, candidate)?;
    if probe.is_empty() {
        return Err(Error::arg("activation matching needs a non-empty probe set"));
    }
    let zr = normalized_activations(reference, &probe.images)?;
    let zc = normalized_activations(candidate, &probe.images)?;
    let h = reference.hidden_size();
    let mut cost = Matrix::zeros(h, h);
    gemm(1.0, &zr, true, &zc, false, 0.0, &mut cost);
    let tie = weight_cost(reference, candidate)?;
    let max = tie.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        let k = ACTIVATION_TIE_BREAK / max;
        for (c, t) in cost.data_mut().iter_mut().zip(tie.data()) {
            *c += k * t;
        }
    }
    Ok(cost)
}

pub fn activation_match(reference: &WeightSet, candidate: &WeightSet, probe: &Dataset) -> Result<AlignmentReport> {
    let cost = activation_cost(reference, candidate, probe)?;
    let p = solve_lap_max(&cost)?;
    let objective = assignment_value(&cost, &p);
    report(reference, candidate, p, objective)
}

/// Dispatches on `method`; `probe` is required for activation matching.
pub fn match_weights(
    reference: &WeightSet,
    candidate: &WeightSet,
    method: MatchMethod,
    probe: Option<&Dataset>,
) -> Result<AlignmentReport> {
    match method {
        MatchMethod::Weight => weight_match(reference, candidate),
        MatchMethod::Activation => {
            let probe = probe.ok_or_else(|| Error::arg("activation matching needs a probe dataset"))?;
            activation_match(reference, candidate, probe)
        }
    }
}

/// Aligns every sample to sample 0 and reports each alignment.
pub fn align_sample_set_with_reports(
    samples: &SampleSet,
    method: MatchMethod,
    probe: Option<&Dataset>,
) -> Result<(SampleSet, Vec<AlignmentReport>)> {
    if samples.len() < 2 {
        return Err(Error::arg(format!(
            "alignment needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let reference = &samples.samples[0];
    let mut aligned = Vec::with_capacity(samples.len());
    let mut reports = Vec::with_capacity(samples.len() - 1);
    aligned.push(reference.clone());
    for cand in &samples.samples[1..] {
        let rep = match_weights(reference, cand, method, probe)?;
        aligned.push(apply_to_weights(&rep.permutation, cand)?);
        reports.push(rep);
    }
    let mut out = samples.clone();
    out.samples = aligned;
    Ok((out, reports))
}

/// Sample 0 is the reference and is returned unchanged; every other sample is
/// replaced by its aligned copy, order preserved.
pub fn align_sample_set(samples: &SampleSet, method: MatchMethod, probe: Option<&Dataset>) -> Result<SampleSet> {
    Ok(align_sample_set_with_reports(samples, method, probe)?.0)
}
