//! Diagonal-Gaussian summaries of weight posteriors: direct and rebasin fits
//! of sample sets, VI posteriors in the same form, μ/σ² stitching across
//! methods, and σ-ranked pruning.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{SampleSet, ViPosterior};
use crate::model::{Arch, WeightSet};
use crate::numerics::{mean_var_per_coordinate, Rng};
use crate::permutation::apply_to_weights;
use crate::rebasin::{align_sample_set, match_weights, MatchMethod};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Direct,
    Rebasin,
    Vi,
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::Direct => "direct",
            Representation::Rebasin => "rebasin",
            Representation::Vi => "vi",
        }
    }
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Representation::Direct),
            "rebasin" => Ok(Representation::Rebasin),
            "vi" => Ok(Representation::Vi),
            other => Err(Error::arg(format!("unknown representation {other:?}"))),
        }
    }
}

/// `N(mu, diag(sigma2))` over the flat weight vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub arch: Arch,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub tag: Representation,
    pub source_method: String,
    /// Index of the sample every other sample was aligned to.
    pub reference_id: Option<usize>,
}

impl DiagGaussian {
    pub fn new(arch: Arch, mu: Vec<f64>, sigma2: Vec<f64>, tag: Representation, source_method: impl Into<String>) -> Result<Self> {
        if mu.len() != arch.flat_len() || sigma2.len() != mu.len() {
            return Err(Error::shape(format!(
                "mu {} / sigma2 {} for architecture of {} parameters",
                mu.len(),
                sigma2.len(),
                arch.flat_len()
            )));
        }
        if sigma2.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::arg("variances must be >= 0"));
        }
        Ok(Self {
            arch,
            mu,
            sigma2,
            tag,
            source_method: source_method.into(),
            reference_id: None,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn mean_weights(&self) -> WeightSet {
        WeightSet::from_flat(self.arch, &self.mu).expect("length checked at construction")
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|v| v.sqrt()).collect()
    }

    pub fn total_variance(&self) -> f64 {
        self.sigma2.iter().sum()
    }

    pub fn from_vi(q: &ViPosterior) -> Self {
        Self {
            arch: q.arch,
            mu: q.mu.clone(),
            sigma2: q.sigma().iter().map(|s| s * s).collect(),
            tag: Representation::Vi,
            source_method: "vi".into(),
            reference_id: None,
        }
    }
}

/// Per-coordinate sample mean and unbiased variance of the raw samples.
pub fn fit_direct(s: &SampleSet) -> Result<DiagGaussian> {
    s.validate()?;
    let arch = s.arch().expect("validated non-empty");
    let (mu, sigma2) = mean_var_per_coordinate(&s.flats())?;
    DiagGaussian::new(arch, mu, sigma2, Representation::Direct, s.method.clone())
}

/// Fit after aligning every sample to sample 0.
pub fn fit_rebasin(s: &SampleSet, method: MatchMethod, probe: Option<&Dataset>) -> Result<DiagGaussian> {
    s.validate()?;
    let aligned = align_sample_set(s, method, probe)?;
    let mut g = fit_direct(&aligned)?;
    g.tag = Representation::Rebasin;
    g.reference_id = Some(0);
    Ok(g)
}

/// `k` independent draws from `N(mu, diag(sigma2))`.
pub fn draw(g: &DiagGaussian, k: usize, seed: u64) -> Result<SampleSet> {
    if k == 0 {
        return Err(Error::arg("need at least one draw"));
    }
    let sigma = g.sigma();
    let mut rng = Rng::new(seed);
    let samples = (0..k)
        .map(|_| {
            let flat: Vec<f64> = g.mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.normal()).collect();
            WeightSet::from_flat(g.arch, &flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet::new(samples, format!("{}-{}-draws", g.source_method, g.tag.as_str())).with_meta(json!({
        "seed": seed,
        "k": k,
    })))
}

/// Stitches `mu_from.mu` with the variances of `sigma_from`, after moving
/// `sigma_from` into `mu_from`'s basin: the permutation matching
/// `sigma_from.mu` to `mu_from.mu` is applied to `sigma_from.sigma2`.
pub fn merge(mu_from: &DiagGaussian, sigma_from: &DiagGaussian, method: MatchMethod, probe: Option<&Dataset>) -> Result<DiagGaussian> {
    if mu_from.arch != sigma_from.arch {
        return Err(Error::arg(format!(
            "cannot merge {:?} with {:?}",
            mu_from.arch, sigma_from.arch
        )));
    }
    if mu_from.tag == Representation::Direct || sigma_from.tag == Representation::Direct {
        return Err(Error::arg("merge expects rebasin (or VI) summaries, not direct fits"));
    }
    let rep = match_weights(&mu_from.mean_weights(), &sigma_from.mean_weights(), method, probe)?;
    let var = WeightSet::from_flat(sigma_from.arch, &sigma_from.sigma2)?;
    let sigma2 = apply_to_weights(&rep.permutation, &var)?.to_flat();
    let mut out = DiagGaussian::new(
        mu_from.arch,
        mu_from.mu.clone(),
        sigma2,
        Representation::Rebasin,
        format!("{}+{}", mu_from.source_method, sigma_from.source_method),
    )?;
    out.reference_id = mu_from.reference_id;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct PruneOptions {
    /// Keep biases unpruned and rank weights only.
    pub exclude_biases: bool,
}

/// Coordinates kept by [`prune`], as a mask over the flat vector.
pub fn prune_mask(g: &DiagGaussian, retain_fraction: f64, opts: PruneOptions) -> Result<Vec<bool>> {
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(Error::arg(format!("retain fraction {retain_fraction} not in (0, 1]")));
    }
    let mut mask = vec![false; g.len()];
    let mut ranked: Vec<usize> = Vec::with_capacity(g.len());
    for (i, m) in mask.iter_mut().enumerate() {
        if opts.exclude_biases && g.arch.is_bias(i) {
            *m = true;
        } else {
            ranked.push(i);
        }
    }
    ranked.sort_by(|&a, &b| g.sigma2[a].total_cmp(&g.sigma2[b]).then(a.cmp(&b)));
    let keep = ((retain_fraction * ranked.len() as f64).round() as usize).min(ranked.len());
    for &i in &ranked[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Keeps the lowest-variance `retain_fraction` of coordinates at their mean
/// and zeroes the rest.
pub fn prune(g: &DiagGaussian, retain_fraction: f64, opts: PruneOptions) -> Result<WeightSet> {
    let mask = prune_mask(g, retain_fraction, opts)?;
    let flat: Vec<f64> = g.mu.iter().zip(&mask).map(|(&m, &k)| if k { m } else { 0.0 }).collect();
    WeightSet::from_flat(g.arch, &flat)
}
