//! JSON experiment configuration.

use crate::data::{load_mnist_dir, subset, synthetic_blobs, Dataset, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::inference::{HmcConfig, TrainConfig, ViConfig};
use crate::model::ModelConfig;
use crate::numerics::Rng;
use crate::rebasin::MatchMethod;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with the four MNIST IDX files.
    pub dir: Option<PathBuf>,
    /// Replaces MNIST with Gaussian blobs (train and test drawn separately).
    pub synthetic: Option<SyntheticData>,
    /// Random training subset size; `None` keeps every row.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    /// Inputs used for activation matching, taken from the training set.
    pub probe_size: usize,
    /// Seed of the subset draws, fixed so every command sees the same rows.
    pub subset_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            synthetic: None,
            train_subset: None,
            test_subset: None,
            probe_size: crate::rebasin::DEFAULT_PROBE_SIZE,
            subset_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { members: 5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossData {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub draws: usize,
    pub bins: usize,
    pub barrier_grid: usize,
    pub loss_data: LossData,
    pub exclude_biases: bool,
    /// Score pruned posteriors by averaging this many draws instead of the
    /// mean network.
    pub prune_draws: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            draws: crate::evaluation::DEFAULT_PREDICTIVE_DRAWS,
            bins: 50,
            barrier_grid: crate::evaluation::BARRIER_GRID,
            loss_data: LossData::Train,
            exclude_biases: false,
            prune_draws: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub vi: ViConfig,
    pub hmc: HmcConfig,
    pub match_method: MatchMethod,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            vi: ViConfig::default(),
            hmc: HmcConfig::default(),
            match_method: MatchMethod::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.model.validate())?;
        wrap(self.train.validate())?;
        wrap(self.vi.validate())?;
        wrap(self.hmc.validate())?;
        if self.ensemble.members < 2 {
            return Err(Error::Config("ensemble.members must be >= 2".into()));
        }
        if self.eval.draws == 0 || self.eval.bins == 0 || self.eval.prune_draws == Some(0) {
            return Err(Error::Config("eval counts must be >= 1".into()));
        }
        if self.eval.barrier_grid < 3 {
            return Err(Error::Config("eval.barrier_grid must be >= 3".into()));
        }
        if self.data.probe_size == 0 {
            return Err(Error::Config("data.probe_size must be >= 1".into()));
        }
        if let Some(s) = &self.data.synthetic {
            if s.classes < 2 || s.per_class == 0 || s.dim == 0 {
                return Err(Error::Config("synthetic data needs >= 2 classes and non-empty sizes".into()));
            }
        }
        Ok(())
    }

    /// The configured seed, or an argument error naming the command.
    pub fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::arg(format!("{command} is stochastic and needs --seed")))
    }
}

/// Train, test and probe sets built from a config.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub probe: Dataset,
}

/// Resolves the MNIST directory: the config value, then `BNN_DATA_DIR`.
pub fn resolve_data_dir(cfg: &DataConfig) -> Result<PathBuf> {
    cfg.dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::arg(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

/// Loads (or synthesizes) the data; subsets come from `cfg.subset_seed`.
pub fn load_data(cfg: &DataConfig) -> Result<Data> {
    let root = Rng::new(cfg.subset_seed);
    let (train, test) = match &cfg.synthetic {
        Some(s) => {
            // One draw of centroids; train and test rows split afterwards.
            let all = synthetic_blobs(s.classes, 2 * s.per_class, s.dim, &mut root.split(1))?;
            let (tr, te): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 2 == 0);
            (all.select(&tr), all.select(&te))
        }
        None => load_mnist_dir(resolve_data_dir(cfg)?)?,
    };
    let train = match cfg.train_subset {
        Some(n) if n < train.len() => subset(&train, n, &mut root.split(2))?,
        _ => train,
    };
    let test = match cfg.test_subset {
        Some(n) if n < test.len() => subset(&test, n, &mut root.split(3))?,
        _ => test,
    };
    let probe = train.head(cfg.probe_size.min(train.len()));
    Ok(Data { train, test, probe })
}
