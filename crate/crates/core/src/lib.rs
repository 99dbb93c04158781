//! Bayesian MLP workbench: MAP ensembles, mean-field VI and HMC on a
//! one-hidden-layer network, permutation alignment (rebasin), and compact
//! diagonal-Gaussian posterior summaries.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod numerics;
pub mod data;
pub mod model;
pub mod permutation;
pub mod rebasin;
pub mod inference;
pub mod posterior;
pub mod evaluation;
pub mod checkpoint;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use numerics::{Matrix, Rng};
pub use data::Dataset;
pub use model::{Arch, ModelConfig, WeightSet};
pub use permutation::Permutation;
pub use rebasin::MatchMethod;
pub use inference::SampleSet;
pub use posterior::{DiagGaussian, Representation};
