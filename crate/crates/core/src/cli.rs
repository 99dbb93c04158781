//! Command-line front end. Every subcommand reads and writes checkpoints in
//! the output directory so pipelines can be resumed stage by stage.

use crate::checkpoint::{
    gaussian_to_checkpoint, load_gaussian, read_checkpoint, samples_from_checkpoint, samples_to_checkpoint,
    vi_to_checkpoint, weights_from_checkpoint, weights_to_checkpoint, write_atomic, write_checkpoint,
};
use crate::data::Dataset;
use crate::config::{load_data, Data, ExperimentConfig, LossData, SyntheticData};
use crate::error::{Error, Result};
use crate::evaluation::{
    lambda_grid, not_along_path, not_experiment_csv, not_stability_experiment, prune_csv, prune_sweep, sigma_hist_csv,
    sigma_histogram, sigma_histogram_range, table1_csv, table1_rows, Histogram, MethodArtifacts, NotExperiment,
    PruneEval,
};
use crate::inference::{hmc_sample_chains, member_seed, train_ensemble, train_map, train_vi, SampleSet};
use crate::model::{accuracy, WeightSet};
use crate::numerics::derive_seed;
use crate::permutation::apply_to_weights;
use crate::posterior::{fit_direct, fit_rebasin, merge, DiagGaussian, PruneOptions};
use crate::rebasin::{align_sample_set_with_reports, match_weights, MatchMethod};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "bnn", version, about = "Bayesian MLP workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// MNIST IDX directory (falls back to BNN_DATA_DIR).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    #[arg(long, global = true)]
    pub prior_std: Option<f64>,
    #[arg(long, global = true)]
    pub train_subset: Option<usize>,
    #[arg(long, global = true)]
    pub test_subset: Option<usize>,
    #[arg(long, global = true)]
    pub probe_size: Option<usize>,
    /// Gaussian blobs instead of MNIST: CLASSES,PER_CLASS,DIM.
    #[arg(long, global = true, value_delimiter = ',')]
    pub synthetic: Option<Vec<usize>>,
    /// Rebasin matching: weight or activation.
    #[arg(long, global = true)]
    pub method: Option<MatchMethod>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train independently seeded MAP networks.
    TrainEnsemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit a mean-field Gaussian posterior.
    TrainVi {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample the full-data posterior with HMC.
    SampleHmc {
        #[command(flatten)]
        common: Common,
        /// Starting points: a weights or samples checkpoint (one per chain).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        leapfrog: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Align every sample of a set to its first sample.
    Rebasin {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train networks from permuted copies of one initialization.
    NotExperiment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        nots: Vec<usize>,
    },
    /// Loss, accuracy and NoT along the linear path between two networks.
    Interp {
        #[command(flatten)]
        common: Common,
        /// First endpoint; both endpoints are trained from the seed when absent.
        #[arg(long, requires = "w1")]
        w0: Option<PathBuf>,
        #[arg(long, requires = "w0")]
        w1: Option<PathBuf>,
        #[arg(long)]
        points: Option<usize>,
        /// Also write the curve after aligning `w1` to `w0`.
        #[arg(long)]
        align: bool,
    },
    /// Direct and rebasin diagonal-Gaussian fits of a sample set.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Output file stem, defaults to the input's.
        #[arg(long)]
        name: Option<String>,
    },
    /// Agreement / TV against the HMC predictive.
    EvalTable1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hmc: PathBuf,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        vi: Option<PathBuf>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Histograms of posterior standard deviations.
    SigmaHist {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        bins: Option<usize>,
        /// Shared upper edge instead of each input's largest σ.
        #[arg(long)]
        max_sigma: Option<f64>,
    },
    /// Accuracy after keeping the lowest-σ fraction of weights.
    PruneSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        sigma: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        fractions: Vec<f64>,
        #[arg(long)]
        exclude_biases: bool,
        /// Average this many draws instead of scoring the mean network.
        #[arg(long)]
        prune_draws: Option<usize>,
    },
    /// Stitch the means of one posterior with the variances of another.
    Merge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mu: PathBuf,
        #[arg(long)]
        sigma: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::TrainEnsemble { common, .. }
            | Command::TrainVi { common, .. }
            | Command::SampleHmc { common, .. }
            | Command::Rebasin { common, .. }
            | Command::NotExperiment { common, .. }
            | Command::Interp { common, .. }
            | Command::Summarize { common, .. }
            | Command::EvalTable1 { common, .. }
            | Command::SigmaHist { common, .. }
            | Command::PruneSweep { common, .. }
            | Command::Merge { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::TrainEnsemble { .. } => "train-ensemble",
            Command::TrainVi { .. } => "train-vi",
            Command::SampleHmc { .. } => "sample-hmc",
            Command::Rebasin { .. } => "rebasin",
            Command::NotExperiment { .. } => "not-experiment",
            Command::Interp { .. } => "interp",
            Command::Summarize { .. } => "summarize",
            Command::EvalTable1 { .. } => "eval-table1",
            Command::SigmaHist { .. } => "sigma-hist",
            Command::PruneSweep { .. } => "prune-sweep",
            Command::Merge { .. } => "merge",
        }
    }
}

/// Config file (if any) with the shared flag overrides applied.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(d) = &common.data_dir {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(h) = common.hidden {
        cfg.model.hidden_size = h;
    }
    if let Some(s) = common.prior_std {
        cfg.model.prior_std = s;
    }
    if common.train_subset.is_some() {
        cfg.data.train_subset = common.train_subset;
    }
    if common.test_subset.is_some() {
        cfg.data.test_subset = common.test_subset;
    }
    if let Some(p) = common.probe_size {
        cfg.data.probe_size = p;
    }
    if let Some(v) = &common.synthetic {
        if v.len() != 3 {
            return Err(Error::arg("--synthetic takes CLASSES,PER_CLASS,DIM"));
        }
        cfg.data.synthetic = Some(SyntheticData {
            classes: v[0],
            per_class: v[1],
            dim: v[2],
        });
    }
    if let Some(m) = common.method {
        cfg.match_method = m;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
        cfg.vi.epochs = e;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
        cfg.vi.lr = lr;
    }
    if let Some(b) = common.batch_size {
        cfg.train.batch_size = b;
        cfg.vi.batch_size = b;
    }
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out_path(cfg: &ExperimentConfig, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out_dir.join(default))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn save(path: &Path, c: &crate::checkpoint::Checkpoint) -> Result<()> {
    write_checkpoint(path, c)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Weights from a weights checkpoint, or every sample of a samples checkpoint.
fn load_weight_list(path: &Path) -> Result<Vec<WeightSet>> {
    let c = read_checkpoint(path)?;
    match c.kind().as_deref() {
        Some("samples") => Ok(samples_from_checkpoint(&c)?.samples),
        _ => Ok(vec![weights_from_checkpoint(&c)?]),
    }
}

fn probe_for(cfg: &ExperimentConfig, data: &Data) -> Option<Dataset> {
    match cfg.match_method {
        MatchMethod::Activation => Some(data.probe.clone()),
        MatchMethod::Weight => None,
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "samples".into())
}

fn execute(cmd: &Command) -> Result<()> {
    let mut cfg = resolve_config(cmd.common())?;
    match cmd {
        Command::TrainEnsemble { members: Some(m), .. } => cfg.ensemble.members = *m,
        Command::SampleHmc {
            chains,
            samples,
            burn_in,
            leapfrog,
            step_size,
            thin,
            ..
        } => {
            let h = &mut cfg.hmc;
            h.chains = chains.unwrap_or(h.chains);
            h.target_samples = samples.unwrap_or(h.target_samples);
            h.burn_in_epochs = burn_in.unwrap_or(h.burn_in_epochs);
            h.leapfrog_steps = leapfrog.unwrap_or(h.leapfrog_steps);
            h.step_size = step_size.unwrap_or(h.step_size);
            h.thin = thin.unwrap_or(h.thin);
        }
        Command::EvalTable1 { draws: Some(d), .. } => cfg.eval.draws = *d,
        Command::SigmaHist { bins: Some(b), .. } => cfg.eval.bins = *b,
        Command::PruneSweep {
            exclude_biases,
            prune_draws,
            ..
        } => {
            cfg.eval.exclude_biases |= *exclude_biases;
            if prune_draws.is_some() {
                cfg.eval.prune_draws = *prune_draws;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let name = cmd.name();
    match cmd {
        Command::TrainEnsemble { output, .. } => {
            let seed = cfg.require_seed(name)?;
            let data = load_data(&cfg.data)?;
            let s = train_ensemble(&data.train, &cfg.model, cfg.ensemble.members, &cfg.train, seed)?;
            save(&out_path(&cfg, output, "ensemble.bnc"), &samples_to_checkpoint(&s)?)
        }
        Command::TrainVi { output, .. } => {
            let seed = cfg.require_seed(name)?;
            let data = load_data(&cfg.data)?;
            let q = train_vi(&data.train, &cfg.model, &cfg.vi, seed)?;
            let info = json!({ "seed": seed, "model": cfg.model, "vi": cfg.vi });
            save(&out_path(&cfg, output, "vi.bnc"), &vi_to_checkpoint(&q, info)?)
        }
        Command::SampleHmc { init, output, .. } => {
            let seed = cfg.require_seed(name)?;
            let data = load_data(&cfg.data)?;
            let chains = cfg.hmc.chains;
            let inits = match init {
                Some(p) => {
                    let ws = load_weight_list(p)?;
                    if ws.len() < chains {
                        return Err(Error::arg(format!(
                            "{} holds {} starting points for {chains} chains",
                            p.display(),
                            ws.len()
                        )));
                    }
                    ws.into_iter().take(chains).collect()
                }
                None => (0..chains)
                    .map(|c| train_map(&data.train, &cfg.model, &cfg.train, member_seed(derive_seed(seed, 1), c)))
                    .collect::<Result<Vec<_>>>()?,
            };
            let s = hmc_sample_chains(&data.train, &cfg.model, &cfg.hmc, &inits, seed)?;
            save(&out_path(&cfg, output, "hmc.bnc"), &samples_to_checkpoint(&s)?)
        }
        Command::Rebasin { input, output, .. } => {
            let s = samples_from_checkpoint(&read_checkpoint(input)?)?;
            let data = needs_data(&cfg)?;
            let probe = data.as_ref().and_then(|d| probe_for(&cfg, d));
            let (aligned, reports) = align_sample_set_with_reports(&s, cfg.match_method, probe.as_ref())?;
            let stem = file_stem(input);
            save(&out_path(&cfg, output, &format!("{stem}_aligned.bnc")), &samples_to_checkpoint(&aligned)?)?;
            let report = json!({
                "method": cfg.match_method,
                "not": reports.iter().map(|r| r.not).collect::<Vec<_>>(),
                "l2_before": reports.iter().map(|r| r.l2_before).collect::<Vec<_>>(),
                "l2_after": reports.iter().map(|r| r.l2_after).collect::<Vec<_>>(),
            });
            write_text(&cfg.out_dir.join(format!("{stem}_rebasin.json")), &serde_json::to_string_pretty(&report)?)
        }
        Command::NotExperiment { nots, .. } => {
            let seed = cfg.require_seed(name)?;
            let data = load_data(&cfg.data)?;
            let probe = probe_for(&cfg, &data);
            let exp = NotExperiment {
                train_data: &data.train,
                barrier_data: loss_data(&cfg, &data),
                model: cfg.model.clone(),
                train: cfg.train.clone(),
                method: cfg.match_method,
                probe: probe.as_ref(),
            };
            let rows = not_stability_experiment(&exp, seed, nots)?;
            write_text(&cfg.out_dir.join("not_experiment.csv"), &not_experiment_csv(&rows))?;
            write_text(
                &cfg.out_dir.join("not_experiment.json"),
                &serde_json::to_string_pretty(&rows)?,
            )
        }
        Command::Interp {
            w0, w1, points, align, ..
        } => {
            let data = load_data(&cfg.data)?;
            let (a, b) = match (w0, w1) {
                (Some(p0), Some(p1)) => (first_weights(p0)?, first_weights(p1)?),
                _ => {
                    let seed = cfg.require_seed(name)?;
                    let a = train_map(&data.train, &cfg.model, &cfg.train, member_seed(seed, 0))?;
                    let b = train_map(&data.train, &cfg.model, &cfg.train, member_seed(seed, 1))?;
                    save(&cfg.out_dir.join("interp_w0.bnc"), &weights_to_checkpoint(&a, json!({ "seed": seed }))?)?;
                    save(&cfg.out_dir.join("interp_w1.bnc"), &weights_to_checkpoint(&b, json!({ "seed": seed }))?)?;
                    (a, b)
                }
            };
            let probe = probe_for(&cfg, &data);
            let lambdas = lambda_grid(points.unwrap_or(cfg.eval.barrier_grid));
            let mut pairs = vec![("interp", b.clone())];
            if *align {
                let rep = match_weights(&a, &b, cfg.match_method, probe.as_ref())?;
                pairs.push(("interp_aligned", apply_to_weights(&rep.permutation, &b)?));
            }
            for (stem, end) in pairs {
                for (suffix, eval) in [("", &data.train), ("_test", &data.test)] {
                    let curve = not_along_path(&a, &end, &lambdas, cfg.match_method, probe.as_ref(), eval)?;
                    write_text(&cfg.out_dir.join(format!("{stem}{suffix}.csv")), &curve.to_csv())?;
                }
            }
            Ok(())
        }
        Command::Summarize { input, name: stem, .. } => {
            let s = samples_from_checkpoint(&read_checkpoint(input)?)?;
            let data = needs_data(&cfg)?;
            let probe = data.as_ref().and_then(|d| probe_for(&cfg, d));
            let stem = stem.clone().unwrap_or_else(|| file_stem(input));
            save(&cfg.out_dir.join(format!("{stem}_qd.bnc")), &gaussian_to_checkpoint(&fit_direct(&s)?)?)?;
            let qr = fit_rebasin(&s, cfg.match_method, probe.as_ref())?;
            save(&cfg.out_dir.join(format!("{stem}_qr.bnc")), &gaussian_to_checkpoint(&qr)?)
        }
        Command::EvalTable1 { hmc, ensemble, vi, .. } => {
            let seed = cfg.require_seed(name)?;
            let data = load_data(&cfg.data)?;
            let probe = probe_for(&cfg, &data);
            let hmc_s = samples_from_checkpoint(&read_checkpoint(hmc)?)?;
            let ens_s = ensemble
                .as_ref()
                .map(|p| read_checkpoint(p).and_then(|c| samples_from_checkpoint(&c)))
                .transpose()?;
            let vi_g = vi.as_ref().map(load_gaussian).transpose()?;
            let fits = |s: &SampleSet| -> Result<(DiagGaussian, DiagGaussian)> {
                Ok((fit_direct(s)?, fit_rebasin(s, cfg.match_method, probe.as_ref())?))
            };
            let hmc_fits = fits(&hmc_s)?;
            let ens_fits = ens_s.as_ref().map(fits).transpose()?;
            let mut methods = vec![MethodArtifacts {
                method: "hmc",
                samples: Some(&hmc_s),
                fits: vec![&hmc_fits.0, &hmc_fits.1],
            }];
            if let (Some(s), Some(f)) = (ens_s.as_ref(), ens_fits.as_ref()) {
                methods.push(MethodArtifacts {
                    method: "ensemble",
                    samples: Some(s),
                    fits: vec![&f.0, &f.1],
                });
            }
            if let Some(g) = vi_g.as_ref() {
                methods.push(MethodArtifacts {
                    method: "vi",
                    samples: None,
                    fits: vec![g],
                });
            }
            let rows = table1_rows(&hmc_s, &methods, &data.test, cfg.eval.draws, seed)?;
            write_text(&cfg.out_dir.join("table1.csv"), &table1_csv(&rows))?;
            write_text(&cfg.out_dir.join("table1.json"), &serde_json::to_string_pretty(&rows)?)
        }
        Command::SigmaHist { inputs, max_sigma, .. } => {
            let gs = inputs.iter().map(load_gaussian).collect::<Result<Vec<_>>>()?;
            let hists = gs
                .iter()
                .map(|g| match max_sigma {
                    Some(hi) => sigma_histogram_range(g, cfg.eval.bins, *hi),
                    None => sigma_histogram(g, cfg.eval.bins),
                })
                .collect::<Result<Vec<Histogram>>>()?;
            let entries: Vec<(&str, &str, &Histogram)> = gs
                .iter()
                .zip(&hists)
                .map(|(g, h)| (g.source_method.as_str(), g.tag.as_str(), h))
                .collect();
            write_text(&cfg.out_dir.join("sigma_hist.csv"), &sigma_hist_csv(&entries))
        }
        Command::PruneSweep { mu, sigma, fractions, .. } => {
            let data = load_data(&cfg.data)?;
            let probe = probe_for(&cfg, &data);
            let opts = PruneOptions {
                exclude_biases: cfg.eval.exclude_biases,
            };
            let eval = match cfg.eval.prune_draws {
                Some(draws) => PruneEval::Draws {
                    draws,
                    seed: cfg.require_seed("prune-sweep with draws")?,
                },
                None => PruneEval::Mean,
            };
            let g_mu = load_gaussian(mu)?;
            let mut variants = vec![(g_mu.source_method.clone(), g_mu.clone())];
            if let Some(p) = sigma {
                let g_sigma = load_gaussian(p)?;
                let merged = merge(&g_mu, &g_sigma, cfg.match_method, probe.as_ref())?;
                variants.push((g_sigma.source_method.clone(), g_sigma));
                variants.push((merged.source_method.clone(), merged));
            }
            let mut rows = Vec::new();
            for (variant, g) in &variants {
                rows.extend(prune_sweep(variant, g, fractions, &data.test, opts, eval)?);
            }
            let unpruned = accuracy(&g_mu.mean_weights(), &data.test)?;
            eprintln!("unpruned mean accuracy {unpruned}");
            write_text(&cfg.out_dir.join("prune.csv"), &prune_csv(&rows))
        }
        Command::Merge { mu, sigma, output, .. } => {
            let data = needs_data(&cfg)?;
            let probe = data.as_ref().and_then(|d| probe_for(&cfg, d));
            let merged = merge(&load_gaussian(mu)?, &load_gaussian(sigma)?, cfg.match_method, probe.as_ref())?;
            save(&out_path(&cfg, output, "merged.bnc"), &gaussian_to_checkpoint(&merged)?)
        }
    }
}

/// Data is only needed for activation matching in the pure rebasin commands.
fn needs_data(cfg: &ExperimentConfig) -> Result<Option<Data>> {
    match cfg.match_method {
        MatchMethod::Activation => load_data(&cfg.data).map(Some),
        MatchMethod::Weight => Ok(None),
    }
}

fn loss_data<'a>(cfg: &ExperimentConfig, data: &'a Data) -> &'a Dataset {
    match cfg.eval.loss_data {
        LossData::Train => &data.train,
        LossData::Test => &data.test,
    }
}

fn first_weights(p: &Path) -> Result<WeightSet> {
    load_weight_list(p)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::format(0, format!("{} holds no weights", p.display())))
}
