//! Experiment drivers: a variance study on a quadratic site and minibatch
//! ELBO training of a small Bayesian MLP, both logging the same CSV schema.
//!
//! Gradient variance is logged as the per-coordinate variance over
//! `replicates` fresh noise draws at fixed parameters, averaged within a
//! layer's μ (resp. τ) block. For network layers the τ block is the stored
//! `log τ` parameterisation; for quadratic sites it is `τ` itself.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::gaussian::{kl_diag_standard, kl_diag_standard_grad, sample_standard_normal, DiagGaussianParams, RngStream};
use crate::harness::data::{make_synthetic_dataset, Dataset, DatasetKind};
use crate::harness::report::Check;
use crate::harness::sites::random_quadratic;
use crate::harness::stats::{mean_and_se, EstimatorStats};
use crate::linalg::{CgConfig, DenseVector};
use crate::nets::{accuracy, elbo_loss, nll, AdamState, LossKind, LossSpec, Network, NetworkSpec, Targets};

const INIT_STREAM: u64 = 0x10;
const SHUFFLE_STREAM: u64 = 0x11;
const TRAIN_STREAM: u64 = 0x12;
const PROBE_STREAM: u64 = 0x13;
const EVAL_STREAM: u64 = 0x14;
const SITE_STREAM: u64 = 0x15;
const SITE_NOISE_STREAM: u64 = 0x16;

pub const CSV_COLUMNS: [&str; 12] = [
    "step",
    "epoch",
    "seed",
    "estimator",
    "layer",
    "loss",
    "elbo",
    "accuracy",
    "grad_var_mu",
    "grad_var_tau",
    "cg_iters_mean",
    "wall_ms",
];

const GRAD_VAR_NOTE: &str = "grad_var_mu / grad_var_tau: per-coordinate variance over `replicates` noise draws at fixed \
parameters on a fixed probe batch (the first `batch` points), averaged over the layer's coordinates; \
the tau column refers to the log-tau parameters for network layers and to tau for quadratic sites";

/// Iteration cap for experiment runs, shared with the network default.
pub const DEFAULT_EXPERIMENT_CG_ITERS: usize = crate::nets::DEFAULT_NETWORK_CG_ITERS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub estimators: Vec<EstimatorKind>,
    pub widths: Vec<usize>,
    pub dataset: DatasetKind,
    pub dataset_n: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Noise replicates per logged gradient-variance estimate.
    pub replicates: usize,
    /// Noise draws per full-data ELBO estimate.
    pub eval_samples: usize,
    pub cg_tol: f64,
    pub cg_max_iters: Option<usize>,
    pub site_m: usize,
    pub site_n: usize,
    pub site_layer: bool,
    /// Epochs of the variance study.
    pub epochs: usize,
    /// Optimiser steps between variance-study epochs.
    pub steps_per_epoch: usize,
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
    /// Record elapsed milliseconds in `wall_ms`; otherwise the column is 0
    /// so that reruns produce identical files.
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            estimators: vec![EstimatorKind::Rt, EstimatorKind::R2g2],
            widths: vec![2, 16, 2],
            dataset: DatasetKind::Blobs,
            dataset_n: 200,
            batch: 8,
            steps: 2000,
            lr: 1e-3,
            replicates: 32,
            eval_samples: 8,
            cg_tol: crate::linalg::DEFAULT_RESIDUAL_TOL,
            cg_max_iters: Some(DEFAULT_EXPERIMENT_CG_ITERS),
            site_m: 2,
            site_n: 8,
            site_layer: true,
            epochs: 10,
            steps_per_epoch: 20,
            out_dir: None,
            wall_clock: false,
        }
    }
}

impl ExperimentConfig {
    pub fn cg(&self) -> CgConfig {
        CgConfig {
            max_iters: self.cg_max_iters,
            residual_tol: self.cg_tol,
            initial_guess: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        if self.estimators.is_empty() {
            return fail("estimators must be nonempty".into());
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return fail(format!("model.widths must have at least two positive entries, got {:?}", self.widths));
        }
        if self.batch == 0 || self.batch > self.dataset_n {
            return fail(format!("batch {} must be in 1..={}", self.batch, self.dataset_n));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.replicates < 2 {
            return fail("replicates must be at least 2".into());
        }
        if self.eval_samples == 0 {
            return fail("eval_samples must be at least 1".into());
        }
        if self.site_m == 0 || self.site_n == 0 {
            return fail("site.m and site.n must be positive".into());
        }
        if self.site_layer && !self.site_n.is_multiple_of(self.site_m) {
            return fail(format!("layer sites need site.n ({}) divisible by site.m ({})", self.site_n, self.site_m));
        }
        self.cg().validate()?;
        Ok(())
    }

    fn wall_ms(&self, start: Instant) -> u64 {
        if self.wall_clock {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub layer: usize,
    pub loss: f64,
    pub elbo: f64,
    pub accuracy: Option<f64>,
    pub grad_var_mu: f64,
    pub grad_var_tau: f64,
    pub cg_iters_mean: Option<f64>,
    pub wall_ms: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>().map_err(csv_err)
}

#[derive(Serialize)]
struct Metadata<'a> {
    experiment: &'a str,
    csv_columns: [&'static str; 12],
    grad_var: &'static str,
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

fn write_outputs(dir: &Path, experiment: &str, cfg: &ExperimentConfig, files: Vec<(String, &[CsvRow])>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (name, rows) in &files {
        let path = dir.join(name);
        write_csv(&path, rows)?;
        written.push(path);
    }
    let meta = Metadata {
        experiment,
        csv_columns: CSV_COLUMNS,
        grad_var: GRAD_VAR_NOTE,
        files: files.iter().map(|(n, _)| n.clone()).collect(),
        config: cfg,
    };
    let path = dir.join(format!("{experiment}_metadata.json"));
    let body = serde_json::to_string_pretty(&meta).expect("metadata serialises") + "\n";
    fs::write(&path, body).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

// ---------------------------------------------------------------------------
// Variance study on a quadratic site.

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub seed: u64,
    pub epoch: usize,
    pub stats: EstimatorStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStudy {
    pub rows: Vec<CsvRow>,
    pub stats: Vec<EpochStats>,
    pub files: Vec<PathBuf>,
}

impl VarianceStudy {
    /// Per-(seed, epoch) ratio `grad_var_tau(a) / grad_var_tau(b)`.
    pub fn tau_variance_ratios(&self, a: EstimatorKind, b: EstimatorKind) -> Vec<f64> {
        let pick = |k: EstimatorKind| self.rows.iter().filter(move |r| r.estimator == k);
        pick(a)
            .zip(pick(b))
            .map(|(x, y)| x.grad_var_tau / y.grad_var_tau)
            .collect()
    }

    pub fn stats_for(&self, k: EstimatorKind) -> impl Iterator<Item = &EpochStats> {
        self.stats.iter().filter(move |s| s.stats.estimator == k)
    }
}

/// Tracks Monte Carlo gradient statistics of each estimator along an
/// optimisation trajectory of one quadratic site per seed. The trajectory is
/// driven by Adam on the exact gradient of `E[ℓ] + KL`, so every estimator is
/// measured at the same parameters with the same paired noise.
pub fn run_variance_study(cfg: &ExperimentConfig) -> Result<VarianceStudy> {
    cfg.validate()?;
    if cfg.estimators.contains(&EstimatorKind::Lrt) && !cfg.site_layer {
        return Err(Error::Config("lrt needs a layer site (site.layout = \"layer\")".into()));
    }
    let cg = cfg.cg();
    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| variance_study_seed(cfg, seed, &cg))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for (r, s) in per_seed {
        rows.extend(r);
        stats.extend(s);
    }
    rows.sort_by_key(|r| (cfg.estimators.iter().position(|&k| k == r.estimator), r.seed, r.epoch));
    let files = match &cfg.out_dir {
        Some(dir) => {
            let files = grouped_files("variance", cfg, &rows);
            write_outputs(dir, "variance", cfg, files)?
        }
        None => Vec::new(),
    };
    Ok(VarianceStudy { rows, stats, files })
}

fn grouped_files<'a>(prefix: &str, cfg: &ExperimentConfig, rows: &'a [CsvRow]) -> Vec<(String, &'a [CsvRow])> {
    let mut out = Vec::new();
    for &k in &cfg.estimators {
        for &seed in &cfg.seeds {
            let start = rows.iter().position(|r| r.estimator == k && r.seed == seed);
            if let Some(start) = start {
                let len = rows[start..].iter().take_while(|r| r.estimator == k && r.seed == seed).count();
                out.push((format!("{prefix}_{k}_seed{seed}.csv"), &rows[start..start + len]));
            }
        }
    }
    out
}

fn variance_study_seed(cfg: &ExperimentConfig, seed: u64, cg: &CgConfig) -> Result<(Vec<CsvRow>, Vec<EpochStats>)> {
    let start = Instant::now();
    let mut oracle = random_quadratic(cfg.site_m, cfg.site_n, cfg.site_layer, &RngStream::new(seed, SITE_STREAM))?;
    let n = cfg.site_n;
    let mut params: Vec<f64> = {
        let t = oracle.site().theta();
        t.mu().iter().chain(t.log_tau().iter()).copied().collect()
    };
    let mut adam = AdamState::new(2 * n, cfg.lr);
    let noise = RngStream::new(seed, SITE_NOISE_STREAM);
    let desc = format!("{}x{} {}", cfg.site_m, n, if cfg.site_layer { "layer" } else { "dense" });
    let mut rows = Vec::new();
    let mut all_stats = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut stats: Vec<EstimatorStats> =
            cfg.estimators.iter().map(|&k| EstimatorStats::new(k, desc.clone(), 2 * n)).collect();
        let mut cg_iters = 0usize;
        for r in 0..cfg.replicates as u64 {
            let eps = sample_standard_normal(n, &noise.derive(epoch as u64).derive(r));
            let draw = oracle.paired_sample(&eps, cg).map_err(Error::at_step(epoch * cfg.steps_per_epoch))?;
            cg_iters += draw.trace.cg_iters;
            for s in &mut stats {
                let g = match s.estimator {
                    EstimatorKind::Rt => &draw.rt,
                    EstimatorKind::R2g2 => &draw.r2g2,
                    EstimatorKind::Score => &draw.score,
                    EstimatorKind::Lrt => draw.lrt.as_ref().expect("layer site"),
                };
                s.push(&g.flatten());
            }
        }
        let expected = oracle.expected_loss();
        let kl = kl_diag_standard(oracle.site().theta());
        let step = epoch * cfg.steps_per_epoch;
        for s in stats {
            rows.push(CsvRow {
                step,
                epoch,
                seed,
                estimator: s.estimator,
                layer: 0,
                loss: expected,
                elbo: -(expected + kl),
                accuracy: None,
                grad_var_mu: s.mean_variance(0..n),
                grad_var_tau: s.mean_variance(n..2 * n),
                cg_iters_mean: (s.estimator == EstimatorKind::R2g2).then(|| cg_iters as f64 / cfg.replicates as f64),
                wall_ms: cfg.wall_ms(start),
            });
            all_stats.push(EpochStats { seed, epoch, stats: s });
        }
        for k in 0..cfg.steps_per_epoch {
            let theta = oracle.site().theta();
            let (g_mu, g_tau) = oracle.analytic_gradient();
            let (k_mu, k_lt) = kl_diag_standard_grad(theta);
            let tau = theta.tau();
            let grad: Vec<f64> = (0..n)
                .map(|i| g_mu[i] + k_mu[i])
                .chain((0..n).map(|i| g_tau[i] * tau[i] + k_lt[i]))
                .collect();
            adam.step(&mut params, &grad).map_err(Error::at_step(step + k))?;
            let next = DiagGaussianParams::new(DenseVector::new(params[..n].to_vec())?, DenseVector::new(params[n..].to_vec())?)?;
            oracle.set_theta(next).map_err(Error::at_step(step + k))?;
        }
    }
    Ok((rows, all_stats))
}

// ---------------------------------------------------------------------------
// Network training.

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub seed: u64,
    pub estimator: EstimatorKind,
    pub rows: Vec<CsvRow>,
    pub final_elbo: f64,
    pub final_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub runs: Vec<TrainingRun>,
    /// Layers whose per-unit sites have fewer batch rows than weights.
    pub rank_deficient_layers: Vec<usize>,
    pub files: Vec<PathBuf>,
}

impl TrainingOutcome {
    pub fn runs_for(&self, k: EstimatorKind) -> impl Iterator<Item = &TrainingRun> {
        self.runs.iter().filter(move |r| r.estimator == k)
    }

    /// Seed-mean logged τ-gradient variance per epoch for one layer.
    pub fn mean_tau_variance(&self, k: EstimatorKind, layer: usize) -> Vec<f64> {
        let runs: Vec<&TrainingRun> = self.runs_for(k).collect();
        let Some(first) = runs.first() else { return Vec::new() };
        let epochs = first.rows.iter().filter(|r| r.layer == layer).count();
        (0..epochs)
            .map(|e| {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter_map(|run| run.rows.iter().filter(|r| r.layer == layer).nth(e))
                    .map(|r| r.grad_var_tau)
                    .collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    }

    /// Largest ratio `mean var(candidate) / mean var(baseline)` over epochs
    /// and rank-deficient layers.
    pub fn max_variance_ratio(&self, candidate: EstimatorKind, baseline: EstimatorKind) -> f64 {
        self.rank_deficient_layers
            .iter()
            .flat_map(|&l| {
                let c = self.mean_tau_variance(candidate, l);
                let b = self.mean_tau_variance(baseline, l);
                c.into_iter().zip(b).map(|(c, b)| c / b).collect::<Vec<_>>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(mean_candidate − mean_baseline) / pooled SE` of the final ELBOs, with
    /// the pooled SE `√(s_c²/k_c + s_b²/k_b)`.
    pub fn elbo_gap(&self, candidate: EstimatorKind, baseline: EstimatorKind) -> (f64, f64) {
        let finals = |k| self.runs_for(k).map(|r| r.final_elbo).collect::<Vec<f64>>();
        let (mc, sc) = mean_and_se(&finals(candidate));
        let (mb, sb) = mean_and_se(&finals(baseline));
        (mc - mb, (sc * sc + sb * sb).sqrt())
    }

    pub fn ordering_checks(&self, candidate: EstimatorKind, baseline: EstimatorKind) -> Vec<Check> {
        let ratio = self.max_variance_ratio(candidate, baseline);
        let (gap, se) = self.elbo_gap(candidate, baseline);
        let normalised = match (se > 0.0, gap) {
            (true, _) => gap / se,
            (false, 0.0) => 0.0,
            (false, g) => g.signum() * f64::INFINITY,
        };
        vec![
            Check::at_most(
                "training_tau_variance_ordering",
                ratio,
                1.0,
                format!(
                    "max over epochs of seed-mean var_tau({candidate})/var_tau({baseline}) on layers {:?}",
                    self.rank_deficient_layers
                ),
            ),
            Check::at_least(
                "training_final_elbo_ordering",
                normalised,
                -1.0,
                format!("(mean ELBO {candidate} − {baseline}) / pooled SE; gap {gap:.4}, SE {se:.4}"),
            ),
        ]
    }
}

pub fn run_training_experiment(cfg: &ExperimentConfig) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if cfg.estimators.contains(&EstimatorKind::Score) {
        return Err(Error::Config("score estimator is not available for network training".into()));
    }
    let classes_ok = if cfg.dataset.is_classification() { 2 } else { 1 };
    if cfg.widths[0] != 2 || *cfg.widths.last().expect("widths") != classes_ok {
        return Err(Error::Config(format!(
            "model.widths must start with 2 and end with {classes_ok} for {}",
            cfg.dataset
        )));
    }
    let jobs: Vec<(u64, EstimatorKind)> = cfg
        .estimators
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (s, k)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, k)| {
            let data = make_synthetic_dataset(cfg.dataset, cfg.dataset_n, seed)?;
            train_one(cfg, &data, seed, k)
        })
        .collect::<Result<Vec<_>>>()?;
    let probe = Network::new(&NetworkSpec::mlp(&cfg.widths, EstimatorKind::Rt), &RngStream::new(0, INIT_STREAM))?;
    let rank_deficient_layers = probe
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_rank_deficient(cfg.batch))
        .map(|(i, _)| i)
        .collect();
    let files = match &cfg.out_dir {
        Some(dir) => {
            let files = runs
                .iter()
                .map(|r| (format!("train_{}_seed{}.csv", r.estimator, r.seed), r.rows.as_slice()))
                .collect();
            write_outputs(dir, "train", cfg, files)?
        }
        None => Vec::new(),
    };
    Ok(TrainingOutcome {
        runs,
        rank_deficient_layers,
        files,
    })
}

fn train_one(cfg: &ExperimentConfig, data: &Dataset, seed: u64, estimator: EstimatorKind) -> Result<TrainingRun> {
    let start = Instant::now();
    let mut net = Network::new(&NetworkSpec::mlp(&cfg.widths, estimator), &RngStream::new(seed, INIT_STREAM))?;
    net.set_cg(cfg.cg())?;
    let kind = if cfg.dataset.is_classification() {
        LossKind::SoftmaxNll
    } else {
        LossKind::GaussianNll { noise_std: 0.1 }
    };
    let spec = LossSpec::new(kind, data.len(), cfg.batch)?;
    let steps_per_epoch = data.len() / cfg.batch;
    let probe_idx: Vec<usize> = (0..cfg.batch).collect();
    let (probe_x, probe_t) = data.subset(&probe_idx);
    let all_idx: Vec<usize> = (0..data.len()).collect();
    let mut params = net.params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let depth = net.layers().len();
    let (mut epoch_loss, mut epoch_steps) = (0.0, 0usize);
    let mut cg_sum = vec![0.0; depth];
    let mut rows = Vec::new();
    let (mut final_elbo, mut final_accuracy) = (f64::NAN, None);

    for step in 0..cfg.steps {
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order = all_idx.clone();
            order.shuffle(&mut RngStream::new(seed, SHUFFLE_STREAM).derive(epoch as u64).rng());
        }
        let (x, t) = data.subset(&order[pos * cfg.batch..(pos + 1) * cfg.batch]);
        let tape = net
            .forward(&x, &RngStream::new(seed, TRAIN_STREAM).derive(step as u64))
            .map_err(Error::at_step(step))?;
        let terms = elbo_loss(&net, tape.predictions(), &t, &spec)?;
        let mut grad = net.backward(&tape, &terms.d_preds).map_err(Error::at_step(step))?;
        for (g, k) in grad.iter_mut().zip(net.kl_gradient()) {
            *g += k;
        }
        adam.step(&mut params, &grad).map_err(Error::at_step(step))?;
        net.set_params(&params).map_err(Error::at_step(step))?;
        epoch_loss += terms.loss;
        epoch_steps += 1;
        for (l, c) in cg_sum.iter_mut().enumerate() {
            *c += tape.cg_iters_mean(l).unwrap_or(0.0);
        }

        if pos + 1 == steps_per_epoch || step + 1 == cfg.steps {
            let (elbo, acc) = evaluate(&net, data, &all_idx, &spec, cfg, seed, epoch).map_err(Error::at_step(step))?;
            let variances = probe_variance(&net, &probe_x, &probe_t, &spec, cfg, seed, epoch).map_err(Error::at_step(step))?;
            for (l, (var_mu, var_tau)) in variances.into_iter().enumerate() {
                rows.push(CsvRow {
                    step: step + 1,
                    epoch,
                    seed,
                    estimator,
                    layer: l,
                    loss: epoch_loss / epoch_steps as f64,
                    elbo,
                    accuracy: acc,
                    grad_var_mu: var_mu,
                    grad_var_tau: var_tau,
                    cg_iters_mean: (estimator == EstimatorKind::R2g2).then(|| cg_sum[l] / epoch_steps as f64),
                    wall_ms: cfg.wall_ms(start),
                });
            }
            final_elbo = elbo;
            final_accuracy = acc;
            epoch_loss = 0.0;
            epoch_steps = 0;
            cg_sum.iter_mut().for_each(|c| *c = 0.0);
        }
    }
    Ok(TrainingRun {
        seed,
        estimator,
        rows,
        final_elbo,
        final_accuracy,
    })
}

/// Full-data ELBO averaged over `eval_samples` weight draws, and the accuracy
/// of the mean network (classification only). Weights are sampled directly
/// for every estimator so the numbers are comparable across runs.
fn evaluate(
    net: &Network,
    data: &Dataset,
    all_idx: &[usize],
    spec: &LossSpec,
    cfg: &ExperimentConfig,
    seed: u64,
    epoch: usize,
) -> Result<(f64, Option<f64>)> {
    let sampler = net.with_mode(EstimatorKind::Rt)?;
    let (x, t) = data.subset(all_idx);
    let kl = net.kl();
    let base = RngStream::new(seed, EVAL_STREAM).derive(epoch as u64);
    let mut total = 0.0;
    for s in 0..cfg.eval_samples as u64 {
        let tape = sampler.forward(&x, &base.derive(s))?;
        total += nll(tape.predictions(), &t, spec.kind)?.0;
    }
    let elbo = -(total / cfg.eval_samples as f64 + kl);
    let acc = match &t {
        Targets::Labels(labels) => Some(accuracy(&net.forward_deterministic(&x)?, labels)),
        Targets::Values(_) => None,
    };
    Ok((elbo, acc))
}

/// Per-layer mean per-coordinate variance of the minibatch gradient on the
/// probe batch, over `replicates` noise draws at the current parameters.
fn probe_variance(
    net: &Network,
    x: &crate::linalg::DenseMatrix,
    t: &Targets,
    spec: &LossSpec,
    cfg: &ExperimentConfig,
    seed: u64,
    epoch: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut stats = EstimatorStats::new(net.layers()[0].mode(), "probe batch", net.num_params());
    let base = RngStream::new(seed, PROBE_STREAM).derive(epoch as u64);
    for r in 0..cfg.replicates as u64 {
        let tape = net.forward(x, &base.derive(r))?;
        let terms = elbo_loss(net, tape.predictions(), t, spec)?;
        stats.push(&net.backward(&tape, &terms.d_preds)?);
    }
    Ok(net
        .layer_ranges()
        .into_iter()
        .map(|r| (stats.mean_variance(r.mu), stats.mean_variance(r.log_tau)))
        .collect())
}
