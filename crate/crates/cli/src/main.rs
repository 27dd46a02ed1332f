use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use r2g2::harness::experiments::{run_training_experiment, run_variance_study};
use r2g2::harness::suites::{
    run_conditional_consistency, run_equivalence_test, run_finite_difference_check,
    run_oracle_sweep, run_projection_invariants, run_unbiasedness_test, run_variance_dominance,
    DominanceConfig, EquivalenceConfig, FiniteDifferenceConfig, UnbiasednessConfig,
};
use r2g2::harness::{Check, Report};
use r2g2::{ErrorCategory, EstimatorKind};
use thiserror::Error;

mod config;

use config::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] r2g2::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config | ErrorCategory::Io => 3,
                ErrorCategory::Numeric => 4,
            },
        }
    }
}

/// Verification suites and desk-scale experiments for Gaussian gradient estimators.
#[derive(Debug, Parser)]
#[command(name = "r2g2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every invariant suite (oracle, projection, unbiasedness, dominance,
    /// equivalence, conditional sampling, finite differences).
    Verify(Common),
    /// Log per-epoch gradient variances at a fixed linear site.
    Variance(Common),
    /// Train a Bayesian MLP on a synthetic dataset and log ELBO and variances.
    Train(Common),
    /// Compare LRT and R2-G2 gradients on random single-unit layers.
    Equivalence(Common),
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Config file path, or `default` for built-in settings.
    #[arg(long, default_value = "default")]
    config: PathBuf,
    /// Replace the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the configured estimators with this one.
    #[arg(long, value_parser = parse_estimator)]
    estimator: Option<EstimatorKind>,
    /// Output directory (overrides `out.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_estimator(s: &str) -> Result<EstimatorKind, String> {
    s.parse().map_err(|e: r2g2::Error| e.to_string())
}

impl Common {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::load(&self.config)?;
        if let Some(seed) = self.seed {
            s.set_seed(seed);
        }
        if let Some(k) = self.estimator {
            s.set_estimator(k);
        }
        if let Some(out) = &self.out {
            s.out_dir = out.clone();
        }
        s.validate()?;
        s.experiment.out_dir = Some(s.out_dir.clone());
        Ok(s)
    }
}

fn main() -> ExitCode {
    let keys = config::keys_help();
    let command = Cli::command()
        .after_long_help(keys.clone())
        .mut_subcommands(|sub| sub.after_long_help(keys.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(&cli.command) {
        Ok(report) => {
            print!("{}", report.to_text());
            ExitCode::from(if report.passed() { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("r2g2: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: &Command) -> Result<Report, CliError> {
    type Driver = fn(&Settings) -> Result<Report, CliError>;
    let (common, driver): (&Common, Driver) = match command {
        Command::Verify(c) => (c, verify),
        Command::Variance(c) => (c, variance),
        Command::Train(c) => (c, train),
        Command::Equivalence(c) => (c, equivalence),
    };
    let settings = common.settings()?;
    let report = driver(&settings)?;
    report.write(&settings.out_dir)?;
    Ok(report)
}

fn verify(s: &Settings) -> Result<Report, CliError> {
    let cg = s.suite_cg();
    let seed = s.experiment.seeds[0];
    let (m, n) = (s.experiment.site_m, s.experiment.site_n);
    let mut report = Report::new(format!("verify (seed {seed})"));
    report.push(run_oracle_sweep(500, seed, &cg)?);
    report.extend(run_projection_invariants(1000, seed, &cg)?);
    let unbiased = UnbiasednessConfig {
        samples: s.samples,
        seed,
        m,
        n,
        ..UnbiasednessConfig::default()
    };
    report.extend(run_unbiasedness_test(&unbiased, &cg)?.checks);
    let dominance = DominanceConfig {
        seed,
        m,
        n,
        ..DominanceConfig::default()
    };
    report.extend(run_variance_dominance(&dominance, &cg)?.checks);
    let equivalence = EquivalenceConfig {
        seed,
        ..EquivalenceConfig::default()
    };
    report.extend(run_equivalence_test(&equivalence, &cg)?.checks);
    report.push(run_conditional_consistency(10_000, seed, &cg)?.check);
    let fd = FiniteDifferenceConfig {
        seed,
        ..FiniteDifferenceConfig::default()
    };
    report.extend(run_finite_difference_check(&fd, &cg)?.into_iter().map(|(_, c)| c));
    Ok(report)
}

fn equivalence(s: &Settings) -> Result<Report, CliError> {
    let cfg = EquivalenceConfig {
        seed: s.experiment.seeds[0],
        ..EquivalenceConfig::default()
    };
    let out = run_equivalence_test(&cfg, &s.suite_cg())?;
    println!("max LRT/R2-G2 deviation: {:.3e} over {} layers", out.max_deviation, cfg.triples);
    let mut report = Report::new("equivalence");
    report.extend(out.checks);
    Ok(report)
}

fn variance(s: &Settings) -> Result<Report, CliError> {
    let mut cfg = s.experiment.clone();
    if !s.estimator_set {
        cfg.estimators = EstimatorKind::ALL.to_vec();
    }
    let study = run_variance_study(&cfg)?;
    let mut by_kind: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for row in &study.rows {
        let e = by_kind.entry(row.estimator.as_str()).or_default();
        e.0 += row.grad_var_mu;
        e.1 += row.grad_var_tau;
        e.2 += 1;
    }
    println!("{:<10} {:>14} {:>14} {:>6}", "estimator", "grad_var_mu", "grad_var_tau", "rows");
    for (k, (mu, tau, count)) in &by_kind {
        let c = *count as f64;
        println!("{k:<10} {:>14.6e} {:>14.6e} {count:>6}", mu / c, tau / c);
    }
    let mut report = Report::new(format!("variance study ({}x{} site)", cfg.site_m, cfg.site_n));
    report.push(Check::flag(
        "variance_study_complete",
        study.rows.iter().all(|r| r.grad_var_mu.is_finite() && r.grad_var_tau.is_finite()),
        format!("{} CSV files", study.files.len()),
    ));
    Ok(report)
}

fn train(s: &Settings) -> Result<Report, CliError> {
    let cfg = &s.experiment;
    let out = run_training_experiment(cfg)?;
    println!("{:<10} {:>6} {:>14} {:>10}", "estimator", "seed", "final_elbo", "accuracy");
    for run in &out.runs {
        let acc = run.final_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("{:<10} {:>6} {:>14.6} {acc:>10}", run.estimator.as_str(), run.seed, run.final_elbo);
    }
    let mut report = Report::new(format!("train ({:?}, {} steps)", cfg.dataset, cfg.steps));
    report.push(Check::flag(
        "training_complete",
        out.runs.iter().all(|r| r.final_elbo.is_finite()),
        format!("{} runs", out.runs.len()),
    ));
    let has = |k| cfg.estimators.contains(&k);
    if has(EstimatorKind::R2g2) && has(EstimatorKind::Rt) && !out.rank_deficient_layers.is_empty() {
        report.extend(out.ordering_checks(EstimatorKind::R2g2, EstimatorKind::Rt));
    }
    Ok(report)
}
