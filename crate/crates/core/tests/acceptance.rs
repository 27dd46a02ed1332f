//! Acceptance criteria, one test per criterion. Each prints a single
//! `PASS`/`FAIL` line with its metric, then asserts both the criterion and
//! its runtime budget.

use std::fs;
use std::time::{Duration, Instant};

use r2g2::harness::experiments::{run_training_experiment, ExperimentConfig};
use r2g2::harness::suites::{
    run_conditional_consistency, run_equivalence_test, run_finite_difference_check,
    run_oracle_sweep, run_projection_invariants, run_unbiasedness_test, run_variance_dominance,
    DominanceConfig, EquivalenceConfig, FiniteDifferenceConfig, UnbiasednessConfig,
};
use r2g2::harness::Check;
use r2g2::{CgConfig, EstimatorKind};

fn report(id: u8, title: &str, checks: &[Check], elapsed: Duration, budget: Option<Duration>) {
    let in_budget = budget.is_none_or(|b| elapsed < b);
    let ok = checks.iter().all(|c| c.passed) && in_budget;
    let metrics: Vec<String> = checks
        .iter()
        .map(|c| format!("{}={:.3e}{}", c.name, c.metric, if c.passed { "" } else { "(!)" }))
        .collect();
    println!(
        "{} criterion {id} {title}: {} [{:.2}s{}]",
        if ok { "PASS" } else { "FAIL" },
        metrics.join(" "),
        elapsed.as_secs_f64(),
        budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default()
    );
    for c in checks {
        assert!(c.passed, "criterion {id}: {}", c.line());
    }
    assert!(in_budget, "criterion {id} took {elapsed:?}, budget {budget:?}");
}

#[test]
fn criterion_1_cg_matches_pseudo_inverse_oracle() {
    let t = Instant::now();
    let check = run_oracle_sweep(500, 0, &CgConfig::default()).unwrap();
    report(1, "CG/pinv oracle equivalence", &[check], t.elapsed(), Some(Duration::from_secs(10)));
}

#[test]
fn criterion_2_projection_invariants() {
    let t = Instant::now();
    let checks = run_projection_invariants(1000, 0, &CgConfig::default()).unwrap();
    report(2, "projection invariants", &checks, t.elapsed(), Some(Duration::from_secs(5)));
}

#[test]
fn criterion_3_unbiasedness_on_quadratic_oracle() {
    let t = Instant::now();
    let out = run_unbiasedness_test(&UnbiasednessConfig::default(), &CgConfig::default()).unwrap();
    assert_eq!(out.max_z.len(), 4);
    report(3, "unbiasedness (4 estimators + mutant)", &out.checks, t.elapsed(), Some(Duration::from_secs(60)));
}

#[test]
fn criterion_4_variance_dominance() {
    let t = Instant::now();
    let out = run_variance_dominance(&DominanceConfig::default(), &CgConfig::default()).unwrap();
    report(4, "variance dominance", &out.checks, t.elapsed(), Some(Duration::from_secs(30)));
}

#[test]
fn criterion_5_lrt_r2g2_exact_equivalence() {
    let t = Instant::now();
    let out = run_equivalence_test(&EquivalenceConfig::default(), &CgConfig::default()).unwrap();
    report(5, "LRT/R2-G2 equivalence", &out.checks, t.elapsed(), Some(Duration::from_secs(10)));
}

#[test]
fn criterion_6_conditional_sampling_consistency() {
    let t = Instant::now();
    let out = run_conditional_consistency(10_000, 0, &CgConfig::default()).unwrap();
    report(6, "conditional RT average vs closed form", &[out.check], t.elapsed(), Some(Duration::from_secs(30)));
}

#[test]
fn criterion_7_backward_matches_finite_differences() {
    let t = Instant::now();
    let out = run_finite_difference_check(&FiniteDifferenceConfig::default(), &CgConfig::default()).unwrap();
    let modes: Vec<EstimatorKind> = out.iter().map(|(k, _)| *k).collect();
    assert_eq!(modes, [EstimatorKind::Rt, EstimatorKind::Lrt, EstimatorKind::R2g2]);
    let checks: Vec<Check> = out.into_iter().map(|(_, c)| c).collect();
    report(7, "finite differences (rt, lrt, r2g2)", &checks, t.elapsed(), Some(Duration::from_secs(10)));
}

#[test]
fn criterion_8_training_ordering_on_blobs() {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.seeds.len(), 5);
    assert_eq!(cfg.steps, 2000);
    let out = run_training_experiment(&cfg).unwrap();
    assert!(!out.rank_deficient_layers.is_empty());
    let checks = out.ordering_checks(EstimatorKind::R2g2, EstimatorKind::Rt);
    report(8, "training variance and ELBO ordering", &checks, t.elapsed(), Some(Duration::from_secs(300)));
}

#[test]
fn criterion_9_identical_configs_give_identical_csv_bytes() {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let base = ExperimentConfig {
        seeds: vec![0, 1],
        estimators: vec![EstimatorKind::Rt, EstimatorKind::Lrt, EstimatorKind::R2g2],
        steps: 200,
        ..ExperimentConfig::default()
    };
    let mut files = Vec::new();
    for dir in [&a, &b] {
        let cfg = ExperimentConfig {
            out_dir: Some(dir.path().to_path_buf()),
            ..base.clone()
        };
        let train = run_training_experiment(&cfg).unwrap();
        let study = r2g2::harness::run_variance_study(&ExperimentConfig {
            estimators: EstimatorKind::ALL.to_vec(),
            ..cfg
        })
        .unwrap();
        files.push([train.files, study.files].concat());
    }
    let mut identical = files[0].len() == files[1].len() && !files[0].is_empty();
    for (x, y) in files[0].iter().zip(&files[1]) {
        identical &= x.file_name() == y.file_name() && fs::read(x).unwrap() == fs::read(y).unwrap();
    }
    let check = Check::flag(
        "identical_artifacts",
        identical,
        format!("{} files per run compared byte for byte", files[0].len()),
    );
    report(9, "determinism", &[check], t.elapsed(), None);
}
