//! Monte Carlo and end-to-end training checks that are too slow or too broad
//! for the module unit tests.

use r2g2::gaussian::sample_standard_normal;
use r2g2::harness::experiments::{run_training_experiment, ExperimentConfig};
use r2g2::harness::sites::random_quadratic;
use r2g2::harness::stats::EstimatorStats;
use r2g2::harness::suites::{run_variance_dominance, run_unbiasedness_test, DominanceConfig, UnbiasednessConfig};
use r2g2::{CgConfig, EstimatorKind, RngStream};

#[test]
fn rt_and_r2g2_means_agree_on_a_fixed_two_by_six_site() {
    let oracle = random_quadratic(2, 6, false, &RngStream::new(21, 0)).unwrap();
    let (g_mu, g_tau) = oracle.analytic_gradient();
    let truth: Vec<f64> = g_mu.iter().chain(g_tau.iter()).copied().collect();
    let cg = CgConfig::default();
    let mut rt = EstimatorStats::new(EstimatorKind::Rt, "2x6", 12);
    let mut rb = EstimatorStats::new(EstimatorKind::R2g2, "2x6", 12);
    let mut diff = EstimatorStats::new(EstimatorKind::R2g2, "2x6 difference", 12);
    let noise = RngStream::new(21, 1);
    for k in 0..100_000 {
        let eps = sample_standard_normal(6, &noise.derive(k));
        let draw = oracle.paired_sample(&eps, &cg).unwrap();
        let (a, b) = (draw.rt.flatten(), draw.r2g2.flatten());
        rt.push(&a);
        rb.push(&b);
        diff.push(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
    }
    let worst = |s: &EstimatorStats, t: &[f64]| s.z_scores(t).into_iter().fold(0.0f64, |m, z| m.max(z.abs()));
    assert!(worst(&rt, &truth) <= 5.0);
    assert!(worst(&rb, &truth) <= 5.0);
    // Paired differences have zero mean; their SE is the pooled one.
    assert!(worst(&diff, &[0.0; 12]) <= 5.0);

    // Total squared deviation from the true gradient.
    let spread = |s: &EstimatorStats| s.variance().iter().sum::<f64>();
    assert!(spread(&rb) <= spread(&rt), "{} vs {}", spread(&rb), spread(&rt));
}

#[test]
fn statistical_suites_rerun_bit_identically() {
    let cg = CgConfig::default();
    let cfg = UnbiasednessConfig {
        samples: 5_000,
        ..UnbiasednessConfig::default()
    };
    let a = run_unbiasedness_test(&cfg, &cg).unwrap();
    let b = run_unbiasedness_test(&cfg, &cg).unwrap();
    assert_eq!(a.checks, b.checks);
    let bits = |v: &[(EstimatorKind, f64)]| v.iter().map(|(k, z)| (*k, z.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a.max_z), bits(&b.max_z));

    let cfg = DominanceConfig {
        draws: 2_000,
        ..DominanceConfig::default()
    };
    let a = run_variance_dominance(&cfg, &cg).unwrap();
    let b = run_variance_dominance(&cfg, &cg).unwrap();
    assert_eq!(a.checks, b.checks);
}

#[test]
fn every_network_estimator_learns_separable_blobs() {
    let cfg = ExperimentConfig {
        estimators: vec![EstimatorKind::Rt, EstimatorKind::Lrt, EstimatorKind::R2g2],
        ..ExperimentConfig::default()
    };
    assert_eq!((cfg.dataset_n, cfg.widths.as_slice(), cfg.steps, cfg.lr), (200, &[2, 16, 2][..], 2000, 1e-3));
    let out = run_training_experiment(&cfg).unwrap();
    for k in &cfg.estimators {
        let good = out
            .runs_for(*k)
            .filter(|r| r.final_accuracy.expect("classification") >= 0.95)
            .count();
        assert!(good >= 4, "{k}: only {good} of 5 seeds reached 95% accuracy");
    }
}
