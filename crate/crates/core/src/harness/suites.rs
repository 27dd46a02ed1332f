//! Statistical and exact-identity test suites. Each suite is deterministic
//! given its seed and returns named [`Check`]s.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    derive_xi_from_z, forward_r2g2, lrt_gradient, r2g2_gradient, rt_gradient, EstimatorKind,
    GradientEstimate, LinearMapContext, LrtSite, UpstreamGradient,
};
use crate::gaussian::{
    conditional_mean, reparameterise, sample_standard_normal, ConditionalGaussian,
    DiagGaussianParams, RngStream,
};
use crate::harness::oracle::{PinvOracle, QuadraticOracle, SiteLayout};
use crate::harness::report::Check;
use crate::harness::sites::{random_quadratic, random_sweep_matrix, random_theta};
use crate::harness::stats::{paired_variance_difference, EstimatorStats};
use crate::linalg::{matvec, CgConfig, DenseMatrix, DenseVector};
use crate::nets::{nll, Activation, BiasMode, LayerNoise, LossKind, Network, NetworkSpec, Targets};

const ORACLE_STREAM: u64 = 0x01;
const PROJECTION_STREAM: u64 = 0x02;
const UNBIASED_STREAM: u64 = 0x03;
const DOMINANCE_STREAM: u64 = 0x04;
const EQUIVALENCE_STREAM: u64 = 0x05;
const CONSISTENCY_STREAM: u64 = 0x06;
const FD_STREAM: u64 = 0x07;

fn rel_inf(diff: &DenseVector, reference: &DenseVector) -> f64 {
    diff.norm_inf() / reference.norm_inf().max(1.0)
}

/// Shape drawn uniformly from `m ∈ 1..=max_m`, `n ∈ 1..=max_n`.
fn random_shape(stream: &RngStream, max_m: usize, max_n: usize) -> (usize, usize) {
    let mut rng = stream.rng();
    (rng.random_range(1..=max_m), rng.random_range(1..=max_n))
}

/// Fitted noise from CG against the Jacobi pseudo-inverse on random sites.
pub fn run_oracle_sweep(count: usize, seed: u64, cfg: &CgConfig) -> Result<Check> {
    let base = RngStream::new(seed, ORACLE_STREAM);
    let mut worst = 0.0f64;
    let mut deficient = 0;
    for k in 0..count as u64 {
        let s = base.derive(k);
        let (m, n) = random_shape(&s.derive(0), 6, 12);
        let a = random_sweep_matrix(m, n, &s.derive(1));
        let eps = sample_standard_normal(n, &s.derive(2));
        let oracle = PinvOracle::new(&a)?;
        if oracle.rank() < m.min(n) {
            deficient += 1;
        }
        let via_cg = conditional_mean(&a, &matvec(&a, &eps)?, cfg)?;
        worst = worst.max(via_cg.sub(&oracle.pinv_project(&eps)?).norm_inf());
    }
    Ok(Check::at_most(
        "oracle_equivalence",
        worst,
        1e-8,
        format!("max |eps*_cg - eps*_pinv| over {count} sites ({deficient} rank-deficient)"),
    ))
}

/// Value preservation, norm contraction, orthogonality and idempotence of
/// the fitted noise.
pub fn run_projection_invariants(count: usize, seed: u64, cfg: &CgConfig) -> Result<Vec<Check>> {
    let base = RngStream::new(seed, PROJECTION_STREAM);
    let (mut preserve, mut growth, mut ortho, mut idem) = (0.0f64, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for k in 0..count as u64 {
        let s = base.derive(k);
        let (m, n) = random_shape(&s.derive(0), 6, 12);
        let a = random_sweep_matrix(m, n, &s.derive(1));
        let eps = sample_standard_normal(n, &s.derive(2));
        let z = matvec(&a, &eps)?;
        let star = conditional_mean(&a, &z, cfg)?;
        preserve = preserve.max(rel_inf(&matvec(&a, &star)?.sub(&z), &z));
        growth = growth.max((star.norm() - eps.norm()) / eps.norm().max(f64::MIN_POSITIVE));
        ortho = ortho.max(eps.sub(&star).dot(&star).abs() / eps.dot(&eps).max(1.0));
        let again = conditional_mean(&a, &matvec(&a, &star)?, cfg)?;
        idem = idem.max(rel_inf(&again.sub(&star), &star));
    }
    Ok(vec![
        Check::at_most("projection_preserves_z", preserve, 1e-8, format!("max ‖Aε* − Aε‖∞ / max(1, ‖Aε‖∞), {count} draws")),
        Check::at_most(
            "projection_contracts_norm",
            growth,
            1e-8,
            "max (‖ε*‖ − ‖ε‖)/‖ε‖; slack covers the CG residual when ε lies in the row space",
        ),
        Check::at_most("projection_orthogonal", ortho, 1e-8, "max |⟨ε − ε*, ε*⟩| / max(1, ‖ε‖²)"),
        Check::at_most("projection_idempotent", idem, 1e-8, "max ‖P ε* − ε*‖∞ / max(1, ‖ε*‖∞)"),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessConfig {
    pub samples: usize,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub z_threshold: f64,
}

impl Default for UnbiasednessConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            seed: 0,
            m: 2,
            n: 8,
            z_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    pub max_z: Vec<(EstimatorKind, f64)>,
    pub mutant_max_z: f64,
    pub trivial_max_z: f64,
    pub checks: Vec<Check>,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Monte Carlo means of every estimator against the quadratic oracle's
/// analytic gradient, plus an injected-bias mutant that must be detected.
pub fn run_unbiasedness_test(cfg: &UnbiasednessConfig, cg: &CgConfig) -> Result<UnbiasednessReport> {
    let base = RngStream::new(cfg.seed, UNBIASED_STREAM);
    let oracle = random_quadratic(cfg.m, cfg.n, true, &base.derive(u64::MAX))?;
    let desc = format!("layer site m={} n={}", cfg.m, cfg.n);
    let dim = 2 * cfg.n;
    let mut stats: Vec<EstimatorStats> = EstimatorKind::ALL
        .iter()
        .map(|&k| EstimatorStats::new(k, desc.clone(), dim))
        .collect();
    let mut mutant = EstimatorStats::new(EstimatorKind::R2g2, format!("{desc}, eps* scaled by 0.9"), dim);
    for r in 0..cfg.samples as u64 {
        let eps = sample_standard_normal(cfg.n, &base.derive(r));
        let draw = oracle.paired_sample(&eps, cg)?;
        let lrt = draw.lrt.as_ref().ok_or_else(|| Error::Config("layer site expected".into()))?;
        for s in &mut stats {
            let g = match s.estimator {
                EstimatorKind::Score => &draw.score,
                EstimatorKind::Rt => &draw.rt,
                EstimatorKind::Lrt => lrt,
                EstimatorKind::R2g2 => &draw.r2g2,
            };
            s.push(&g.flatten());
        }
        let mut biased = draw.trace.clone();
        biased.eps_star = biased.eps_star.scale(0.9);
        let z = matvec(oracle.site().w(), &reparameterise(oracle.site().theta(), &eps)?)?;
        mutant.push(&r2g2_gradient(oracle.site(), &oracle.upstream(&z), &biased)?.flatten());
    }
    let (t_mu, t_tau) = oracle.analytic_gradient();
    let truth: Vec<f64> = t_mu.iter().chain(t_tau.iter()).copied().collect();
    let max_z: Vec<(EstimatorKind, f64)> = stats.iter().map(|s| (s.estimator, max_abs(&s.z_scores(&truth)))).collect();
    let mutant_max_z = max_abs(&mutant.z_scores(&truth));
    let trivial_max_z = trivial_site_z(cg)?;

    let mut checks: Vec<Check> = max_z
        .iter()
        .map(|(k, z)| {
            Check::at_most(
                format!("unbiased_{k}"),
                *z,
                cfg.z_threshold,
                format!("max |z| over {dim} coordinates, {} draws", cfg.samples),
            )
        })
        .collect();
    checks.push(Check::at_least(
        "unbiased_mutant_detected",
        mutant_max_z,
        cfg.z_threshold,
        "R2-G2 with 0.9·ε* must exceed the threshold",
    ));
    checks.push(Check::at_most(
        "unbiased_trivial_site",
        trivial_max_z,
        1e-12,
        "n = 1 linear site, μ-gradient of RT and R2-G2",
    ));
    Ok(UnbiasednessReport {
        max_z,
        mutant_max_z,
        trivial_max_z,
        checks,
    })
}

/// On a linear loss with `n = 1` the μ-gradient is the constant `Wᵀb`.
fn trivial_site_z(cg: &CgConfig) -> Result<f64> {
    let theta = DiagGaussianParams::from_variances(DenseVector::new(vec![0.4])?, &[0.8])?;
    let site = LinearMapContext::new(DenseMatrix::from_rows(&[[0.7]])?, theta)?;
    let oracle = QuadraticOracle::new(DenseMatrix::zeros(1, 1), DenseVector::new(vec![1.3])?, site, SiteLayout::Dense)?;
    let base = RngStream::new(0, UNBIASED_STREAM).derive(u64::MAX - 1);
    let mut rt = EstimatorStats::new(EstimatorKind::Rt, "trivial", 1);
    let mut rb = EstimatorStats::new(EstimatorKind::R2g2, "trivial", 1);
    for r in 0..1000 {
        let draw = oracle.paired_sample(&sample_standard_normal(1, &base.derive(r)), cg)?;
        rt.push(draw.rt.d_mu.as_slice());
        rb.push(draw.r2g2.d_mu.as_slice());
    }
    let truth = oracle.analytic_gradient().0;
    Ok(max_abs(&rt.z_scores(truth.as_slice())).max(max_abs(&rb.z_scores(truth.as_slice()))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceConfig {
    pub draws: usize,
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub sites: usize,
    pub slack_se: f64,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        Self {
            draws: 10_000,
            seed: 0,
            m: 2,
            n: 8,
            sites: 4,
            slack_se: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominanceReport {
    /// Largest `(var_R2G2 − var_RT) / SE` over all τ coordinates and sites.
    pub max_excess_se: f64,
    /// Mean over coordinates of `var_R2G2 / var_RT`.
    pub mean_ratio: f64,
    pub mu_bit_identical: bool,
    pub full_rank_max_rel_diff: f64,
    pub checks: Vec<Check>,
}

/// Paired variance comparison of the τ-blocks on rank-deficient dense sites,
/// and exact coincidence on full-column-rank sites.
pub fn run_variance_dominance(cfg: &DominanceConfig, cg: &CgConfig) -> Result<DominanceReport> {
    let base = RngStream::new(cfg.seed, DOMINANCE_STREAM);
    let mut max_excess = f64::NEG_INFINITY;
    let mut ratios = Vec::new();
    let mut mu_identical = true;
    for site in 0..cfg.sites as u64 {
        let s = base.derive(site);
        let oracle = random_quadratic(cfg.m, cfg.n, false, &s.derive(u64::MAX))?;
        let mut rt_tau = vec![Vec::with_capacity(cfg.draws); cfg.n];
        let mut rb_tau = vec![Vec::with_capacity(cfg.draws); cfg.n];
        for r in 0..cfg.draws as u64 {
            let draw = oracle.paired_sample(&sample_standard_normal(cfg.n, &s.derive(r)), cg)?;
            mu_identical &= bits_equal(&draw.rt.d_mu, &draw.r2g2.d_mu);
            for i in 0..cfg.n {
                rt_tau[i].push(draw.rt.d_tau[i]);
                rb_tau[i].push(draw.r2g2.d_tau[i]);
            }
        }
        for i in 0..cfg.n {
            let (diff, se) = paired_variance_difference(&rb_tau[i], &rt_tau[i]);
            let excess = if se > 0.0 {
                diff / se
            } else if diff <= 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            max_excess = max_excess.max(excess);
            ratios.push(sample_variance(&rb_tau[i]) / sample_variance(&rt_tau[i]));
        }
    }
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    let full_rank_max_rel_diff = full_rank_coincidence(cfg, cg)?;
    let checks = vec![
        Check::at_most(
            "dominance_tau_variance",
            max_excess,
            cfg.slack_se,
            format!(
                "max (var_r2g2 − var_rt)/SE over {} sites × {} coords, {} paired draws; mean ratio {:.3}",
                cfg.sites, cfg.n, cfg.draws, mean_ratio
            ),
        ),
        Check::flag("dominance_mu_bit_identical", mu_identical, "RT and R2-G2 μ-blocks"),
        Check::at_most(
            "dominance_full_rank_coincide",
            full_rank_max_rel_diff,
            1e-9,
            "max relative τ-gradient difference on full-column-rank sites",
        ),
    ];
    Ok(DominanceReport {
        max_excess_se: max_excess,
        mean_ratio,
        mu_bit_identical: mu_identical,
        full_rank_max_rel_diff,
        checks,
    })
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn bits_equal(a: &DenseVector, b: &DenseVector) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Sites with `m ≥ n` have `ε* = ε`, so every draw gives the same gradient.
fn full_rank_coincidence(cfg: &DominanceConfig, cg: &CgConfig) -> Result<f64> {
    let base = RngStream::new(cfg.seed, DOMINANCE_STREAM).derive(u64::MAX - 7);
    let mut worst = 0.0f64;
    for site in 0..cfg.sites as u64 {
        let s = base.derive(site);
        let oracle = random_quadratic(cfg.n, cfg.m.max(2), false, &s.derive(u64::MAX))?;
        for r in 0..(cfg.draws / 10).max(10) as u64 {
            let draw = oracle.paired_sample(&sample_standard_normal(oracle.site().n(), &s.derive(r)), cg)?;
            for i in 0..draw.rt.d_tau.len() {
                let (a, b) = (draw.rt.d_tau[i], draw.r2g2.d_tau[i]);
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub triples: usize,
    pub seed: u64,
    pub max_n: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            triples: 1000,
            seed: 0,
            max_n: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub zero_input_rejected: bool,
    pub symmetric_spread: f64,
    pub checks: Vec<Check>,
}

/// R2-G2 on one unit's weights and LRT with `ξ` recovered from `z`.
pub fn matched_pair(
    x: &DenseVector,
    theta: &DiagGaussianParams,
    eps: &DenseVector,
    upstream: f64,
    cg: &CgConfig,
) -> Result<(GradientEstimate, GradientEstimate)> {
    let ctx = LinearMapContext::from_layer(x, std::slice::from_ref(theta))?;
    let trace = forward_r2g2(&ctx, eps, cg)?;
    let z = DenseVector::new(vec![x.dot(&reparameterise(theta, eps)?)])?;
    let up = UpstreamGradient::new(DenseVector::new(vec![upstream])?);
    let rb = r2g2_gradient(&ctx, &up, &trace)?;
    let site = LrtSite::new(x.clone(), vec![theta.clone()], DenseVector::zeros(1))?;
    let site = site.with_xi(derive_xi_from_z(&site, &z)?)?;
    let lrt = GradientEstimate::concat(&lrt_gradient(&site, &up)?).expect("one unit");
    Ok((rb, lrt))
}

pub fn run_equivalence_test(cfg: &EquivalenceConfig, cg: &CgConfig) -> Result<EquivalenceReport> {
    let base = RngStream::new(cfg.seed, EQUIVALENCE_STREAM);
    let mut worst = 0.0f64;
    for k in 0..cfg.triples as u64 {
        let mut rng = base.derive(k).rng();
        let n = rng.random_range(1..=cfg.max_n);
        let x = DenseVector::from_fn(n, |_| rng.sample(StandardNormal));
        let theta = random_theta(n, &mut rng);
        let eps = DenseVector::from_fn(n, |_| rng.sample(StandardNormal));
        let u: f64 = rng.sample(StandardNormal);
        let (rb, lrt) = matched_pair(&x, &theta, &eps, u, cg)?;
        worst = worst.max(rb.max_abs_diff(&lrt));
    }

    let zero = LrtSite::new(DenseVector::zeros(4), vec![DiagGaussianParams::standard(4)], DenseVector::zeros(1))?;
    let zero_input_rejected = derive_xi_from_z(&zero, &DenseVector::zeros(1)).is_err()
        && lrt_gradient(&zero, &UpstreamGradient::new(DenseVector::new(vec![1.0])?)).is_err();

    let n = 6;
    let theta = DiagGaussianParams::from_variances(DenseVector::from_fn(n, |i| 0.1 * i as f64), &[0.7; 6])?;
    let eps = sample_standard_normal(n, &base.derive(u64::MAX));
    let (rb, lrt) = matched_pair(&DenseVector::new(vec![1.0; 6])?, &theta, &eps, 0.9, cg)?;
    let spread = |g: &GradientEstimate| {
        let lo = g.d_tau.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.d_tau.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let symmetric_spread = spread(&rb).max(spread(&lrt));

    let checks = vec![
        Check::at_most(
            "equivalence_lrt_r2g2",
            worst,
            1e-9,
            format!("max |LRT − R2-G2| over {} m = 1 sites, n ≤ {}", cfg.triples, cfg.max_n),
        ),
        Check::flag("equivalence_zero_input_rejected", zero_input_rejected, "x = 0 has no pre-activation variance"),
        Check::at_most("equivalence_symmetric_tau", symmetric_spread, 1e-12, "equal σ, x = 1: spread of d_tau"),
    ];
    Ok(EquivalenceReport {
        max_deviation: worst,
        zero_input_rejected,
        symmetric_spread,
        checks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub max_z: f64,
    pub check: Check,
}

/// Averages RT gradients with `ε` drawn from `ε | Aε = z` and compares them
/// with the closed-form R2-G2 gradient for the same `z`.
pub fn run_conditional_consistency(draws: usize, seed: u64, cg: &CgConfig) -> Result<ConsistencyReport> {
    let w = DenseMatrix::from_rows(&[[0.8, -0.4, 1.1, 0.3], [0.2, 0.9, -0.6, 1.4]])?;
    let theta = DiagGaussianParams::from_variances(DenseVector::new(vec![0.3, -0.5, 0.1, 0.7])?, &[0.6, 1.3, 0.4, 0.9])?;
    let ctx = LinearMapContext::new(w.clone(), theta.clone())?;
    let h = DenseMatrix::from_rows(&[[1.5, 0.2], [0.2, 0.8]])?;
    let oracle = QuadraticOracle::new(h, DenseVector::new(vec![0.4, -0.3])?, ctx.clone(), SiteLayout::Dense)?;

    let base = RngStream::new(seed, CONSISTENCY_STREAM);
    let eps0 = sample_standard_normal(4, &base.derive(u64::MAX));
    let trace = forward_r2g2(&ctx, &eps0, cg)?;
    let z_full = matvec(&w, &reparameterise(&theta, &eps0)?)?;
    let up = oracle.upstream(&z_full);
    let closed = r2g2_gradient(&ctx, &up, &trace)?;

    let cond = ConditionalGaussian::new(ctx.a().clone(), &trace.z, cg.clone())?;
    let mut stats = EstimatorStats::new(EstimatorKind::Rt, "2x4 conditional", 8);
    for r in 0..draws as u64 {
        let eps = cond.sample(&base.derive(r))?;
        stats.push(&rt_gradient(&ctx, &up, &eps)?.flatten());
    }
    let max_z = max_abs(&stats.z_scores(&closed.flatten()));
    Ok(ConsistencyReport {
        max_z,
        check: Check::at_most(
            "conditional_consistency",
            max_z,
            4.0,
            format!("max |z| of mean RT gradient under ε | z vs R2-G2, {draws} draws"),
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDifferenceConfig {
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
    pub widths: Vec<usize>,
    pub batch: usize,
}

impl Default for FiniteDifferenceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            threshold: 1e-4,
            widths: vec![5, 8, 3],
            batch: 3,
        }
    }
}

/// Denominator floor for the per-coordinate relative error, so that
/// near-zero gradients are compared on an absolute scale.
pub const FD_RELATIVE_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_RELATIVE_FLOOR)
}

/// Central differences of the batch NLL against `Network::backward` for a
/// 2-layer tanh network with fixed noise. R2-G2 layers are replayed with
/// their fitted noise frozen.
pub fn run_finite_difference_check(cfg: &FiniteDifferenceConfig, cg: &CgConfig) -> Result<Vec<(EstimatorKind, Check)>> {
    let base = RngStream::new(cfg.seed, FD_STREAM);
    let spec = NetworkSpec {
        widths: cfg.widths.clone(),
        hidden: Activation::Tanh,
        output: Activation::Identity,
        mode: EstimatorKind::Rt,
        bias: BiasMode::Deterministic,
    };
    let mut net = Network::new(&spec, &base.derive(0))?;
    net.set_cg(cg.clone())?;
    let mut params = net.params();
    {
        let mut rng = base.derive(1).rng();
        for r in net.layer_ranges() {
            for v in &mut params[r.log_tau] {
                *v = rng.random_range(-2.0..-0.5);
            }
            for v in &mut params[r.bias] {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    net.set_params(&params)?;
    let in_dim = cfg.widths[0];
    let classes = *cfg.widths.last().expect("widths");
    let mut rng = base.derive(2).rng();
    let x = DenseMatrix::from_fn(cfg.batch, in_dim, |_, _| rng.sample(StandardNormal));
    let targets = Targets::Labels((0..cfg.batch).map(|b| b % classes).collect());

    let mut out = Vec::new();
    for mode in [EstimatorKind::Rt, EstimatorKind::Lrt, EstimatorKind::R2g2] {
        let mut net = net.with_mode(mode)?;
        let tape = net.forward(&x, &base.derive(3))?;
        let noise: Vec<LayerNoise> = tape.frozen_noise();
        let (_, d_preds) = nll(tape.predictions(), &targets, LossKind::SoftmaxNll)?;
        let analytic = net.backward(&tape, &d_preds)?;
        let mut eval = |p: &[f64]| -> Result<f64> {
            net.set_params(p)?;
            let t = net.forward_with_noise(&x, &noise)?;
            Ok(nll(t.predictions(), &targets, LossKind::SoftmaxNll)?.0)
        };
        let mut worst = 0.0f64;
        for k in 0..params.len() {
            let mut p = params.clone();
            p[k] += cfg.step;
            let up = eval(&p)?;
            p[k] = params[k] - cfg.step;
            let down = eval(&p)?;
            let fd = (up - down) / (2.0 * cfg.step);
            worst = worst.max(relative_error(analytic[k], fd));
        }
        eval(&params)?;
        out.push((
            mode,
            Check::at_most(
                format!("finite_difference_{mode}"),
                worst,
                cfg.threshold,
                format!("max relative error over {} parameters, step {:e}", params.len(), cfg.step),
            ),
        ));
    }
    Ok(out)
}
