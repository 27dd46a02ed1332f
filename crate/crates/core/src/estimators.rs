//! Single-sample gradient estimators for one stochastic linear site
//! `ℓ(g(ε, θ)) = ℓ̃(W g(ε, θ))`.
//!
//! All estimators report gradients with respect to `(μ, τ)`; conversion to the
//! `log τ` storage happens in [`crate::nets`].
//!
//! | estimator | μ-block        | τ-block                                   |
//! |-----------|----------------|-------------------------------------------|
//! | RT        | `Wᵀ u`         | `(Wᵀ u)_i · ε_i / (2σ_i)`                 |
//! | R2-G2     | `Wᵀ u`         | `(Wᵀ u)_i · ε*_i / (2σ_i)`, `ε* = P ε`    |
//! | LRT       | `u_i · x`      | `u_i · ξ_i (x ⊙ x) / (2 s_i)`             |
//! | score     | `ℓ (v − μ)/τ`  | `ℓ (−1/(2τ) + (v − μ)²/(2τ²))`            |
//!
//! where `u = ∂ℓ̃/∂z`, `P = Aᵀ(AAᵀ)†A` with `A = W diag(σ)`, and
//! `s_i² = Σ_j x_j² τ_j⁽ⁱ⁾`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussianParams, RngStream};
use crate::linalg::{
    conjugate_gradient, matvec, matvec_transpose, CgConfig, DenseMatrix, DenseVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Score,
    Rt,
    Lrt,
    R2g2,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Score,
        EstimatorKind::Rt,
        EstimatorKind::Lrt,
        EstimatorKind::R2g2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Score => "score",
            EstimatorKind::Rt => "rt",
            EstimatorKind::Lrt => "lrt",
            EstimatorKind::R2g2 => "r2g2",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "").as_str() {
            "score" | "reinforce" => Ok(EstimatorKind::Score),
            "rt" => Ok(EstimatorKind::Rt),
            "lrt" => Ok(EstimatorKind::Lrt),
            "r2g2" => Ok(EstimatorKind::R2g2),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// One Rao-Blackwellisation site: the downstream linear map `W` (m×n), the
/// variational parameters over its n inputs, and the cached `A = W diag(σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMapContext {
    w: DenseMatrix,
    theta: DiagGaussianParams,
    a: DenseMatrix,
    sigma: DenseVector,
}

impl LinearMapContext {
    pub fn new(w: DenseMatrix, theta: DiagGaussianParams) -> Result<Self> {
        if w.rows() == 0 || w.cols() == 0 {
            return Err(Error::Dimension {
                context: "LinearMapContext needs m, n >= 1",
                expected: 1,
                got: 0,
            });
        }
        if w.cols() != theta.dim() {
            return Err(Error::Dimension {
                context: "LinearMapContext theta",
                expected: w.cols(),
                got: theta.dim(),
            });
        }
        let sigma = theta.sigma();
        let a = w.scale_columns(sigma.as_slice())?;
        Ok(Self { w, theta, a, sigma })
    }

    /// The site induced by one dense layer on one input `x`: `m` output
    /// units, each with its own weight row, so `W = blockdiag(xᵀ, …, xᵀ)` over
    /// the concatenated rows.
    pub fn from_layer(x: &DenseVector, rows: &[DiagGaussianParams]) -> Result<Self> {
        let n = x.len();
        if let Some(bad) = rows.iter().find(|r| r.dim() != n) {
            return Err(Error::Dimension {
                context: "LinearMapContext::from_layer row",
                expected: n,
                got: bad.dim(),
            });
        }
        let m = rows.len();
        let w = DenseMatrix::from_fn(m, m * n, |i, k| {
            if k / n == i {
                x[k % n]
            } else {
                0.0
            }
        });
        Self::new(w, DiagGaussianParams::concat(rows))
    }

    pub fn set_theta(&mut self, theta: DiagGaussianParams) -> Result<()> {
        *self = Self::new(std::mem::replace(&mut self.w, DenseMatrix::zeros(0, 0)), theta)?;
        Ok(())
    }

    pub fn w(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn theta(&self) -> &DiagGaussianParams {
        &self.theta
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn sigma(&self) -> &DenseVector {
        &self.sigma
    }

    pub fn m(&self) -> usize {
        self.w.rows()
    }

    pub fn n(&self) -> usize {
        self.w.cols()
    }
}

/// `∂ℓ̃/∂z` evaluated at the site's pre-activations.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamGradient(pub DenseVector);

impl UpstreamGradient {
    pub fn new(d_ltilde_dz: DenseVector) -> Self {
        Self(d_ltilde_dz)
    }

    pub fn as_vector(&self) -> &DenseVector {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub d_mu: DenseVector,
    /// Gradient with respect to the variances τ.
    pub d_tau: DenseVector,
    pub estimator_id: EstimatorKind,
    pub noise_tag: Option<RngStream>,
}

impl GradientEstimate {
    pub fn with_noise_tag(mut self, tag: RngStream) -> Self {
        self.noise_tag = Some(tag);
        self
    }

    /// `[d_mu | d_tau]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.d_mu.iter().chain(self.d_tau.iter()).copied().collect()
    }

    /// Concatenates per-unit estimates (as returned by [`lrt_gradient`]) into
    /// one estimate over the stacked parameter vector.
    pub fn concat(parts: &[GradientEstimate]) -> Option<GradientEstimate> {
        let first = parts.first()?;
        Some(GradientEstimate {
            d_mu: DenseVector::from_vec(parts.iter().flat_map(|p| p.d_mu.iter().copied()).collect()),
            d_tau: DenseVector::from_vec(parts.iter().flat_map(|p| p.d_tau.iter().copied()).collect()),
            estimator_id: first.estimator_id,
            noise_tag: first.noise_tag,
        })
    }

    pub fn max_abs_diff(&self, other: &GradientEstimate) -> f64 {
        self.d_mu
            .sub(&other.d_mu)
            .norm_inf()
            .max(self.d_tau.sub(&other.d_tau).norm_inf())
    }
}

/// Values computed by [`forward_r2g2`].
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticLayerTrace {
    pub eps: DenseVector,
    /// `A ε`
    pub z: DenseVector,
    pub beta_star: DenseVector,
    /// `Aᵀ β*`
    pub eps_star: DenseVector,
    /// `A ε*`
    pub z_star: DenseVector,
    pub cg_iters: usize,
}

impl StochasticLayerTrace {
    /// The value handed downstream: `stop_gradient(z − z*) + z*`, which is `z`.
    pub fn propagated_value(&self) -> &DenseVector {
        &self.z
    }
}

/// Checks the shared preconditions of the pathwise estimators and returns
/// `Wᵀ u`.
fn pathwise_mu_block(
    ctx: &LinearMapContext,
    up: &UpstreamGradient,
    noise: &DenseVector,
) -> Result<DenseVector> {
    if up.0.len() != ctx.m() {
        return Err(Error::Dimension {
            context: "upstream gradient",
            expected: ctx.m(),
            got: up.0.len(),
        });
    }
    if noise.len() != ctx.n() {
        return Err(Error::Dimension {
            context: "noise vector",
            expected: ctx.n(),
            got: noise.len(),
        });
    }
    if let Some(index) = ctx.sigma.iter().position(|&s| s == 0.0) {
        return Err(Error::DegenerateVariance { index });
    }
    Ok(matvec_transpose(&ctx.w, &up.0)?)
}

fn pathwise_estimate(
    ctx: &LinearMapContext,
    up: &UpstreamGradient,
    noise: &DenseVector,
    estimator_id: EstimatorKind,
) -> Result<GradientEstimate> {
    let d_mu = pathwise_mu_block(ctx, up, noise)?;
    let d_tau = DenseVector::from_fn(ctx.n(), |i| d_mu[i] * noise[i] / (2.0 * ctx.sigma[i]));
    Ok(GradientEstimate {
        d_mu,
        d_tau,
        estimator_id,
        noise_tag: None,
    })
}

/// Reparameterisation gradient for a fixed noise draw `ε`.
pub fn rt_gradient(
    ctx: &LinearMapContext,
    up: &UpstreamGradient,
    eps: &DenseVector,
) -> Result<GradientEstimate> {
    pathwise_estimate(ctx, up, eps, EstimatorKind::Rt)
}

/// R2-G2 gradient: the RT formula with `ε` replaced by the fitted noise `ε*`
/// recorded in `trace`.
pub fn r2g2_gradient(
    ctx: &LinearMapContext,
    up: &UpstreamGradient,
    trace: &StochasticLayerTrace,
) -> Result<GradientEstimate> {
    pathwise_estimate(ctx, up, &trace.eps_star, EstimatorKind::R2g2)
}

/// Forward pass of an R2-G2 site: `z = Aε`, `β* = CG(A, z)`, `ε* = Aᵀβ*`,
/// `z* = Aε*`.
pub fn forward_r2g2(
    ctx: &LinearMapContext,
    eps: &DenseVector,
    cfg: &CgConfig,
) -> Result<StochasticLayerTrace> {
    if eps.len() != ctx.n() {
        return Err(Error::Dimension {
            context: "forward_r2g2 eps",
            expected: ctx.n(),
            got: eps.len(),
        });
    }
    let z = matvec(&ctx.a, eps)?;
    let sol = conjugate_gradient(&ctx.a, &z, cfg)?;
    let eps_star = matvec_transpose(&ctx.a, &sol.beta_star)?;
    let z_star = matvec(&ctx.a, &eps_star)?;
    Ok(StochasticLayerTrace {
        eps: eps.clone(),
        z,
        beta_star: sol.beta_star,
        eps_star,
        z_star,
        cg_iters: sol.iters,
    })
}

/// One input row `x` feeding `m` output units with independent weight rows,
/// together with the local noise `ξ` (one standard normal per unit).
#[derive(Debug, Clone, PartialEq)]
pub struct LrtSite {
    x: DenseVector,
    theta_rows: Vec<DiagGaussianParams>,
    xi: DenseVector,
}

impl LrtSite {
    pub fn new(x: DenseVector, theta_rows: Vec<DiagGaussianParams>, xi: DenseVector) -> Result<Self> {
        if let Some(bad) = theta_rows.iter().find(|r| r.dim() != x.len()) {
            return Err(Error::Dimension {
                context: "LrtSite theta row",
                expected: x.len(),
                got: bad.dim(),
            });
        }
        if xi.len() != theta_rows.len() {
            return Err(Error::Dimension {
                context: "LrtSite xi",
                expected: theta_rows.len(),
                got: xi.len(),
            });
        }
        Ok(Self { x, theta_rows, xi })
    }

    pub fn x(&self) -> &DenseVector {
        &self.x
    }

    pub fn theta_rows(&self) -> &[DiagGaussianParams] {
        &self.theta_rows
    }

    pub fn xi(&self) -> &DenseVector {
        &self.xi
    }

    pub fn with_xi(&self, xi: DenseVector) -> Result<Self> {
        Self::new(self.x.clone(), self.theta_rows.clone(), xi)
    }

    pub fn units(&self) -> usize {
        self.theta_rows.len()
    }

    /// Mean `xᵀμ⁽ⁱ⁾` and standard deviation `(Σ_j x_j² τ_j⁽ⁱ⁾)^½` of unit `i`.
    pub fn preactivation_moments(&self, unit: usize) -> (f64, f64) {
        let row = &self.theta_rows[unit];
        let mean = self.x.dot(row.mu());
        let tau = row.tau();
        let var: f64 = self.x.iter().zip(tau.iter()).map(|(x, t)| x * x * t).sum();
        (mean, var.sqrt())
    }

    fn checked_moments(&self, unit: usize) -> Result<(f64, f64)> {
        let (mean, sd) = self.preactivation_moments(unit);
        if sd == 0.0 {
            return Err(Error::DegeneratePreactivationVariance { unit });
        }
        Ok((mean, sd))
    }

    /// Locally reparameterised pre-activations `z_i = xᵀμ⁽ⁱ⁾ + s_i ξ_i`.
    pub fn local_reparameterise(&self) -> DenseVector {
        DenseVector::from_fn(self.units(), |i| {
            let (mean, sd) = self.preactivation_moments(i);
            mean + sd * self.xi[i]
        })
    }
}

/// Local reparameterisation gradient, one estimate per output unit.
pub fn lrt_gradient(site: &LrtSite, up: &UpstreamGradient) -> Result<Vec<GradientEstimate>> {
    if up.0.len() != site.units() {
        return Err(Error::Dimension {
            context: "lrt upstream gradient",
            expected: site.units(),
            got: up.0.len(),
        });
    }
    (0..site.units())
        .map(|i| {
            let (_, sd) = site.checked_moments(i)?;
            let u = up.0[i];
            let tau_scale = u * 0.5 / sd * site.xi[i];
            Ok(GradientEstimate {
                d_mu: site.x.scale(u),
                d_tau: site.x.map(|x| tau_scale * x * x),
                estimator_id: EstimatorKind::Lrt,
                noise_tag: None,
            })
        })
        .collect()
}

/// Inverts the local reparameterisation: `ξ_i = (z_i − xᵀμ⁽ⁱ⁾) / s_i`.
pub fn derive_xi_from_z(site: &LrtSite, z: &DenseVector) -> Result<DenseVector> {
    if z.len() != site.units() {
        return Err(Error::Dimension {
            context: "derive_xi_from_z",
            expected: site.units(),
            got: z.len(),
        });
    }
    let xi = (0..site.units())
        .map(|i| {
            let (mean, sd) = site.checked_moments(i)?;
            Ok((z[i] - mean) / sd)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DenseVector::from_vec(xi))
}

/// Score-function (REINFORCE) gradient `ℓ(v) ∇_θ log q_θ(v)`.
pub fn score_gradient(
    theta: &DiagGaussianParams,
    loss_value: f64,
    v: &DenseVector,
) -> Result<GradientEstimate> {
    if v.len() != theta.dim() {
        return Err(Error::Dimension {
            context: "score_gradient",
            expected: theta.dim(),
            got: v.len(),
        });
    }
    let tau = theta.tau();
    if let Some(index) = tau.iter().position(|&t| t == 0.0) {
        return Err(Error::DegenerateVariance { index });
    }
    let diff = v.sub(theta.mu());
    Ok(GradientEstimate {
        d_mu: DenseVector::from_fn(v.len(), |i| loss_value * diff[i] / tau[i]),
        d_tau: DenseVector::from_fn(v.len(), |i| {
            loss_value * (-0.5 / tau[i] + diff[i] * diff[i] / (2.0 * tau[i] * tau[i]))
        }),
        estimator_id: EstimatorKind::Score,
        noise_tag: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{conditional_mean, reparameterise, sample_standard_normal};

    fn vecd(v: &[f64]) -> DenseVector {
        DenseVector::new(v.to_vec()).unwrap()
    }

    fn params(mu: &[f64], tau: &[f64]) -> DiagGaussianParams {
        DiagGaussianParams::from_variances(vecd(mu), tau).unwrap()
    }

    fn up(v: &[f64]) -> UpstreamGradient {
        UpstreamGradient::new(vecd(v))
    }

    #[test]
    fn rt_zero_noise_kills_tau_block() {
        let w = DenseMatrix::from_rows(&[[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]).unwrap();
        let ctx = LinearMapContext::new(w.clone(), params(&[0.1, 0.2, 0.3], &[1.0, 2.0, 0.5])).unwrap();
        let g = rt_gradient(&ctx, &up(&[1.0, -2.0]), &DenseVector::zeros(3)).unwrap();
        assert_eq!(g.d_tau, DenseVector::zeros(3));
        assert_eq!(g.d_mu, matvec_transpose(&w, &vecd(&[1.0, -2.0])).unwrap());
        assert_eq!(g.estimator_id, EstimatorKind::Rt);
    }

    #[test]
    fn rt_hand_example() {
        let ctx = LinearMapContext::new(DenseMatrix::identity(2), params(&[0.0, 0.0], &[4.0, 1.0])).unwrap();
        let g = rt_gradient(&ctx, &up(&[1.0, 0.0]), &vecd(&[1.0, 0.0])).unwrap();
        assert_eq!(g.d_mu.as_slice(), &[1.0, 0.0]);
        assert_eq!(g.d_tau.as_slice(), &[0.25, 0.0]);
    }

    #[test]
    fn degenerate_sigma_is_rejected() {
        // exp(½ · −2000) underflows to exactly zero.
        let theta = DiagGaussianParams::new(vecd(&[0.0, 0.0]), vecd(&[0.0, -2000.0])).unwrap();
        let ctx = LinearMapContext::new(DenseMatrix::identity(2), theta).unwrap();
        assert!(matches!(
            rt_gradient(&ctx, &up(&[1.0, 1.0]), &vecd(&[1.0, 1.0])),
            Err(Error::DegenerateVariance { index: 1 })
        ));
    }

    #[test]
    fn forward_r2g2_identity_site() {
        let ctx = LinearMapContext::new(DenseMatrix::identity(3), DiagGaussianParams::standard(3)).unwrap();
        let eps = vecd(&[0.3, -1.0, 2.0]);
        let t = forward_r2g2(&ctx, &eps, &CgConfig::default()).unwrap();
        assert!(t.eps_star.sub(&eps).norm_inf() < 1e-14);
        assert!(t.z_star.sub(&t.z).norm_inf() < 1e-14);
        assert!(t.cg_iters <= 3);
        assert_eq!(t.propagated_value(), &t.z);
    }

    #[test]
    fn forward_r2g2_kernel_draw() {
        let w = DenseMatrix::from_rows(&[[1.0, 1.0, 0.0]]).unwrap();
        let ctx = LinearMapContext::new(w, DiagGaussianParams::standard(3)).unwrap();
        let t = forward_r2g2(&ctx, &vecd(&[2.0, -2.0, 1.0]), &CgConfig::default()).unwrap();
        assert_eq!(t.z, DenseVector::zeros(1));
        assert_eq!(t.eps_star, DenseVector::zeros(3));
        assert_eq!(t.z_star, DenseVector::zeros(1));
        assert_eq!(t.cg_iters, 0);
    }

    #[test]
    fn forward_r2g2_hand_solve() {
        let w = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
        let ctx = LinearMapContext::new(w, DiagGaussianParams::standard(3)).unwrap();
        let eps = vecd(&[1.0, 1.0, 1.0]);
        let t = forward_r2g2(&ctx, &eps, &CgConfig::default()).unwrap();
        assert_eq!(t.z.as_slice(), &[1.0, 2.0]);
        assert!(t.beta_star.sub(&vecd(&[0.0, 1.0])).norm_inf() < 1e-12);
        assert!(t.eps_star.sub(&vecd(&[1.0, 1.0, 0.0])).norm_inf() < 1e-12);
        assert!(t.z_star.sub(&vecd(&[1.0, 2.0])).norm_inf() < 1e-12);
        assert!(t.eps_star.norm() < eps.norm());
    }

    #[test]
    fn r2g2_equals_rt_on_full_column_rank_site() {
        let w = DenseMatrix::from_rows(&[[1.0, 0.5], [-0.3, 2.0], [0.7, 0.1]]).unwrap();
        let ctx = LinearMapContext::new(w, params(&[0.2, -0.1], &[0.5, 1.5])).unwrap();
        let eps = vecd(&[0.8, -1.3]);
        let u = up(&[0.4, -0.2, 1.1]);
        let t = forward_r2g2(&ctx, &eps, &CgConfig::default()).unwrap();
        let rt = rt_gradient(&ctx, &u, &eps).unwrap();
        let rb = r2g2_gradient(&ctx, &u, &t).unwrap();
        assert_eq!(rt.d_mu, rb.d_mu);
        assert!(rt.d_tau.sub(&rb.d_tau).norm_inf() < 1e-12);
    }

    #[test]
    fn lrt_examples() {
        let site = LrtSite::new(vecd(&[1.0, 0.0]), vec![params(&[0.0, 0.0], &[1.0, 1.0])], vecd(&[0.0])).unwrap();
        let g = lrt_gradient(&site, &up(&[3.0])).unwrap();
        assert_eq!(g[0].d_tau, DenseVector::zeros(2));

        let site = LrtSite::new(vecd(&[1.0, 0.0]), vec![params(&[0.0, 0.0], &[1.0, 1.0])], vecd(&[1.0])).unwrap();
        let g = lrt_gradient(&site, &up(&[1.0])).unwrap();
        assert_eq!(g[0].d_mu.as_slice(), &[1.0, 0.0]);
        assert_eq!(g[0].d_tau.as_slice(), &[0.5, 0.0]);

        let site = LrtSite::new(vecd(&[1.0, 1.0]), vec![params(&[0.0, 0.0], &[1.0, 1.0])], vecd(&[1.0])).unwrap();
        let g = lrt_gradient(&site, &up(&[2.0])).unwrap();
        let expected = std::f64::consts::FRAC_1_SQRT_2;
        for v in g[0].d_tau.iter() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn lrt_rejects_zero_input() {
        let site = LrtSite::new(DenseVector::zeros(3), vec![DiagGaussianParams::standard(3)], vecd(&[0.5])).unwrap();
        assert!(matches!(
            lrt_gradient(&site, &up(&[1.0])),
            Err(Error::DegeneratePreactivationVariance { unit: 0 })
        ));
        assert!(derive_xi_from_z(&site, &vecd(&[1.0])).is_err());
    }

    #[test]
    fn derive_xi_examples() {
        let theta = params(&[0.5, -1.0], &[0.3, 2.0]);
        let x = vecd(&[1.5, 0.5]);
        let site = LrtSite::new(x.clone(), vec![theta.clone()], vecd(&[0.0])).unwrap();
        let mean = x.dot(theta.mu());
        assert_eq!(derive_xi_from_z(&site, &vecd(&[mean])).unwrap().as_slice(), &[0.0]);

        let site = LrtSite::new(vecd(&[1.0]), vec![params(&[0.0], &[4.0])], vecd(&[0.0])).unwrap();
        assert_eq!(derive_xi_from_z(&site, &vecd(&[2.0])).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn derive_xi_round_trip() {
        let rows = vec![params(&[0.1, 0.2, -0.3], &[0.5, 1.7, 0.2]), params(&[1.0, -2.0, 0.0], &[2.0, 0.1, 0.9])];
        let site = LrtSite::new(vecd(&[0.7, -1.1, 2.3]), rows, vecd(&[0.37, -1.91])).unwrap();
        let z = site.local_reparameterise();
        let xi = derive_xi_from_z(&site, &z).unwrap();
        assert!(xi.sub(site.xi()).norm_inf() < 1e-12);
    }

    #[test]
    fn lrt_matches_r2g2_on_single_unit_site() {
        let theta = params(&[0.3, -0.2, 0.9, 0.0], &[0.4, 1.3, 0.05, 2.2]);
        let x = vecd(&[1.2, -0.4, 0.8, 2.0]);
        let ctx = LinearMapContext::from_layer(&x, std::slice::from_ref(&theta)).unwrap();
        let eps = sample_standard_normal(4, &RngStream::new(3, 1));
        let v = reparameterise(&theta, &eps).unwrap();
        let z = vecd(&[x.dot(&v)]);
        let u = up(&[-0.7]);
        let trace = forward_r2g2(&ctx, &eps, &CgConfig::default()).unwrap();
        let rb = r2g2_gradient(&ctx, &u, &trace).unwrap();

        let site = LrtSite::new(x.clone(), vec![theta], vecd(&[0.0])).unwrap();
        let site = site.with_xi(derive_xi_from_z(&site, &z).unwrap()).unwrap();
        let lrt = GradientEstimate::concat(&lrt_gradient(&site, &u).unwrap()).unwrap();
        assert!(rb.max_abs_diff(&lrt) < 1e-12, "{rb:?} vs {lrt:?}");

        // Same fitted noise straight from the conditional mean of the centred z.
        let centred = vecd(&[z[0] - x.dot(site.theta_rows()[0].mu())]);
        let star = conditional_mean(ctx.a(), &centred, &CgConfig::default()).unwrap();
        assert!(star.sub(&trace.eps_star).norm_inf() < 1e-12);
    }

    #[test]
    fn score_at_mean() {
        let theta = params(&[1.0, -1.0], &[2.0, 0.5]);
        let g = score_gradient(&theta, 3.0, theta.mu()).unwrap();
        assert_eq!(g.d_mu, DenseVector::zeros(2));
        assert!((g.d_tau[0] + 3.0 / 4.0).abs() < 1e-15);
        assert!((g.d_tau[1] + 3.0).abs() < 1e-14);
    }

    #[test]
    fn rt_matches_finite_differences_of_smooth_loss() {
        // ℓ(v) = Σ_k sin((Wv)_k) + ½‖Wv‖², differentiated through v = μ + √τ ε.
        let w = DenseMatrix::from_rows(&[[0.5, -1.0, 0.3], [1.2, 0.4, -0.8]]).unwrap();
        let mu = [0.2, -0.4, 0.7];
        let tau = [0.6, 1.4, 0.3];
        let eps = vecd(&[0.9, -0.3, 1.7]);
        let loss = |mu: &[f64], tau: &[f64]| {
            let theta = params(mu, tau);
            let z = matvec(&w, &reparameterise(&theta, &eps).unwrap()).unwrap();
            z.iter().map(|v| v.sin() + 0.5 * v * v).sum::<f64>()
        };
        let theta = params(&mu, &tau);
        let ctx = LinearMapContext::new(w.clone(), theta.clone()).unwrap();
        let z = matvec(&w, &reparameterise(&theta, &eps).unwrap()).unwrap();
        let u = UpstreamGradient::new(z.map(|v| v.cos() + v));
        let g = rt_gradient(&ctx, &u, &eps).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let (mut p, mut q) = (mu, mu);
            p[i] += h;
            q[i] -= h;
            let fd = (loss(&p, &tau) - loss(&q, &tau)) / (2.0 * h);
            assert!((g.d_mu[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
            let (mut p, mut q) = (tau, tau);
            p[i] += h;
            q[i] -= h;
            let fd = (loss(&mu, &p) - loss(&mu, &q)) / (2.0 * h);
            assert!((g.d_tau[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!("R2-G2".parse::<EstimatorKind>().unwrap(), EstimatorKind::R2g2);
        assert!("nope".parse::<EstimatorKind>().is_err());
    }
}
