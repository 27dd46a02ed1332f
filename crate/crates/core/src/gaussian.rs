//! Diagonal Gaussians, the reparameterisation map and conditional Gaussians
//! given a linear observation `A ε = z`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    conjugate_gradient, matvec, matvec_transpose, CgConfig, DenseMatrix, DenseVector,
};

/// `θ = {μ, τ}` with the variances stored as `log τ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussianParams {
    mu: DenseVector,
    log_tau: DenseVector,
}

impl DiagGaussianParams {
    pub fn new(mu: DenseVector, log_tau: DenseVector) -> Result<Self> {
        if mu.len() != log_tau.len() {
            return Err(Error::Dimension {
                context: "DiagGaussianParams log_tau",
                expected: mu.len(),
                got: log_tau.len(),
            });
        }
        Ok(Self { mu, log_tau })
    }

    /// Builds parameters from variances `τ`, each of which must be positive.
    pub fn from_variances(mu: DenseVector, tau: &[f64]) -> Result<Self> {
        if let Some((index, &value)) = tau
            .iter()
            .enumerate()
            .find(|(_, t)| !(t.is_finite() && **t > 0.0))
        {
            return Err(Error::InvalidVariance { index, value });
        }
        Self::new(mu, DenseVector::from_vec(tau.iter().map(|t| t.ln()).collect()))
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: DenseVector::zeros(dim),
            log_tau: DenseVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DenseVector {
        &self.mu
    }

    pub fn log_tau(&self) -> &DenseVector {
        &self.log_tau
    }

    pub fn tau(&self) -> DenseVector {
        self.log_tau.map(f64::exp)
    }

    /// Standard deviations `σ_i = exp(½ log τ_i)`.
    pub fn sigma(&self) -> DenseVector {
        self.log_tau.map(|lt| (0.5 * lt).exp())
    }

    /// Overwrites the parameters in place from flat slices; rejects
    /// non-finite values.
    pub fn assign(&mut self, mu: &[f64], log_tau: &[f64]) -> Result<()> {
        if mu.len() != self.dim() || log_tau.len() != self.dim() {
            return Err(Error::Dimension {
                context: "DiagGaussianParams::assign",
                expected: self.dim(),
                got: mu.len().min(log_tau.len()),
            });
        }
        self.mu = DenseVector::new(mu.to_vec())?;
        self.log_tau = DenseVector::new(log_tau.to_vec())?;
        Ok(())
    }

    /// The sub-block `[start, start + len)` as its own parameter set.
    pub fn slice(&self, start: usize, len: usize) -> DiagGaussianParams {
        DiagGaussianParams {
            mu: DenseVector::from_vec(self.mu.as_slice()[start..start + len].to_vec()),
            log_tau: DenseVector::from_vec(self.log_tau.as_slice()[start..start + len].to_vec()),
        }
    }

    pub fn concat(parts: &[DiagGaussianParams]) -> DiagGaussianParams {
        let mu = parts.iter().flat_map(|p| p.mu.iter().copied()).collect();
        let log_tau = parts.iter().flat_map(|p| p.log_tau.iter().copied()).collect();
        DiagGaussianParams {
            mu: DenseVector::from_vec(mu),
            log_tau: DenseVector::from_vec(log_tau),
        }
    }
}

/// A named, reproducible random stream.
///
/// Backed by ChaCha8 with `seed` as key and `stream_id` selecting one of 2⁶⁴
/// independent streams, so estimator comparisons can replay identical noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// A child stream keyed by `tag`; distinct tags give distinct streams.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Stream for one (layer, step, replicate) site.
    pub fn site(&self, layer: u64, step: u64, replicate: u64) -> RngStream {
        self.derive(layer).derive(step).derive(replicate)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `n` i.i.d. standard normals; a pure function of `stream`.
pub fn sample_standard_normal(n: usize, stream: &RngStream) -> DenseVector {
    let mut rng = stream.rng();
    DenseVector::from_fn(n, |_| StandardNormal.sample(&mut rng))
}

/// `g(ε, θ) = μ + σ ⊙ ε`.
pub fn reparameterise(theta: &DiagGaussianParams, eps: &DenseVector) -> Result<DenseVector> {
    if eps.len() != theta.dim() {
        return Err(Error::Dimension {
            context: "reparameterise",
            expected: theta.dim(),
            got: eps.len(),
        });
    }
    let sigma = theta.sigma();
    Ok(DenseVector::from_fn(theta.dim(), |i| {
        theta.mu[i] + sigma[i] * eps[i]
    }))
}

/// Mean `Aᵀ(AAᵀ)†z` of `ε | Aε = z`, computed as `Aᵀβ*` with `β*` from CG.
pub fn conditional_mean(a: &DenseMatrix, z: &DenseVector, cfg: &CgConfig) -> Result<DenseVector> {
    let sol = conjugate_gradient(a, z, cfg)?;
    Ok(matvec_transpose(a, &sol.beta_star)?)
}

/// `(I − Aᵀ(AAᵀ)†A) y`, the conditional covariance applied to `y`.
pub fn conditional_covariance_matvec(
    a: &DenseMatrix,
    y: &DenseVector,
    cfg: &CgConfig,
) -> Result<DenseVector> {
    let ay = matvec(a, y)?;
    Ok(y.sub(&conditional_mean(a, &ay, cfg)?))
}

/// The Gaussian `ε | Aε = z` for `ε ~ N(0, I)`.
///
/// The covariance is a projection, so it is only exposed through its action;
/// [`ConditionalGaussian::materialise_covariance`] exists for diagnostics.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    mean: DenseVector,
    a: DenseMatrix,
    cfg: CgConfig,
}

impl ConditionalGaussian {
    pub fn new(a: DenseMatrix, z: &DenseVector, cfg: CgConfig) -> Result<Self> {
        let mean = conditional_mean(&a, z, &cfg)?;
        Ok(Self { mean, a, cfg })
    }

    pub fn mean(&self) -> &DenseVector {
        &self.mean
    }

    pub fn cov_matvec(&self, y: &DenseVector) -> Result<DenseVector> {
        conditional_covariance_matvec(&self.a, y, &self.cfg)
    }

    /// One draw `mean + (I − P) ξ`, which has covariance `I − P` because the
    /// complement projector is idempotent and symmetric.
    pub fn sample(&self, stream: &RngStream) -> Result<DenseVector> {
        let xi = sample_standard_normal(self.mean.len(), stream);
        Ok(self.mean.add(&self.cov_matvec(&xi)?))
    }

    pub fn materialise_covariance(&self) -> Result<DenseMatrix> {
        let n = self.mean.len();
        let mut cov = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let col = self.cov_matvec(&DenseVector::basis(n, j))?;
            for i in 0..n {
                cov.set(i, j, col[i]);
            }
        }
        Ok(cov)
    }
}

/// `log q_θ(v)` for the diagonal Gaussian.
pub fn log_density_diag(theta: &DiagGaussianParams, v: &DenseVector) -> Result<f64> {
    if v.len() != theta.dim() {
        return Err(Error::Dimension {
            context: "log_density_diag",
            expected: theta.dim(),
            got: v.len(),
        });
    }
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    Ok((0..theta.dim())
        .map(|i| {
            let lt = theta.log_tau[i];
            let d = v[i] - theta.mu[i];
            -half_log_2pi - 0.5 * lt - d * d / (2.0 * lt.exp())
        })
        .sum())
}

/// `KL(q_θ ‖ N(0, I)) = Σ ½(τ + μ² − 1 − log τ)`.
pub fn kl_diag_standard(theta: &DiagGaussianParams) -> f64 {
    (0..theta.dim())
        .map(|i| {
            let lt = theta.log_tau[i];
            let mu = theta.mu[i];
            0.5 * (lt.exp() + mu * mu - 1.0 - lt)
        })
        .sum()
}

/// Gradient of [`kl_diag_standard`] with respect to `(μ, log τ)`:
/// `∂/∂μ = μ`, `∂/∂log τ = ½(τ − 1)`.
pub fn kl_diag_standard_grad(theta: &DiagGaussianParams) -> (DenseVector, DenseVector) {
    (
        theta.mu.clone(),
        theta.log_tau.map(|lt| 0.5 * (lt.exp() - 1.0)),
    )
}
