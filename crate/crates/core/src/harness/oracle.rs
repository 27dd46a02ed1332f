//! Brute-force ground truth: a Jacobi pseudo-inverse of `AAᵀ` and the
//! analytic gradients of a quadratic loss on one linear site.

use crate::error::{Error, Result};
use crate::estimators::{
    derive_xi_from_z, forward_r2g2, lrt_gradient, r2g2_gradient, rt_gradient, score_gradient,
    GradientEstimate, LinearMapContext, LrtSite, StochasticLayerTrace, UpstreamGradient,
};
use crate::gaussian::{reparameterise, DiagGaussianParams};
use crate::linalg::{matvec, matvec_transpose, CgConfig, DenseMatrix, DenseVector};

pub const MAX_JACOBI_SWEEPS: usize = 100;
pub const PINV_RELATIVE_CUTOFF: f64 = 1e-12;

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns the
/// eigenvalues and the eigenvectors as the columns of a matrix.
pub fn jacobi_eigen(s: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::Dimension {
            context: "jacobi_eigen needs a square matrix",
            expected: n,
            got: s.cols(),
        });
    }
    let mut a = s.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = s.frobenius_norm();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _ in 0..MAX_JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            return Ok(((0..n).map(|i| a.get(i, i)).collect(), v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::Numeric(format!(
        "Jacobi eigendecomposition did not converge in {MAX_JACOBI_SWEEPS} sweeps"
    )))
}

/// Dense Moore-Penrose pseudo-inverse of `AAᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinvOracle {
    a: DenseMatrix,
    gram_pinv: DenseMatrix,
    rank: usize,
}

impl PinvOracle {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        let gram = a.matmul(&a.transpose())?;
        let (values, vectors) = jacobi_eigen(&gram)?;
        let lambda_max = values.iter().copied().fold(0.0, f64::max);
        let cutoff = PINV_RELATIVE_CUTOFF * lambda_max;
        let inv: Vec<f64> = values
            .iter()
            .map(|&l| if lambda_max > 0.0 && l > cutoff { 1.0 / l } else { 0.0 })
            .collect();
        let m = gram.rows();
        let gram_pinv = DenseMatrix::from_fn(m, m, |i, j| {
            (0..m).map(|k| vectors.get(i, k) * inv[k] * vectors.get(j, k)).sum()
        });
        let rank = inv.iter().filter(|&&x| x != 0.0).count();
        Ok(Self {
            a: a.clone(),
            gram_pinv,
            rank,
        })
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `(AAᵀ)†`
    pub fn gram_pinv(&self) -> &DenseMatrix {
        &self.gram_pinv
    }

    /// `Aᵀ(AAᵀ)†z`
    pub fn conditional_mean(&self, z: &DenseVector) -> Result<DenseVector> {
        Ok(matvec_transpose(&self.a, &matvec(&self.gram_pinv, z)?)?)
    }

    /// `Aᵀ(AAᵀ)†Aε`
    pub fn pinv_project(&self, eps: &DenseVector) -> Result<DenseVector> {
        self.conditional_mean(&matvec(&self.a, eps)?)
    }

    pub fn projection_matrix(&self) -> DenseMatrix {
        let at = self.a.transpose();
        at.matmul(&self.gram_pinv)
            .and_then(|m| m.matmul(&self.a))
            .expect("shapes are consistent by construction")
    }

    /// `I − Aᵀ(AAᵀ)†A`, the covariance of `ε` given `Aε`.
    pub fn covariance_complement(&self) -> DenseMatrix {
        let p = self.projection_matrix();
        DenseMatrix::from_fn(p.rows(), p.cols(), |i, j| f64::from(u8::from(i == j)) - p.get(i, j))
    }

    /// `‖G G† G − G‖_max` for `G = AAᵀ`.
    pub fn penrose_residual(&self) -> f64 {
        let g = self.a.matmul(&self.a.transpose()).expect("square");
        let ggg = g
            .matmul(&self.gram_pinv)
            .and_then(|m| m.matmul(&g))
            .expect("square");
        ggg.sub(&g).expect("same shape").max_abs()
    }
}

pub fn pinv_project(oracle: &PinvOracle, eps: &DenseVector) -> Result<DenseVector> {
    oracle.pinv_project(eps)
}

/// Solves a square system by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Dimension {
            context: "solve_dense",
            expected: n,
            got: b.len(),
        });
    }
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.push(b[i]);
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .expect("non-empty range");
        if m[pivot][col].abs() < 1e-300 {
            return Err(Error::Numeric("singular system in solve_dense".into()));
        }
        m.swap(col, pivot);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    DenseVector::new(x).map_err(Error::from)
}

/// How the site's `W` was built. The layer layout keeps the input so that
/// the local reparameterisation estimator can be evaluated on it.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteLayout {
    Dense,
    Layer { x: DenseVector, units: usize },
}

/// `ℓ̃(z) = ½ zᵀHz + bᵀz` on `z = W(μ + σ ⊙ ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticOracle {
    h: DenseMatrix,
    b: DenseVector,
    site: LinearMapContext,
    layout: SiteLayout,
}

/// All estimators evaluated on one shared `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDraw {
    pub rt: GradientEstimate,
    pub r2g2: GradientEstimate,
    pub lrt: Option<GradientEstimate>,
    pub score: GradientEstimate,
    pub trace: StochasticLayerTrace,
}

impl QuadraticOracle {
    pub fn new(h: DenseMatrix, b: DenseVector, site: LinearMapContext, layout: SiteLayout) -> Result<Self> {
        let m = site.m();
        if h.shape() != (m, m) || b.len() != m {
            return Err(Error::Dimension {
                context: "QuadraticOracle H/b",
                expected: m,
                got: b.len(),
            });
        }
        for i in 0..m {
            for j in 0..i {
                if (h.get(i, j) - h.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Config("H must be symmetric".into()));
                }
            }
        }
        if let SiteLayout::Layer { x, units } = &layout {
            if *units != m || x.len() * units != site.n() {
                return Err(Error::Config("layer layout does not match the site".into()));
            }
        }
        Ok(Self { h, b, site, layout })
    }

    pub fn site(&self) -> &LinearMapContext {
        &self.site
    }

    pub fn layout(&self) -> &SiteLayout {
        &self.layout
    }

    pub fn h(&self) -> &DenseMatrix {
        &self.h
    }

    pub fn set_theta(&mut self, theta: DiagGaussianParams) -> Result<()> {
        self.site.set_theta(theta)
    }

    pub fn loss(&self, z: &DenseVector) -> f64 {
        let hz = matvec(&self.h, z).expect("square H");
        0.5 * z.dot(&hz) + self.b.dot(z)
    }

    pub fn upstream(&self, z: &DenseVector) -> UpstreamGradient {
        UpstreamGradient::new(matvec(&self.h, z).expect("square H").add(&self.b))
    }

    fn whw(&self) -> DenseMatrix {
        let w = self.site.w();
        w.transpose().matmul(&self.h).and_then(|m| m.matmul(w)).expect("shapes")
    }

    /// `E[ℓ] = ½ μᵀWᵀHWμ + bᵀWμ + ½ Σ_i τ_i (WᵀHW)_ii`.
    pub fn expected_loss(&self) -> f64 {
        let theta = self.site.theta();
        let z_mean = matvec(self.site.w(), theta.mu()).expect("shapes");
        let whw = self.whw();
        let tau = theta.tau();
        self.loss(&z_mean) + 0.5 * (0..tau.len()).map(|i| tau[i] * whw.get(i, i)).sum::<f64>()
    }

    /// Exact `∇_μ E[ℓ] = WᵀHWμ + Wᵀb` and `∇_τ E[ℓ] = ½ diag(WᵀHW)`.
    pub fn analytic_gradient(&self) -> (DenseVector, DenseVector) {
        let whw = self.whw();
        let mu = self.site.theta().mu();
        let d_mu = matvec(&whw, mu)
            .expect("shapes")
            .add(&matvec_transpose(self.site.w(), &self.b).expect("shapes"));
        let d_tau = DenseVector::from_fn(mu.len(), |i| 0.5 * whw.get(i, i));
        (d_mu, d_tau)
    }

    /// Evaluates every estimator on the same noise `ε`. LRT is matched to the
    /// draw through `ξ = (z − xᵀμ)/s` and is only available on layer sites.
    pub fn paired_sample(&self, eps: &DenseVector, cfg: &CgConfig) -> Result<PairedDraw> {
        let theta = self.site.theta();
        let v = reparameterise(theta, eps)?;
        let z = matvec(self.site.w(), &v)?;
        let up = self.upstream(&z);
        let rt = rt_gradient(&self.site, &up, eps)?;
        let trace = forward_r2g2(&self.site, eps, cfg)?;
        let r2g2 = r2g2_gradient(&self.site, &up, &trace)?;
        let score = score_gradient(theta, self.loss(&z), &v)?;
        let lrt = match &self.layout {
            SiteLayout::Dense => None,
            SiteLayout::Layer { x, units } => {
                let n = x.len();
                let rows = (0..*units).map(|i| theta.slice(i * n, n)).collect();
                let site = LrtSite::new(x.clone(), rows, DenseVector::zeros(*units))?;
                let site = site.with_xi(derive_xi_from_z(&site, &z)?)?;
                GradientEstimate::concat(&lrt_gradient(&site, &up)?)
            }
        };
        Ok(PairedDraw {
            rt,
            r2g2,
            lrt,
            score,
            trace,
        })
    }
}
