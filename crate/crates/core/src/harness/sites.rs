//! Random test sites. Every generator is a pure function of its stream.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::estimators::LinearMapContext;
use crate::gaussian::{DiagGaussianParams, RngStream};
use crate::harness::oracle::{QuadraticOracle, SiteLayout};
use crate::linalg::{DenseMatrix, DenseVector};

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Gaussian parameters with `μ ~ N(0, 1)` and `log τ ~ U(−1, 1)`.
pub fn random_theta(n: usize, rng: &mut impl Rng) -> DiagGaussianParams {
    let mu = DenseVector::from_fn(n, |_| rng.sample(StandardNormal));
    let log_tau = DenseVector::from_fn(n, |_| rng.random_range(-1.0..1.0));
    DiagGaussianParams::new(mu, log_tau).expect("matching lengths")
}

/// A random `m × n` matrix, rank-deficient in about half the draws. Rank
/// deficiency comes from a low-rank product, a repeated row or a zero row.
pub fn random_sweep_matrix(m: usize, n: usize, stream: &RngStream) -> DenseMatrix {
    let mut rng = stream.rng();
    let full = m.min(n);
    match rng.random_range(0..4u8) {
        0 | 1 => normal_matrix(m, n, &mut rng),
        2 if full > 1 => {
            let r = rng.random_range(1..full);
            normal_matrix(m, r, &mut rng)
                .matmul(&normal_matrix(r, n, &mut rng))
                .expect("inner dimensions agree")
        }
        _ if m > 1 => {
            let base = normal_matrix(m, n, &mut rng);
            let copy = rng.random_range(1..m);
            let zero_row = rng.random_bool(0.5);
            DenseMatrix::from_fn(m, n, |i, j| {
                if i == copy {
                    if zero_row {
                        0.0
                    } else {
                        base.get(0, j)
                    }
                } else {
                    base.get(i, j)
                }
            })
        }
        _ => normal_matrix(m, n, &mut rng),
    }
}

/// `H = LLᵀ/m + 0.1 I`, symmetric positive definite.
pub fn random_psd(m: usize, rng: &mut impl Rng) -> DenseMatrix {
    let l = normal_matrix(m, m, rng);
    DenseMatrix::from_fn(m, m, |i, j| {
        let s: f64 = (0..m).map(|k| l.get(i, k) * l.get(j, k)).sum();
        s / m as f64 + if i == j { 0.1 } else { 0.0 }
    })
}

pub fn random_dense_site(m: usize, n: usize, stream: &RngStream) -> Result<LinearMapContext> {
    let mut rng = stream.rng();
    let w = normal_matrix(m, n, &mut rng);
    LinearMapContext::new(w, random_theta(n, &mut rng))
}

/// A dense layer with `units` outputs on one input `x` of length `x_dim`.
pub fn random_layer_site(x_dim: usize, units: usize, stream: &RngStream) -> Result<(DenseVector, LinearMapContext)> {
    let mut rng = stream.rng();
    let x = DenseVector::from_fn(x_dim, |_| rng.sample(StandardNormal));
    let rows: Vec<DiagGaussianParams> = (0..units).map(|_| random_theta(x_dim, &mut rng)).collect();
    let ctx = LinearMapContext::from_layer(&x, &rows)?;
    Ok((x, ctx))
}

/// A quadratic oracle on a layer site (`m` units, `n = m · x_dim` weights)
/// or on a dense `m × n` site.
pub fn random_quadratic(m: usize, n: usize, layer: bool, stream: &RngStream) -> Result<QuadraticOracle> {
    let (site, layout) = if layer {
        if !n.is_multiple_of(m) {
            return Err(crate::Error::Config(format!(
                "layer layout needs n = {n} to be a multiple of m = {m}"
            )));
        }
        let (x, ctx) = random_layer_site(n / m, m, &stream.derive(0))?;
        (ctx, SiteLayout::Layer { x, units: m })
    } else {
        (random_dense_site(m, n, &stream.derive(0))?, SiteLayout::Dense)
    };
    let mut rng = stream.derive(1).rng();
    let h = random_psd(m, &mut rng);
    let b = DenseVector::from_fn(m, |_| rng.sample(StandardNormal));
    QuadraticOracle::new(h, b, site, layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::oracle::PinvOracle;

    #[test]
    fn sweep_matrices_include_rank_deficient_cases() {
        let deficient = (0..200u64)
            .filter(|&k| {
                let a = random_sweep_matrix(4, 6, &RngStream::new(0, k));
                PinvOracle::new(&a).unwrap().rank() < 4
            })
            .count();
        assert!(deficient > 50 && deficient < 150, "{deficient}");
    }

    #[test]
    fn generators_are_deterministic() {
        let s = RngStream::new(3, 9);
        assert_eq!(random_sweep_matrix(3, 5, &s), random_sweep_matrix(3, 5, &s));
        assert_eq!(random_quadratic(2, 8, true, &s).unwrap(), random_quadratic(2, 8, true, &s).unwrap());
    }

    #[test]
    fn psd_is_symmetric_with_positive_diagonal() {
        let h = random_psd(5, &mut RngStream::new(1, 1).rng());
        for i in 0..5 {
            assert!(h.get(i, i) > 0.1);
            for j in 0..5 {
                assert_eq!(h.get(i, j), h.get(j, i));
            }
        }
    }
}
