//! Two-dimensional synthetic datasets.
//!
//! * `blobs`: two balanced classes, `y = i mod 2`, drawn from
//!   `N(±(s/2, s/2), I)` with `s = 4` (class 1 at the positive centre). The
//!   centres are `s√2` apart, so the Bayes rule `x₁ + x₂ > 0` is correct with
//!   probability `Φ(s/√2) ≈ 0.9977`.
//! * `xor_rings`: radius from one of two rings (`r = 1` or `r = 2`, plus
//!   `N(0, 0.1²)` radial noise) at a uniform angle; the label is the ring index
//!   XOR the quadrant parity `[x₁ > 0] ⊕ [x₂ > 0]`.
//! * `linreg`: `x ~ N(0, I)`, `y = 1.5 x₁ − 0.7 x₂ + 0.3 + noise · N(0, 1)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::RngStream;
use crate::linalg::DenseMatrix;
use crate::nets::Targets;

pub const BLOB_SEPARATION: f64 = 4.0;
pub const LINREG_WEIGHTS: [f64; 2] = [1.5, -0.7];
pub const LINREG_BIAS: f64 = 0.3;
pub const LINREG_DEFAULT_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    XorRings,
    Linreg,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::XorRings => "xor_rings",
            DatasetKind::Linreg => "linreg",
        }
    }

    pub fn is_classification(self) -> bool {
        self != DatasetKind::Linreg
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blobs" => Ok(DatasetKind::Blobs),
            "xor_rings" | "xor-rings" => Ok(DatasetKind::XorRings),
            "linreg" => Ok(DatasetKind::Linreg),
            other => Err(Error::Config(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub x: DenseMatrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Labels(l) => Some(l),
            Targets::Values(_) => None,
        }
    }

    /// Rows `idx` as a new batch.
    pub fn subset(&self, idx: &[usize]) -> (DenseMatrix, Targets) {
        let x = DenseMatrix::from_fn(idx.len(), self.x.cols(), |b, j| self.x.get(idx[b], j));
        let t = match &self.targets {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(v) => Targets::Values(DenseMatrix::from_fn(idx.len(), v.cols(), |b, j| v.get(idx[b], j))),
        };
        (x, t)
    }
}

pub fn make_synthetic_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    match kind {
        DatasetKind::Linreg => make_linreg(n, LINREG_DEFAULT_NOISE, seed),
        _ => make_classification(kind, n, seed),
    }
}

fn check_size(n: usize) -> Result<()> {
    if n < 10 {
        return Err(Error::Config(format!("datasets need at least 10 points, got {n}")));
    }
    Ok(())
}

fn make_classification(kind: DatasetKind, n: usize, seed: u64) -> Result<Dataset> {
    check_size(n)?;
    let mut rng = RngStream::new(seed, kind as u64).rng();
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (p, y) = match kind {
            DatasetKind::Blobs => {
                let y = i % 2;
                let c = if y == 1 { BLOB_SEPARATION / 2.0 } else { -BLOB_SEPARATION / 2.0 };
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                ([c + a, c + b], y)
            }
            _ => {
                let ring = rng.random_range(0..2usize);
                let noise: f64 = rng.sample(StandardNormal);
                let r = (ring + 1) as f64 + 0.1 * noise;
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let p = [r * angle.cos(), r * angle.sin()];
                let parity = usize::from(p[0] > 0.0) ^ usize::from(p[1] > 0.0);
                (p, ring ^ parity)
            }
        };
        x.extend_from_slice(&p);
        labels.push(y);
    }
    Ok(Dataset {
        kind,
        x: DenseMatrix::new(n, 2, x)?,
        targets: Targets::Labels(labels),
    })
}

pub fn make_linreg(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    check_size(n)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("noise must be finite and >= 0".into()));
    }
    let mut rng = RngStream::new(seed, DatasetKind::Linreg as u64).rng();
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        let e: f64 = rng.sample(StandardNormal);
        x.extend_from_slice(&[a, b]);
        y.push(LINREG_WEIGHTS[0] * a + LINREG_WEIGHTS[1] * b + LINREG_BIAS + noise * e);
    }
    Ok(Dataset {
        kind: DatasetKind::Linreg,
        x: DenseMatrix::new(n, 2, x)?,
        targets: Targets::Values(DenseMatrix::new(n, 1, y)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::oracle::solve_dense;
    use crate::linalg::DenseVector;

    #[test]
    fn same_seed_same_data() {
        for kind in [DatasetKind::Blobs, DatasetKind::XorRings, DatasetKind::Linreg] {
            assert_eq!(make_synthetic_dataset(kind, 50, 7).unwrap(), make_synthetic_dataset(kind, 50, 7).unwrap());
            assert_ne!(make_synthetic_dataset(kind, 50, 7).unwrap(), make_synthetic_dataset(kind, 50, 8).unwrap());
        }
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(make_synthetic_dataset(DatasetKind::Blobs, 9, 0).is_err());
    }

    #[test]
    fn blobs_bayes_rule_is_above_99_percent() {
        let d = make_synthetic_dataset(DatasetKind::Blobs, 100_000, 1).unwrap();
        let labels = d.labels().unwrap();
        let hits = (0..d.len())
            .filter(|&i| usize::from(d.x.get(i, 0) + d.x.get(i, 1) > 0.0) == labels[i])
            .count();
        let acc = hits as f64 / d.len() as f64;
        assert!(acc > 0.99, "{acc}");
    }

    #[test]
    fn xor_rings_labels_follow_the_rule() {
        let d = make_synthetic_dataset(DatasetKind::XorRings, 500, 2).unwrap();
        let labels = d.labels().unwrap();
        for i in 0..d.len() {
            let (a, b) = (d.x.get(i, 0), d.x.get(i, 1));
            let ring = usize::from((a * a + b * b).sqrt() > 1.5);
            let parity = usize::from(a > 0.0) ^ usize::from(b > 0.0);
            assert_eq!(labels[i], ring ^ parity);
        }
    }

    #[test]
    fn noiseless_linreg_is_recovered_exactly() {
        let d = make_linreg(40, 0.0, 3).unwrap();
        let Targets::Values(y) = &d.targets else { unreachable!() };
        // Normal equations for [x₁, x₂, 1].
        let feat = |i: usize, k: usize| if k < 2 { d.x.get(i, k) } else { 1.0 };
        let xtx = DenseMatrix::from_fn(3, 3, |j, k| (0..d.len()).map(|i| feat(i, j) * feat(i, k)).sum());
        let xty = DenseVector::from_fn(3, |j| (0..d.len()).map(|i| feat(i, j) * y.get(i, 0)).sum());
        let w = solve_dense(&xtx, &xty).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-12 && (w[1] + 0.7).abs() < 1e-12 && (w[2] - 0.3).abs() < 1e-12);
    }
}
