//! Dense vector/matrix kernels and the conjugate-gradient solver for the
//! normal equation `A Aᵀ β = z`.
//!
//! Storage is row-major `f64` throughout. The Gram operator `A Aᵀ` is only
//! ever applied matrix-free, so the solver needs `O(m + n)` scratch space.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {got} does not match shape {rows}x{cols}")]
    InvalidData { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("CG breakdown at iteration {iteration}: residual norm {residual:e}")]
    CgBreakdown { iteration: usize, residual: f64 },
    #[error("CG non-convergence after {iterations} iterations: residual norm {residual:e}")]
    CgNonConvergence { iterations: usize, residual: f64 },
    #[error("invalid CG configuration: {0}")]
    InvalidConfig(String),
}

fn check_finite(data: &[f64]) -> Result<(), LinalgError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(LinalgError::NonFinite { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    /// Wraps `data` without the finiteness scan. Used on kernel outputs whose
    /// inputs were already validated.
    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            data: (0..len).map(f).collect(),
        }
    }

    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[index] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// # Panics
    /// Panics if the lengths differ.
    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn scale(&self, alpha: f64) -> DenseVector {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> DenseVector {
        DenseVector::from_vec(self.data.iter().map(|&v| f(v)).collect())
    }

    /// # Panics
    /// Panics if the lengths differ.
    pub fn zip_map(&self, other: &DenseVector, mut f: impl FnMut(f64, f64) -> f64) -> DenseVector {
        assert_eq!(self.len(), other.len(), "zip_map: length mismatch");
        DenseVector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add(&self, other: &DenseVector) -> DenseVector {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseVector) -> DenseVector {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &DenseVector) -> DenseVector {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &DenseVector) {
        axpy(alpha, &x.data, &mut self.data);
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.data[index]
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.data
    }
}

impl fmt::Display for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                rows,
                cols,
                got: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    op: "from_rows",
                    left: (i, row.len()),
                    right: (0, cols),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> DenseVector {
        DenseVector::from_fn(self.rows, |i| self.get(i, j))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `self · diag(scale)`, i.e. column `j` multiplied by `scale[j]`.
    pub fn scale_columns(&self, scale: &[f64]) -> Result<DenseMatrix, LinalgError> {
        if scale.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                op: "scale_columns",
                left: self.shape(),
                right: (scale.len(), 1),
            });
        }
        Ok(DenseMatrix::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j) * scale[j]
        }))
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.shape() != other.shape() {
            return Err(LinalgError::DimensionMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(DenseMatrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len(), "axpy: length mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `A · x`.
pub fn matvec(a: &DenseMatrix, x: &DenseVector) -> Result<DenseVector, LinalgError> {
    if a.cols != x.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "matvec",
            left: a.shape(),
            right: (x.len(), 1),
        });
    }
    Ok(DenseVector::from_fn(a.rows, |i| dot(a.row(i), x.as_slice())))
}

/// `Aᵀ · y`, without forming the transpose.
pub fn matvec_transpose(a: &DenseMatrix, y: &DenseVector) -> Result<DenseVector, LinalgError> {
    if a.rows != y.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "matvec_transpose",
            left: a.shape(),
            right: (y.len(), 1),
        });
    }
    let mut out = vec![0.0; a.cols];
    for (i, &yi) in y.iter().enumerate() {
        if yi != 0.0 {
            axpy(yi, a.row(i), &mut out);
        }
    }
    Ok(DenseVector::from_vec(out))
}

/// `A (Aᵀ y)` without materialising `A Aᵀ`.
pub fn gram_matvec(a: &DenseMatrix, y: &DenseVector) -> Result<DenseVector, LinalgError> {
    if a.rows != y.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "gram_matvec",
            left: a.shape(),
            right: (y.len(), 1),
        });
    }
    let aty = matvec_transpose(a, y)?;
    matvec(a, &aty)
}

pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;

/// Termination controls for [`conjugate_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct CgConfig {
    /// Iteration cap; `None` means `A.rows + 5`.
    pub max_iters: Option<usize>,
    /// Relative tolerance on `‖A Aᵀ β − z‖₂ / max(1, ‖z‖₂)`.
    pub residual_tol: f64,
    /// Starting point; zero when absent.
    pub initial_guess: Option<DenseVector>,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: None,
            residual_tol: DEFAULT_RESIDUAL_TOL,
            initial_guess: None,
        }
    }
}

impl CgConfig {
    pub fn with_tol(residual_tol: f64) -> Self {
        Self {
            residual_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LinalgError> {
        if !(self.residual_tol >= 0.0 && self.residual_tol.is_finite()) {
            return Err(LinalgError::InvalidConfig(format!(
                "residual_tol must be finite and >= 0, got {}",
                self.residual_tol
            )));
        }
        if self.max_iters == Some(0) {
            return Err(LinalgError::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }

    fn iteration_cap(&self, rows: usize) -> usize {
        self.max_iters.unwrap_or(rows + 5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub beta_star: DenseVector,
    pub iters: usize,
    pub final_residual_norm: f64,
}

/// Solves `A Aᵀ β = z` by conjugate gradients on the Gram operator.
///
/// The iteration follows the textbook recurrence: `α = rᵀr / pᵀ(AAᵀ)p`,
/// `x ← x + αp`, `r ← r + α(AAᵀ)p`, `β = r'ᵀr' / rᵀr`, `p ← −r' + βp`, with
/// `r = AAᵀx − z`. The loop stops once `‖r‖ ≤ tol·max(1, ‖z‖)`. When the
/// recurrence residual reports convergence the true residual is recomputed;
/// if rounding has pushed it back above tolerance the iteration restarts from
/// it. A collapsed search direction (`pᵀ(AAᵀ)p` at rounding level relative to
/// the largest diagonal of `AAᵀ`) triggers one restart per solve; a second
/// collapse is reported as [`LinalgError::CgBreakdown`].
///
/// With a zero starting point on a singular but consistent system the iterate
/// stays in `im(A Aᵀ)`, so the kernel component of the general solution is
/// never picked up.
pub fn conjugate_gradient(
    a: &DenseMatrix,
    z: &DenseVector,
    cfg: &CgConfig,
) -> Result<CgSolution, LinalgError> {
    cfg.validate()?;
    if a.rows != z.len() {
        return Err(LinalgError::DimensionMismatch {
            op: "conjugate_gradient",
            left: a.shape(),
            right: (z.len(), 1),
        });
    }
    let mut x = match &cfg.initial_guess {
        Some(x0) if x0.len() != a.rows => {
            return Err(LinalgError::DimensionMismatch {
                op: "conjugate_gradient initial guess",
                left: a.shape(),
                right: (x0.len(), 1),
            })
        }
        Some(x0) => x0.clone(),
        None => DenseVector::zeros(a.rows),
    };
    let max_iters = cfg.iteration_cap(a.rows);
    let tol = cfg.residual_tol * z.norm().max(1.0);

    let true_residual = |x: &DenseVector| -> Result<DenseVector, LinalgError> {
        Ok(gram_matvec(a, x)?.sub(z))
    };

    let mut r = if cfg.initial_guess.is_some() {
        true_residual(&x)?
    } else {
        z.scale(-1.0)
    };
    let mut p = r.scale(-1.0);
    let mut rr = r.dot(&r);
    let mut k = 0;
    let mut restarted = false;
    // Largest diagonal entry of AAᵀ, so the breakdown test does not depend on
    // the overall scale of A.
    let scale = (0..a.rows)
        .map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);

    loop {
        if rr.sqrt() <= tol {
            let r_true = true_residual(&x)?;
            let res = r_true.norm();
            if res <= tol {
                return Ok(CgSolution {
                    beta_star: x,
                    iters: k,
                    final_residual_norm: res,
                });
            }
            r = r_true;
            rr = res * res;
            p = r.scale(-1.0);
        }
        if k >= max_iters {
            return Err(LinalgError::CgNonConvergence {
                iterations: k,
                residual: true_residual(&x)?.norm(),
            });
        }
        let q = gram_matvec(a, &p)?;
        let pq = p.dot(&q);
        if pq <= f64::EPSILON * scale * p.dot(&p) {
            if restarted {
                return Err(LinalgError::CgBreakdown {
                    iteration: k,
                    residual: rr.sqrt(),
                });
            }
            // Lost conjugacy on a badly conditioned Gram looks the same as a
            // direction in the kernel. One restart from the true residual
            // tells them apart.
            restarted = true;
            r = true_residual(&x)?;
            rr = r.dot(&r);
            p = r.scale(-1.0);
            continue;
        }
        let alpha = rr / pq;
        x.axpy(alpha, &p);
        r.axpy(alpha, &q);
        let rr_next = r.dot(&r);
        let beta = rr_next / rr;
        p = p.scale(beta).sub(&r);
        rr = rr_next;
        k += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vecd(v: &[f64]) -> DenseVector {
        DenseVector::new(v.to_vec()).unwrap()
    }

    fn mat(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matvec_examples() {
        let x = vecd(&[1.0, 2.0, 3.0]);
        assert_eq!(matvec(&DenseMatrix::identity(3), &x).unwrap(), x);
        let zero = DenseMatrix::zeros(2, 3);
        assert_eq!(
            matvec(&zero, &vecd(&[5.0, 6.0, 7.0])).unwrap().as_slice(),
            &[0.0, 0.0]
        );
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matvec(&a, &vecd(&[1.0, 1.0])).unwrap().as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matvec_dimension_error_names_shapes() {
        let err = matvec(&DenseMatrix::zeros(2, 3), &vecd(&[1.0, 2.0])).unwrap_err();
        assert_eq!(
            err,
            LinalgError::DimensionMismatch {
                op: "matvec",
                left: (2, 3),
                right: (2, 1)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn constructors_reject_bad_data() {
        assert!(matches!(
            DenseMatrix::new(2, 2, vec![1.0; 3]),
            Err(LinalgError::InvalidData { .. })
        ));
        assert!(matches!(
            DenseVector::new(vec![1.0, f64::NAN]),
            Err(LinalgError::NonFinite { index: 1 })
        ));
        assert!(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn gram_matvec_examples() {
        let y = vecd(&[1.0, -1.0]);
        assert_eq!(gram_matvec(&DenseMatrix::identity(2), &y).unwrap(), y);
        let a = mat(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]);
        assert_eq!(
            gram_matvec(&a, &vecd(&[1.0, 1.0])).unwrap().as_slice(),
            &[1.0, 4.0]
        );
        let with_zero_row = mat(&[&[1.0, 2.0], &[0.0, 0.0], &[3.0, -1.0]]);
        let out = gram_matvec(&with_zero_row, &DenseVector::basis(3, 1)).unwrap();
        assert_eq!(out[1], 0.0);
        assert!(gram_matvec(&a, &vecd(&[1.0])).is_err());
    }

    #[test]
    fn cg_identity_returns_rhs() {
        let z = vecd(&[0.5, -2.0, 3.0, 1.0]);
        let sol = conjugate_gradient(&DenseMatrix::identity(4), &z, &CgConfig::default()).unwrap();
        assert!(sol.iters <= 4);
        assert!(sol.beta_star.sub(&z).norm_inf() < 1e-14);
    }

    #[test]
    fn cg_zero_rhs_returns_immediately() {
        let a = mat(&[&[1.0, 2.0, 3.0], &[0.0, 1.0, -1.0]]);
        let sol = conjugate_gradient(&a, &DenseVector::zeros(2), &CgConfig::default()).unwrap();
        assert_eq!(sol.iters, 0);
        assert_eq!(sol.beta_star, DenseVector::zeros(2));
        assert_eq!(sol.final_residual_norm, 0.0);
    }

    #[test]
    fn cg_hand_solved_normal_equation() {
        // AAᵀ = [[1,1],[1,2]], z = A·[1,1,1] = [1,2]; the 2×2 solve gives β* = [0,1].
        let a = mat(&[&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]]);
        let z = matvec(&a, &vecd(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0]);
        let sol = conjugate_gradient(&a, &z, &CgConfig::default()).unwrap();
        assert!(sol.beta_star.sub(&vecd(&[0.0, 1.0])).norm_inf() < 1e-12);
        assert!(sol.iters <= 2);
    }

    #[test]
    fn cg_respects_initial_guess() {
        let a = mat(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let z = vecd(&[4.0, 1.0]);
        let cfg = CgConfig {
            initial_guess: Some(vecd(&[1.0, 1.0])),
            ..CgConfig::default()
        };
        let sol = conjugate_gradient(&a, &z, &cfg).unwrap();
        assert_eq!(sol.iters, 0);
        assert_eq!(sol.beta_star.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn cg_non_convergence_is_reported() {
        let a = DenseMatrix::from_fn(5, 5, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let z = vecd(&[1.0, -1.0, 1.0, -1.0, 1.0]);
        let cfg = CgConfig {
            max_iters: Some(1),
            ..CgConfig::default()
        };
        assert!(matches!(
            conjugate_gradient(&a, &z, &cfg),
            Err(LinalgError::CgNonConvergence { iterations: 1, .. })
        ));
    }

    #[test]
    fn cg_result_does_not_depend_on_the_scale_of_a() {
        let cfg = CgConfig {
            max_iters: Some(100),
            ..CgConfig::default()
        };
        let base = DenseMatrix::from_fn(4, 6, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let eps = vecd(&[0.3, -1.2, 0.8, 0.1, -0.5, 1.7]);
        let star = |c: f64| {
            let a = DenseMatrix::from_fn(4, 6, |i, j| c * base.get(i, j));
            let z = matvec(&a, &eps).unwrap();
            let beta = conjugate_gradient(&a, &z, &cfg).unwrap().beta_star;
            matvec(&a.transpose(), &beta).unwrap()
        };
        let (unit, small) = (star(1.0), star(1e-4));
        assert!(unit.sub(&small).norm_inf() <= 1e-6, "{unit:?} vs {small:?}");
    }

    #[test]
    fn cg_breakdown_on_inconsistent_rhs() {
        // z has a component in ker(AAᵀ), so the search direction collapses.
        let a = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let z = vecd(&[1.0, 1.0]);
        let err = conjugate_gradient(&a, &z, &CgConfig::default()).unwrap_err();
        assert!(matches!(err, LinalgError::CgBreakdown { .. }), "{err:?}");
    }

    #[test]
    fn cg_config_validation() {
        assert!(CgConfig::with_tol(-1.0).validate().is_err());
        let cfg = CgConfig {
            max_iters: Some(0),
            ..CgConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn gram_matvec_matches_materialised_gram(
            a in matrix_strategy(8, 8),
            y in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let y = DenseVector::new(y).unwrap();
            let gram = a.matmul(&a.transpose()).unwrap();
            let direct = matvec(&gram, &y).unwrap();
            let free = gram_matvec(&a, &y).unwrap();
            let scale = direct.norm().max(1e-300);
            prop_assert!(free.sub(&direct).norm() <= 1e-12 * scale.max(1.0));
        }

        #[test]
        fn cg_converges_within_rank_plus_two(
            a in matrix_strategy(4, 7),
            eps in proptest::collection::vec(-3.0f64..3.0, 7),
        ) {
            // Diagonal loading keeps the random instance well conditioned.
            let a = DenseMatrix::from_fn(4, 7, |i, j| a.get(i, j) + if i == j { 3.0 } else { 0.0 });
            let z = matvec(&a, &DenseVector::new(eps).unwrap()).unwrap();
            let sol = conjugate_gradient(&a, &z, &CgConfig::default()).unwrap();
            prop_assert!(sol.iters <= 4 + 2);
            let res = gram_matvec(&a, &sol.beta_star).unwrap().sub(&z).norm();
            prop_assert!(res <= 1e-10 * z.norm().max(1.0));
        }
    }
}
