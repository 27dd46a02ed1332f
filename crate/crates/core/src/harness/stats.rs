use serde::{Deserialize, Serialize};

use crate::estimators::EstimatorKind;

/// Streaming per-coordinate moments (mean and central moments up to the
/// fourth), enough for standard errors of both the mean and the variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub estimator: EstimatorKind,
    pub site: String,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    m3: Vec<f64>,
    m4: Vec<f64>,
}

impl EstimatorStats {
    pub fn new(estimator: EstimatorKind, site: impl Into<String>, dim: usize) -> Self {
        Self {
            estimator,
            site: site.into(),
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            m3: vec![0.0; dim],
            m4: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.dim(), "sample dimension");
        let n1 = self.count as f64;
        self.count += 1;
        let n = self.count as f64;
        for k in 0..sample.len() {
            let delta = sample[k] - self.mean[k];
            let dn = delta / n;
            let dn2 = dn * dn;
            let term1 = delta * dn * n1;
            self.mean[k] += dn;
            self.m4[k] += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2[k] - 4.0 * dn * self.m3[k];
            self.m3[k] += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2[k];
            self.m2[k] += term1;
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per coordinate.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|m| (m / d).max(0.0)).collect()
    }

    pub fn se_mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Large-sample standard error of the sample variance,
    /// `√((μ₄ − σ⁴(n−3)/(n−1)) / n)`.
    pub fn se_variance(&self) -> Vec<f64> {
        let n = self.count.max(4) as f64;
        self.variance()
            .iter()
            .zip(&self.m4)
            .map(|(v, m4)| {
                let mu4 = m4 / n;
                ((mu4 - v * v * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt()
            })
            .collect()
    }

    /// Per-coordinate z-scores of the mean against `truth`. A coordinate
    /// whose samples are constant scores 0 if it matches to round-off and
    /// infinity otherwise.
    pub fn z_scores(&self, truth: &[f64]) -> Vec<f64> {
        assert_eq!(truth.len(), self.dim());
        self.mean
            .iter()
            .zip(self.se_mean())
            .zip(truth)
            .map(|((m, se), t)| {
                let diff = m - t;
                if se > 0.0 {
                    diff / se
                } else if diff.abs() <= 1e-12 * t.abs().max(1.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    pub fn mean_variance(&self, range: std::ops::Range<usize>) -> f64 {
        let v = self.variance();
        let len = range.len().max(1) as f64;
        v[range].iter().sum::<f64>() / len
    }
}

/// Variance difference `var(a) − var(b)` of two paired sample sequences and
/// its standard error, from the per-draw differences of squared deviations.
pub fn paired_variance_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples");
    let n = a.len();
    assert!(n >= 2, "need at least two samples");
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let scale = n as f64 / (n - 1) as f64;
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| scale * ((x - ma).powi(2) - (y - mb).powi(2)))
        .collect();
    let md = mean(&d);
    let var_d = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (n - 1) as f64;
    (md, (var_d / n as f64).sqrt())
}

pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (v / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_moments_match_two_pass() {
        let xs = [1.0, 4.0, -2.0, 0.5, 3.5, 7.0, -1.0];
        let mut s = EstimatorStats::new(EstimatorKind::Rt, "t", 1);
        for &x in &xs {
            s.push(&[x]);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>();
        assert!((s.mean()[0] - mean).abs() < 1e-14);
        assert!((s.variance()[0] - var).abs() < 1e-12);
        assert!((s.m4[0] - m4).abs() < 1e-9);
        assert!(s.se_variance()[0] >= 0.0);
    }

    #[test]
    fn constant_samples_score_zero() {
        let mut s = EstimatorStats::new(EstimatorKind::R2g2, "t", 2);
        for _ in 0..5 {
            s.push(&[1.5, 2.0]);
        }
        assert_eq!(s.z_scores(&[1.5, 2.0]), vec![0.0, 0.0]);
        assert!(s.z_scores(&[1.5, 2.5])[1].is_infinite());
    }

    #[test]
    fn paired_difference_of_identical_sequences_is_zero() {
        let a = [0.3, 1.2, -0.7, 2.2];
        assert_eq!(paired_variance_difference(&a, &a), (0.0, 0.0));
    }

    #[test]
    fn paired_difference_recovers_variance_gap() {
        let a: Vec<f64> = (0..100).map(|i| ((i * 37) % 17) as f64).collect();
        let b: Vec<f64> = a.iter().map(|x| 0.5 * x).collect();
        let (d, _) = paired_variance_difference(&a, &b);
        let var = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
        };
        assert!((d - (var(&a) - var(&b))).abs() < 1e-10);
    }
}
