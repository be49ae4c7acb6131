//! Third-degree spherical-radial cubature points.
//!
//! For an `n`-dimensional Gaussian the rule uses `2n` equally weighted points
//! `mean ± sqrt(n) * L e_i`, where `L` is the lower Cholesky factor of the
//! covariance. The generator set satisfies `sum w xi = 0` and
//! `sum w xi xi^T = I` exactly, so sample mean and covariance reproduce the
//! input moments.

use alloc::vec::Vec;

use crate::error::Result;
use crate::linalg::Mat;

/// Affinely transformed cubature point set with uniform weights `1/(2n)`.
#[derive(Debug, Clone)]
pub struct CubatureSet {
    pub points: Vec<Vec<f64>>,
    pub weight: f64,
}

/// Cubature points for `N(mean, cov)`; `cov` must be symmetric PD
/// (a jitter of at most 1e-10 is applied if the factorization fails).
pub fn cubature_points(mean: &[f64], cov: &Mat) -> Result<CubatureSet> {
    let n = mean.len();
    debug_assert_eq!(cov.rows, n);
    let l = cov.cholesky_jitter(1e-10)?;
    let scale = libm::sqrt(n as f64);
    let mut points = Vec::with_capacity(2 * n);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut p = Vec::with_capacity(n);
            for r in 0..n {
                // column i of L, scaled: L * (sign * sqrt(n) * e_i)
                p.push(mean[r] + sign * scale * l[(r, i)]);
            }
            points.push(p);
        }
    }
    Ok(CubatureSet { points, weight: 1.0 / (2 * n) as f64 })
}

impl CubatureSet {
    pub fn sample_mean(&self) -> Vec<f64> {
        let n = self.points[0].len();
        let mut m = alloc::vec![0.0; n];
        for p in &self.points {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += self.weight * v;
            }
        }
        m
    }

    pub fn sample_cov(&self) -> Mat {
        let mean = self.sample_mean();
        let n = mean.len();
        let mut cov = Mat::zeros(n, n);
        for p in &self.points {
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] += self.weight * (p[i] - mean[i]) * (p[j] - mean[j]);
                }
            }
        }
        cov
    }
}
