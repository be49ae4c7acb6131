//! Minimal dense matrix support.
//!
//! The production path only ever factorizes per-pixel covariance blocks and
//! per-footprint innovation systems, all of size `L_H` / `L_m` (2 in the
//! default two-band setup). The dense oracle path reuses the same routines on
//! matrices of a few hundred rows, which plain O(n^3) kernels handle fine.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: alloc::vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
                what: "Mat::from_rows",
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// `n x n` matrix filled from a closure.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        let mut out = alloc::vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self[(i, j)] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        out
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    /// Force exact symmetry by averaging with the transpose.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    /// Lower-triangular Cholesky factor `L` with `L L^T = self`.
    pub fn cholesky(&self) -> Result<Mat> {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        let mut l = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self[(i, j)];
                for k in 0..j {
                    sum -= l[(i, k)] * l[(j, k)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite("cholesky"));
                    }
                    l[(i, i)] = libm::sqrt(sum);
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(l)
    }

    /// Cholesky with escalating diagonal jitter up to `max_jitter`.
    pub fn cholesky_jitter(&self, max_jitter: f64) -> Result<Mat> {
        if let Ok(l) = self.cholesky() {
            return Ok(l);
        }
        let mut jitter = max_jitter / 100.0;
        while jitter <= max_jitter {
            let mut m = self.clone();
            for i in 0..m.rows {
                m[(i, i)] += jitter;
            }
            if let Ok(l) = m.cholesky() {
                return Ok(l);
            }
            jitter *= 10.0;
        }
        Err(Error::NotPositiveDefinite("cholesky with jitter"))
    }

    /// Solve `self * X = B` for symmetric positive definite `self`.
    pub fn solve_spd(&self, b: &Mat) -> Result<Mat> {
        let l = self.cholesky()?;
        Ok(chol_solve(&l, b))
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn inv_spd(&self) -> Result<Mat> {
        self.solve_spd(&Mat::identity(self.rows))
    }

    /// Quadratic form `v^T self v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        assert_eq!(self.rows, v.len());
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                acc += v[i] * self[(i, j)] * v[j];
            }
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl core::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl core::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Solve `L L^T X = B` given the lower Cholesky factor `L`.
pub fn chol_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows;
    assert_eq!(b.rows, n);
    let mut x = b.clone();
    // forward: L y = b
    for col in 0..x.cols {
        for i in 0..n {
            let mut sum = x[(i, col)];
            for k in 0..i {
                sum -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut sum = x[(i, col)];
            for k in (i + 1)..n {
                sum -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
    }
    x
}

/// Log-determinant of an SPD matrix from its Cholesky factor.
pub fn chol_logdet(l: &Mat) -> f64 {
    let mut acc = 0.0;
    for i in 0..l.rows {
        acc += libm::log(l[(i, i)]);
    }
    2.0 * acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    fn random_spd(n: usize, seed: u64) -> Mat {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = Mat::from_fn(n, n, |_, _| rng.gen::<f64>() - 0.5);
        let mut m = a.matmul(&a.transpose());
        for i in 0..n {
            m[(i, i)] += n as f64 * 0.1;
        }
        m
    }

    #[test]
    fn cholesky_matches_nalgebra() {
        for n in [1, 2, 3, 5, 8] {
            let m = random_spd(n, n as u64);
            let l = m.cholesky().unwrap();
            let nm = DMatrix::from_fn(n, n, |i, j| m[(i, j)]);
            let nl = nm.cholesky().unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert!((l[(i, j)] - nl.l()[(i, j)]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn solve_and_inverse() {
        let m = random_spd(4, 7);
        let inv = m.inv_spd().unwrap();
        let prod = m.matmul(&inv);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_pd_rejected() {
        let m = Mat::from_rows(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(m.cholesky().is_err());
    }

    #[test]
    fn jitter_recovers_semidefinite() {
        let m = Mat::zeros(2, 2);
        assert!(m.cholesky_jitter(1e-10).is_ok());
    }

    #[test]
    fn logdet_matches() {
        let m = random_spd(5, 11);
        let l = m.cholesky().unwrap();
        let nm = DMatrix::from_fn(5, 5, |i, j| m[(i, j)]);
        let want = nm.determinant().ln();
        assert!((chol_logdet(&l) - want).abs() < 1e-9);
    }
}
