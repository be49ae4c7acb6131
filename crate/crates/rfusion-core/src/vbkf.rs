//! Robust variational measurement update.
//!
//! Given a Gaussian predictive prior and one observation, a mean-field
//! coordinate ascent alternates between the state posterior `q(s)`, the
//! per-measurement Bernoulli outlier indicators `q(z)` and their beta
//! hyperposteriors `q(pi)`. An indicator at zero inflates the effective noise
//! variance of its measurement to infinity (improper likelihood), so outliers
//! are ignored rather than modeled.
//!
//! This module holds the pieces shared by the dense and distributed paths
//! (indicator updates, expected precision, stopping rule) plus the dense
//! full-covariance update used as the small-instance oracle. The scalable
//! per-group path lives in [`crate::distributed`].

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, Mat};
use crate::raster::GridDims;
use crate::sensor::Observation;

/// Clamp floor for indicator means; keeps the effective covariance finite.
pub const EPSILON_Z: f64 = 1e-6;

/// Iteration policy and beta prior shapes for the variational update.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VBConfig {
    /// When false, indicators are pinned to one and the update collapses to a
    /// single plain Kalman step.
    pub robust: bool,
    pub max_iters: usize,
    /// Stop when the state change shrinks below this fraction of the previous
    /// change (first iteration: fraction of the prior mean norm).
    pub rel_change_threshold: f64,
    pub e0: f64,
    pub f0: f64,
    pub epsilon_z: f64,
}

impl VBConfig {
    pub fn new(e0: f64, f0: f64) -> Self {
        Self {
            robust: true,
            max_iters: 20,
            rel_change_threshold: 0.10,
            e0,
            f0,
            epsilon_z: EPSILON_Z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 || self.rel_change_threshold <= 0.0 {
            return Err(Error::InvalidArgument(alloc::string::String::from(
                "max_iters must be >= 1 and threshold > 0",
            )));
        }
        if self.e0 <= 0.0 || self.f0 <= 0.0 {
            return Err(Error::InvalidArgument(alloc::string::String::from(
                "beta prior shapes must be positive",
            )));
        }
        Ok(())
    }
}

/// Pixel-major Gaussian belief with one covariance block per HR pixel.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    /// `L_H x L_H` symmetric PD block per HR pixel.
    pub blocks: Vec<Mat>,
    pub dims: GridDims,
}

impl GaussianBelief {
    pub fn new(mean: Vec<f64>, blocks: Vec<Mat>, dims: GridDims) -> Result<Self> {
        if mean.len() != dims.state_len() || blocks.len() != dims.n_pixels() {
            return Err(Error::DimensionMismatch {
                expected: dims.state_len(),
                got: mean.len(),
                what: "GaussianBelief",
            });
        }
        Ok(Self { mean, blocks, dims })
    }

    /// Uniform belief: every pixel shares `block`.
    pub fn uniform(mean: Vec<f64>, block: Mat, dims: GridDims) -> Result<Self> {
        let blocks = alloc::vec![block; dims.n_pixels()];
        Self::new(mean, blocks, dims)
    }

    /// Per-entry marginal variances (the block diagonals).
    pub fn variance_diag(&self) -> Vec<f64> {
        let l = self.dims.bands;
        let mut out = Vec::with_capacity(self.mean.len());
        for block in &self.blocks {
            for b in 0..l {
                out.push(block[(b, b)]);
            }
        }
        out
    }
}

/// Bernoulli means and beta posterior shapes for one observation.
#[derive(Debug, Clone)]
pub struct OutlierPosterior {
    pub z_mean: Vec<f64>,
    pub e_t: Vec<f64>,
    pub f_t: Vec<f64>,
    pub e0: f64,
    pub f0: f64,
}

impl OutlierPosterior {
    pub fn init(n: usize, cfg: &VBConfig) -> Self {
        let z0 = cfg.e0 / (cfg.e0 + cfg.f0);
        Self {
            z_mean: alloc::vec![z0; n],
            e_t: alloc::vec![cfg.e0; n],
            f_t: alloc::vec![cfg.f0; n],
            e0: cfg.e0,
            f0: cfg.f0,
        }
    }

    /// Pinned-clean posterior used by the non-robust mode.
    pub fn pinned(n: usize, cfg: &VBConfig) -> Self {
        let mut p = Self::init(n, cfg);
        p.z_mean.iter_mut().for_each(|z| *z = 1.0);
        p.update_pi();
        p
    }

    /// Beta shape update: `e_t = e0 + <z>`, `f_t = f0 + 1 - <z>`.
    pub fn update_pi(&mut self) {
        for i in 0..self.z_mean.len() {
            self.e_t[i] = self.e0 + self.z_mean[i];
            self.f_t[i] = self.f0 + 1.0 - self.z_mean[i];
        }
    }
}

/// Digamma function, absolute error below 1e-10 for `x > 0`.
///
/// Recurrence up to `x >= 6`, then the asymptotic series.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("digamma requires x > 0, got {x}")));
    }
    let mut shift = 0.0;
    let mut x = x;
    while x < 6.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number series in 1/x^2.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    Ok(shift + libm::log(x) - 0.5 * inv - series)
}

/// Expectation of the improper-likelihood precision for one measurement
/// pixel block.
///
/// Enumerates the `2^L` indicator combinations of the block: each combination
/// keeps the sub-block of surviving measurements, inverts it, and embeds the
/// result (dead entries contribute zero precision). Weights are the
/// factorized Bernoulli masses of the combination.
pub fn block_expected_precision(z_mean: &[f64], r_block: &Mat) -> Result<Mat> {
    let l = z_mean.len();
    debug_assert_eq!(r_block.rows, l);
    let mut prec = Mat::zeros(l, l);
    for mask in 0u32..(1u32 << l) {
        let mut weight = 1.0;
        for (i, z) in z_mean.iter().enumerate() {
            weight *= if mask & (1 << i) != 0 { *z } else { 1.0 - *z };
        }
        if weight == 0.0 {
            continue;
        }
        let alive: Vec<usize> = (0..l).filter(|i| mask & (1 << i) != 0).collect();
        if alive.is_empty() {
            continue;
        }
        let sub = Mat::from_fn(alive.len(), alive.len(), |i, j| r_block[(alive[i], alive[j])]);
        let sub_inv =
            sub.inv_spd().map_err(|_| Error::NotPositiveDefinite("noise sub-block"))?;
        for (ii, &i) in alive.iter().enumerate() {
            for (jj, &j) in alive.iter().enumerate() {
                prec[(i, j)] += weight * sub_inv[(ii, jj)];
            }
        }
    }
    Ok(prec)
}

/// Log of the improper Gaussian data term for one indicator combination.
///
/// `b_block` is `E_q[(y - Hs)(y - Hs)^T]` restricted to the block; only the
/// surviving sub-block carries a quadratic term and a normalizer.
fn combo_loglik(b_block: &Mat, r_block: &Mat, alive: &[usize]) -> Result<f64> {
    if alive.is_empty() {
        return Ok(0.0);
    }
    let k = alive.len();
    let sub_r = Mat::from_fn(k, k, |i, j| r_block[(alive[i], alive[j])]);
    let sub_b = Mat::from_fn(k, k, |i, j| b_block[(alive[i], alive[j])]);
    let l = sub_r.cholesky().map_err(|_| Error::NotPositiveDefinite("noise sub-block"))?;
    let inv = crate::linalg::chol_solve(&l, &Mat::identity(k));
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += sub_b[(i, j)] * inv[(j, i)];
        }
    }
    let two_pi = 2.0 * core::f64::consts::PI;
    Ok(-0.5 * (quad + k as f64 * libm::log(two_pi) + chol_logdet(&l)))
}

/// Indicator update for one measurement pixel block.
///
/// `b_block` holds the posterior residual second moments of the block. For a
/// diagonal noise block this reduces to the scalar rule
/// `ln p(z_i=1) = <ln pi> - (b_ii / R_ii + ln(2 pi R_ii)) / 2`,
/// `ln p(z_i=0) = <ln(1 - pi)>`; cross-band blocks average the data term over
/// the `2^(L-1)` combinations of the sibling indicators.
pub fn update_outliers_block(
    b_block: &Mat,
    r_block: &Mat,
    e_t: &[f64],
    f_t: &[f64],
    z_out: &mut [f64],
    epsilon_z: f64,
) -> Result<()> {
    let l = z_out.len();
    let prev: Vec<f64> = z_out.to_vec();
    for i in 0..l {
        let psi_sum = digamma(e_t[i] + f_t[i])?;
        let ln_pi = digamma(e_t[i])? - psi_sum;
        let ln_1m_pi = digamma(f_t[i])? - psi_sum;
        let mut lp1 = ln_pi;
        let mut lp0 = ln_1m_pi;
        // Average the data term over sibling indicator combinations.
        for mask in 0u32..(1u32 << (l - 1)) {
            let mut weight = 1.0;
            let mut others = Vec::with_capacity(l - 1);
            let mut bit = 0;
            for (j, zj) in prev.iter().enumerate() {
                if j == i {
                    continue;
                }
                let on = mask & (1 << bit) != 0;
                weight *= if on { *zj } else { 1.0 - *zj };
                if on {
                    others.push(j);
                }
                bit += 1;
            }
            if weight == 0.0 {
                continue;
            }
            let mut with_i = others.clone();
            with_i.push(i);
            with_i.sort_unstable();
            lp1 += weight * combo_loglik(b_block, r_block, &with_i)?;
            lp0 += weight * combo_loglik(b_block, r_block, &others)?;
        }
        // z = sigmoid(lp1 - lp0), saturating in log space.
        let d = lp0 - lp1;
        let z = if d > 500.0 {
            0.0
        } else if d < -500.0 {
            1.0
        } else {
            1.0 / (1.0 + libm::exp(d))
        };
        z_out[i] = z.clamp(epsilon_z, 1.0);
    }
    Ok(())
}

/// Relative-change stopping rule over the iterated state mean.
#[derive(Debug)]
pub struct StoppingRule {
    threshold: f64,
    prev_change: Option<f64>,
    baseline: f64,
}

impl StoppingRule {
    pub fn new(threshold: f64, prior_mean: &[f64]) -> Self {
        let baseline = l2_norm(prior_mean).max(f64::MIN_POSITIVE);
        Self { threshold, prev_change: None, baseline }
    }

    /// Feed the change norm of the latest sweep; true means converged.
    pub fn converged(&mut self, change: f64) -> bool {
        let done = match self.prev_change {
            None => change <= self.threshold * self.baseline,
            Some(prev) => change <= self.threshold * prev,
        };
        self.prev_change = Some(change);
        done
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// One (iteration, mean-change, mean-z) record of the coordinate loop.
#[derive(Debug, Clone, Copy)]
pub struct IterTrace {
    pub iter: usize,
    pub mean_change: f64,
    pub mean_z: f64,
}

/// Dense Gaussian belief used by the full-covariance oracle path.
#[derive(Debug, Clone)]
pub struct DenseBelief {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

/// Dense measurement matrix of an observation.
pub fn dense_h(obs: &Observation, hr: GridDims) -> Result<Mat> {
    let n_y = obs.y.len();
    let mut h = Mat::zeros(n_y, hr.state_len());
    for i in 0..n_y {
        for (idx, w) in obs.operator.row_entries(i, hr)? {
            h[(i, idx)] = w;
        }
    }
    Ok(h)
}

/// Effective measurement covariance `<Sigma^-1>^-1`, assembled dense.
fn dense_effective_cov(obs: &Observation, z_mean: &[f64]) -> Result<Mat> {
    let n_y = obs.y.len();
    let n_m = obs.n_native_pixels();
    let l_m = obs.operator.bands();
    let r_block = obs.noise.pixel_block();
    let mut sigma_eff = Mat::zeros(n_y, n_y);
    for c in 0..n_m {
        let idx: Vec<usize> = (0..l_m).map(|b| b * n_m + c).collect();
        let z: Vec<f64> = idx.iter().map(|&i| z_mean[i]).collect();
        let prec = block_expected_precision(&z, &r_block)?;
        let cov = prec.inv_spd().map_err(|_| Error::NotPositiveDefinite("expected precision"))?;
        for (bi, &i) in idx.iter().enumerate() {
            for (bj, &j) in idx.iter().enumerate() {
                sigma_eff[(i, j)] = cov[(bi, bj)];
            }
        }
    }
    Ok(sigma_eff)
}

/// Kalman-form state update with the effective covariance, dense path.
pub fn dense_update_state(
    prior: &DenseBelief,
    obs: &Observation,
    hr: GridDims,
    z_mean: &[f64],
) -> Result<DenseBelief> {
    let h = dense_h(obs, hr)?;
    let sigma_eff = dense_effective_cov(obs, z_mean)?;
    let pht = prior.cov.matmul(&h.transpose());
    let s = h.matmul(&pht);
    let mut m = s.add(&sigma_eff);
    m.symmetrize();
    let m_chol = m
        .cholesky_jitter(1e-8)
        .map_err(|_| Error::NotPositiveDefinite("innovation matrix"))?;
    // K = P H^T M^-1  via  M K^T = H P
    let kt = crate::linalg::chol_solve(&m_chol, &pht.transpose());
    let k = kt.transpose();
    let y_pred = h.matvec(&prior.mean);
    let innov: Vec<f64> = obs.y.iter().zip(&y_pred).map(|(y, p)| y - p).collect();
    let corr = k.matvec(&innov);
    let mean: Vec<f64> = prior.mean.iter().zip(&corr).map(|(a, b)| a + b).collect();
    let mut cov = prior.cov.sub(&k.matmul(&m.matmul(&k.transpose())));
    cov.symmetrize();
    Ok(DenseBelief { mean, cov })
}

/// Posterior residual second-moment block for measurement pixel `c`,
/// dense path: `resid resid^T + (H P H^T)_block`.
fn dense_b_block(
    post: &DenseBelief,
    obs: &Observation,
    hr: GridDims,
    h: &Mat,
    c: usize,
) -> Result<Mat> {
    let n_m = obs.n_native_pixels();
    let l_m = obs.operator.bands();
    let idx: Vec<usize> = (0..l_m).map(|b| b * n_m + c).collect();
    let y_pred = h.matvec(&post.mean);
    let resid: Vec<f64> = idx.iter().map(|&i| obs.y[i] - y_pred[i]).collect();
    let mut b = Mat::from_fn(l_m, l_m, |i, j| resid[i] * resid[j]);
    // h_i P h_j^T over the block rows
    for (bi, &i) in idx.iter().enumerate() {
        let rows_i = obs.operator.row_entries(i, hr)?;
        for (bj, &j) in idx.iter().enumerate() {
            let rows_j = obs.operator.row_entries(j, hr)?;
            let mut acc = 0.0;
            for &(si, wi) in &rows_i {
                for &(sj, wj) in &rows_j {
                    acc += wi * post.cov[(si, sj)] * wj;
                }
            }
            b[(bi, bj)] += acc;
        }
    }
    Ok(b)
}

/// Full mean-field coordinate ascent on the dense representation.
///
/// Sweep order: pi update, expected precision, state update (always from the
/// prior), indicator update; stops on the relative-change rule or after
/// `max_iters` sweeps.
pub fn vbkf_update_dense(
    prior: &DenseBelief,
    obs: &Observation,
    hr: GridDims,
    cfg: &VBConfig,
) -> Result<(DenseBelief, OutlierPosterior, usize, Vec<IterTrace>)> {
    cfg.validate()?;
    let n_y = obs.y.len();
    if !cfg.robust {
        let outliers = OutlierPosterior::pinned(n_y, cfg);
        let post = dense_update_state(prior, obs, hr, &outliers.z_mean)?;
        return Ok((post, outliers, 1, Vec::new()));
    }

    let mut outliers = OutlierPosterior::init(n_y, cfg);
    let mut post = prior.clone();
    let mut stop = StoppingRule::new(cfg.rel_change_threshold, &prior.mean);
    let mut trace = Vec::new();
    let mut iters = 0;
    let h = dense_h(obs, hr)?;
    let r_block = obs.noise.pixel_block();
    let n_m = obs.n_native_pixels();
    let l_m = obs.operator.bands();
    for iter in 1..=cfg.max_iters {
        iters = iter;
        outliers.update_pi();
        let new_post = dense_update_state(prior, obs, hr, &outliers.z_mean)?;
        for c in 0..n_m {
            let b = dense_b_block(&new_post, obs, hr, &h, c)?;
            let idx: Vec<usize> = (0..l_m).map(|b| b * n_m + c).collect();
            let e_t: Vec<f64> = idx.iter().map(|&i| outliers.e_t[i]).collect();
            let f_t: Vec<f64> = idx.iter().map(|&i| outliers.f_t[i]).collect();
            let mut z: Vec<f64> = idx.iter().map(|&i| outliers.z_mean[i]).collect();
            update_outliers_block(&b, &r_block, &e_t, &f_t, &mut z, cfg.epsilon_z)?;
            for (bi, &i) in idx.iter().enumerate() {
                outliers.z_mean[i] = z[bi];
            }
        }
        let change = l2_norm(
            &new_post.mean.iter().zip(&post.mean).map(|(a, b)| a - b).collect::<Vec<f64>>(),
        );
        let mean_z = outliers.z_mean.iter().sum::<f64>() / n_y as f64;
        trace.push(IterTrace { iter, mean_change: change, mean_z });
        post = new_post;
        if stop.converged(change) {
            break;
        }
    }
    Ok((post, outliers, iters, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Modality;
    use crate::sensor::{DegradationOperator, NoiseModel};

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    #[test]
    fn digamma_reference_values() {
        assert!((digamma(1.0).unwrap() + EULER_GAMMA).abs() < 1e-10);
        let want_half = -EULER_GAMMA - 2.0 * core::f64::consts::LN_2;
        assert!((digamma(0.5).unwrap() - want_half).abs() < 1e-10);
        assert!(digamma(0.0).is_err());
        assert!(digamma(-1.0).is_err());
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.1, 0.7, 1.3, 2.9, 5.5, 17.0, 123.4] {
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((lhs - 1.0 / x).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn expected_precision_diagonal_cases() {
        let r = Mat::from_rows(1, 1, vec![2.0]).unwrap();
        let p = block_expected_precision(&[0.5], &r).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-15);

        let r1 = Mat::identity(1);
        let p1 = block_expected_precision(&[1.0], &r1).unwrap();
        assert!((p1[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn expected_precision_matches_enumeration() {
        // 2x2 cross-band block, z = (1, 0.5): brute-force combo average.
        let r = Mat::from_rows(2, 2, vec![1.0, 0.1, 0.1, 2.0]).unwrap();
        let z = [1.0, 0.5];
        let got = block_expected_precision(&z, &r).unwrap();

        let full = r.inv_spd().unwrap();
        let mut want = full.scale(z[0] * z[1]); // combo (1,1)
        want[(0, 0)] += z[0] * (1.0 - z[1]) * 1.0; // combo (1,0): 1/R_00
        // combos (0,*) have zero weight because z_0 = 1
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[(i, j)] - want[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pi_update_conserves_mass() {
        let cfg = VBConfig::new(0.98, 0.02);
        let mut post = OutlierPosterior::init(3, &cfg);
        post.z_mean = vec![1.0, 0.0, 0.37];
        post.update_pi();
        assert!((post.e_t[0] - 1.98).abs() < 1e-15);
        assert!((post.f_t[0] - 0.02).abs() < 1e-15);
        assert!((post.e_t[1] - 0.98).abs() < 1e-15);
        assert!((post.f_t[1] - 1.02).abs() < 1e-15);
        for i in 0..3 {
            assert!((post.e_t[i] + post.f_t[i] - (0.98 + 0.02 + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_residual_forces_outlier() {
        let r = Mat::identity(1);
        let b = Mat::from_rows(1, 1, vec![1e6]).unwrap();
        let mut z = vec![0.5];
        update_outliers_block(&b, &r, &[1.0], &[1.0], &mut z, EPSILON_Z).unwrap();
        assert!(z[0] < 1e-3);
    }

    #[test]
    fn zero_residual_matches_digamma_prior() {
        // b = 0, R = 1/(2 pi) makes the normalizer vanish:
        // z = sigmoid(psi(e_t) - psi(f_t)).
        let r = Mat::from_rows(1, 1, vec![1.0 / (2.0 * core::f64::consts::PI)]).unwrap();
        let b = Mat::zeros(1, 1);
        let (e_t, f_t) = (0.98, 0.02);
        let mut z = vec![0.5];
        update_outliers_block(&b, &r, &[e_t], &[f_t], &mut z, EPSILON_Z).unwrap();
        let d = digamma(e_t).unwrap() - digamma(f_t).unwrap();
        let want = 1.0 / (1.0 + (-d).exp());
        assert!((z[0] - want).abs() < 1e-12);
    }

    #[test]
    fn equal_residuals_get_equal_z() {
        let r = Mat::identity(1).scale(0.5);
        let b = Mat::from_rows(1, 1, vec![0.8]).unwrap();
        let mut z1 = vec![0.5];
        let mut z2 = vec![0.5];
        update_outliers_block(&b, &r, &[1.2], &[0.4], &mut z1, EPSILON_Z).unwrap();
        update_outliers_block(&b, &r, &[1.2], &[0.4], &mut z2, EPSILON_Z).unwrap();
        assert_eq!(z1, z2);
    }

    fn scalar_obs(y: f64, r: f64) -> Observation {
        Observation {
            y: vec![y],
            modality: Modality::Fine,
            date: 0,
            delta_days: 1,
            operator: DegradationOperator::fine(1),
            noise: NoiseModel::new(Mat::identity(1), r).unwrap(),
        }
    }

    #[test]
    fn scalar_kalman_update() {
        // prior N(0, 1), H = 1, R = 1, y = 2, z = 1 -> posterior N(1, 0.5)
        let hr = GridDims::new(1, 1, 1);
        let prior = DenseBelief { mean: vec![0.0], cov: Mat::identity(1) };
        let post = dense_update_state(&prior, &scalar_obs(2.0, 1.0), hr, &[1.0]).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-12);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn floored_z_ignores_data() {
        let hr = GridDims::new(1, 1, 1);
        let prior = DenseBelief { mean: vec![0.0], cov: Mat::identity(1) };
        let post = dense_update_state(&prior, &scalar_obs(2.0, 1.0), hr, &[EPSILON_Z]).unwrap();
        assert!(post.mean[0].abs() <= 1e-4 * 2.0);
    }

    #[test]
    fn zero_innovation_keeps_mean_shrinks_cov() {
        let hr = GridDims::new(1, 1, 1);
        let prior = DenseBelief { mean: vec![0.7], cov: Mat::identity(1) };
        let post = dense_update_state(&prior, &scalar_obs(0.7, 1.0), hr, &[1.0]).unwrap();
        assert!((post.mean[0] - 0.7).abs() < 1e-12);
        assert!(post.cov[(0, 0)] < 1.0);
    }

    #[test]
    fn clean_scalar_converges_fast() {
        let hr = GridDims::new(1, 1, 1);
        let prior = DenseBelief { mean: vec![0.5], cov: Mat::identity(1) };
        let cfg = VBConfig::new(0.98, 0.02);
        let (_, outliers, iters, _) =
            vbkf_update_dense(&prior, &scalar_obs(0.6, 1.0), hr, &cfg).unwrap();
        assert!(iters <= 3, "iters = {iters}");
        assert!(outliers.z_mean[0] > 0.9);
    }

    #[test]
    fn injected_outlier_is_suppressed() {
        // 50 sigma outlier: the posterior mean must stay near the prior.
        let hr = GridDims::new(1, 1, 1);
        let prior = DenseBelief { mean: vec![0.0], cov: Mat::identity(1).scale(0.5) };
        let cfg = VBConfig::new(0.5, 0.5);
        let obs = scalar_obs(50.0, 1.0);
        let (post, outliers, _, _) = vbkf_update_dense(&prior, &obs, hr, &cfg).unwrap();
        assert!(outliers.z_mean[0] < 1e-3);
        assert!(post.mean[0].abs() < 3.0 * 0.5f64.sqrt());
    }

    #[test]
    fn clean_limit_matches_plain_kalman() {
        // e0 huge pins z ~ 1: robust update equals the non-robust one.
        let hr = GridDims::new(2, 2, 1);
        let mut cov = Mat::identity(4).scale(0.3);
        cov[(0, 1)] = 0.05;
        cov[(1, 0)] = 0.05;
        let prior = DenseBelief { mean: vec![0.1, 0.2, 0.3, 0.4], cov };
        let obs = Observation {
            y: vec![0.15, 0.22, 0.28, 0.41],
            modality: Modality::Fine,
            date: 0,
            delta_days: 1,
            operator: DegradationOperator::fine(1),
            noise: NoiseModel::new(Mat::identity(1), 0.1).unwrap(),
        };
        let mut robust_cfg = VBConfig::new(1e12, 1e-6);
        robust_cfg.max_iters = 20;
        let (post_r, _, _, _) = vbkf_update_dense(&prior, &obs, hr, &robust_cfg).unwrap();
        let mut plain_cfg = VBConfig::new(0.5, 0.5);
        plain_cfg.robust = false;
        let (post_p, _, _, _) = vbkf_update_dense(&prior, &obs, hr, &plain_cfg).unwrap();
        for i in 0..4 {
            assert!((post_r.mean[i] - post_p.mean[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn z_monotone_in_residual() {
        let r = Mat::identity(1);
        let mut last = 1.0;
        for step in 0..60 {
            let resid = step as f64 * 0.2;
            let b = Mat::from_rows(1, 1, vec![resid * resid]).unwrap();
            let mut z = vec![0.5];
            update_outliers_block(&b, &r, &[1.0], &[1.0], &mut z, EPSILON_Z).unwrap();
            assert!(z[0] <= last + 1e-12, "not monotone at residual {resid}");
            last = z[0];
        }
    }
}
