//! Distributed block-diagonal filtering engine.
//!
//! The state is split into one group per HR pixel (all bands of that pixel);
//! the belief keeps only the per-group covariance blocks. Prediction through
//! the network dynamics uses a hybrid rule: third-degree cubature points for
//! the group's own entries and shared random complement samples for the rest
//! of the image, with the network evaluated incrementally per replaced pixel.
//! Measurement updates exploit the non-overlapping sensor footprints to
//! decouple into small per-measurement-pixel systems.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cubature::cubature_points;
use crate::dynamics::{AuxInput, NnPredictContext, TransitionModel, EPSILON_VAR};
use crate::error::{Error, Result};
use crate::linalg::{chol_solve, Mat};
use crate::raster::{GridDims, Modality};
use crate::sensor::Observation;
use crate::vbkf::{
    block_expected_precision, l2_norm, update_outliers_block, DenseBelief, GaussianBelief,
    IterTrace, OutlierPosterior, StoppingRule, VBConfig,
};

/// Default number of shared complement samples per prediction step.
pub const DEFAULT_N_SAMPLES: usize = 8;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Standard normal draw (Box–Muller, one value per call for determinism).
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Converts a planar band-major image buffer to pixel-major state order.
pub fn planar_to_pixel_major(data: &[f64], dims: GridDims) -> Vec<f64> {
    let (n, l) = (dims.n_pixels(), dims.bands);
    let mut out = vec![0.0; data.len()];
    for p in 0..n {
        for b in 0..l {
            out[p * l + b] = data[b * n + p];
        }
    }
    out
}

/// Converts a pixel-major state buffer to planar band-major image order.
pub fn pixel_major_to_planar(v: &[f64], dims: GridDims) -> Vec<f64> {
    let (n, l) = (dims.n_pixels(), dims.bands);
    let mut out = vec![0.0; v.len()];
    for p in 0..n {
        for b in 0..l {
            out[b * n + p] = v[p * l + b];
        }
    }
    out
}

/// Time/measurement propagation of the block-diagonal belief.
///
/// RANDOM_WALK takes the exact shortcut (identity mean, `Δ·diag(q0)` added to
/// each block). The network model draws `n_samples` full-image complement
/// samples from the belief (shared across groups, seeded deterministically),
/// then per group propagates `2·L_H` cubature points through the network and
/// moment-matches, adding the averaged predicted variance.
pub fn predict_distributed(
    post: &GaussianBelief,
    model: &TransitionModel,
    aux: &AuxInput,
    n_samples: usize,
    seed: u64,
) -> Result<GaussianBelief> {
    let dims = post.dims;
    let (n, l) = (dims.n_pixels(), dims.bands);
    match model {
        TransitionModel::RandomWalk => {
            let mut blocks = post.blocks.clone();
            for (p, block) in blocks.iter_mut().enumerate() {
                for b in 0..l {
                    block[(b, b)] += (aux.delta_days * aux.q0[b * n + p]).max(EPSILON_VAR);
                }
            }
            GaussianBelief::new(post.mean.clone(), blocks, dims)
        }
        TransitionModel::Nn(params) => {
            if n_samples == 0 {
                return Err(Error::InvalidArgument(String::from("need at least one complement sample")));
            }
            let chols: Vec<Mat> = post
                .blocks
                .iter()
                .map(|b| b.cholesky_jitter(1e-10))
                .collect::<Result<_>>()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut contexts = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let mut sample = vec![0.0; post.mean.len()];
                for p in 0..n {
                    let eps: Vec<f64> = (0..l).map(|_| gaussian(&mut rng)).collect();
                    for a in 0..l {
                        let mut v = post.mean[p * l + a];
                        for b in 0..=a {
                            v += chols[p][(a, b)] * eps[b];
                        }
                        sample[p * l + a] = v;
                    }
                }
                let planar = pixel_major_to_planar(&sample, dims);
                contexts.push(NnPredictContext::new(params, &planar, aux, dims)?);
            }
            let mut mean = vec![0.0; post.mean.len()];
            let mut blocks = Vec::with_capacity(n);
            let weight = 1.0 / (2 * l * n_samples) as f64;
            for p in 0..n {
                let cub = cubature_points(&post.mean[p * l..(p + 1) * l], &post.blocks[p])?;
                let mut m = vec![0.0; l];
                let mut second = Mat::zeros(l, l);
                let mut var = vec![0.0; l];
                for point in &cub.points {
                    for ctx in &contexts {
                        let (mu, sig) = ctx.predict_pixel(p, point);
                        for a in 0..l {
                            m[a] += weight * mu[a];
                            var[a] += weight * sig[a];
                            for b in 0..l {
                                second[(a, b)] += weight * mu[a] * mu[b];
                            }
                        }
                    }
                }
                let mut block = Mat::from_fn(l, l, |a, b| second[(a, b)] - m[a] * m[b]);
                for a in 0..l {
                    block[(a, a)] += var[a];
                }
                block.symmetrize();
                mean[p * l..(p + 1) * l].copy_from_slice(&m);
                blocks.push(block);
            }
            GaussianBelief::new(mean, blocks, dims)
        }
    }
}

/// Per-measurement-pixel decoupled system pieces.
struct PixelSystem {
    footprint: Vec<usize>,
    weights: Vec<f64>,
    meas_idx: Vec<usize>,
}

fn pixel_system(obs: &Observation, c: usize, hr: GridDims) -> PixelSystem {
    let l_m = obs.operator.bands();
    PixelSystem {
        footprint: obs.operator.footprint(c, hr),
        weights: (0..l_m).map(|b| obs.operator.footprint_weight(b)).collect(),
        meas_idx: obs.pixel_meas_indices(c),
    }
}

/// `H P H^T` restricted to the block of native pixel `c` (block-diagonal `P`).
fn innovation_cov(sys: &PixelSystem, blocks: &[Mat], l_m: usize) -> Mat {
    Mat::from_fn(l_m, l_m, |a, b| {
        let mut acc = 0.0;
        for &p in &sys.footprint {
            acc += blocks[p][(a, b)];
        }
        sys.weights[a] * sys.weights[b] * acc
    })
}

/// Innovation `y - H s` restricted to native pixel `c`.
fn innovation_mean(sys: &PixelSystem, obs: &Observation, mean: &[f64], l: usize) -> Vec<f64> {
    let l_m = sys.meas_idx.len();
    (0..l_m)
        .map(|b| {
            let mut pred = 0.0;
            for &p in &sys.footprint {
                pred += mean[p * l + b];
            }
            obs.y[sys.meas_idx[b]] - sys.weights[b] * pred
        })
        .collect()
}

/// Structured measurement update: independent per-footprint systems, gains
/// `K^(g) = C^(g) M^{-1}` with `M = H P H^T + <Sigma^{-1}>^{-1}`, block
/// covariances updated as `P^(g) - K^(g) C^(g)T` (cross-pixel terms dropped).
pub fn update_distributed(
    prior: &GaussianBelief,
    obs: &Observation,
    z_mean: &[f64],
) -> Result<GaussianBelief> {
    let hr = prior.dims;
    let l = hr.bands;
    let l_m = obs.operator.bands();
    if obs.y.len() != z_mean.len() {
        return Err(Error::DimensionMismatch {
            expected: obs.y.len(),
            got: z_mean.len(),
            what: "indicator vector",
        });
    }
    let r_block = obs.noise.pixel_block();
    let mut mean = prior.mean.clone();
    let mut blocks = prior.blocks.clone();
    for c in 0..obs.n_native_pixels() {
        let sys = pixel_system(obs, c, hr);
        let z_blk: Vec<f64> = sys.meas_idx.iter().map(|&i| z_mean[i]).collect();
        let prec = block_expected_precision(&z_blk, &r_block)?;
        let r_eff = prec.inv_spd().map_err(|_| Error::NotPositiveDefinite("expected precision"))?;
        let s = innovation_cov(&sys, &prior.blocks, l_m);
        let mut m = s.add(&r_eff);
        m.symmetrize();
        let m_chol = m
            .cholesky_jitter(1e-8)
            .map_err(|_| Error::NotPositiveDefinite("innovation matrix"))?;
        let nu = innovation_mean(&sys, obs, &prior.mean, l);
        for &p in &sys.footprint {
            // C^(g) = P^(g) H_g^T: column b scaled by the row weight.
            let c_mat = Mat::from_fn(l, l_m, |a, b| prior.blocks[p][(a, b)] * sys.weights[b]);
            // K = C M^{-1}  via  M X = C^T
            let x = chol_solve(&m_chol, &c_mat.transpose());
            let k = x.transpose();
            let corr = k.matvec(&nu);
            for a in 0..l {
                mean[p * l + a] += corr[a];
            }
            // K M K^T = C M^{-1} C^T = K C^T
            let mut newb = blocks[p].sub(&k.matmul(&c_mat.transpose()));
            newb.symmetrize();
            blocks[p] = newb;
        }
    }
    GaussianBelief::new(mean, blocks, hr)
}

/// Posterior residual second-moment block for native pixel `c`.
///
/// The measurement update is exact within a footprint group, so the
/// posterior innovation covariance is computed at group level as
/// `S − S M⁻¹ S` with `M = S + <Sigma^{-1}>^{-1}` (prior `S`); the stored
/// per-pixel blocks have dropped the within-footprint correlations and
/// would badly overestimate it.
fn block_b(
    sys: &PixelSystem,
    obs: &Observation,
    prior: &GaussianBelief,
    post_mean: &[f64],
    r_eff: &Mat,
) -> Result<Mat> {
    let l_m = sys.meas_idx.len();
    let nu = innovation_mean(sys, obs, post_mean, prior.dims.bands);
    let s = innovation_cov(sys, &prior.blocks, l_m);
    let mut m = s.add(r_eff);
    m.symmetrize();
    let m_chol = m
        .cholesky_jitter(1e-8)
        .map_err(|_| Error::NotPositiveDefinite("innovation matrix"))?;
    let x = chol_solve(&m_chol, &s); // M^{-1} S
    let mut s_post = s.sub(&s.matmul(&x));
    s_post.symmetrize();
    Ok(Mat::from_fn(l_m, l_m, |a, b| nu[a] * nu[b] + s_post[(a, b)]))
}

/// Mean-field coordinate ascent on the block-diagonal representation; same
/// sweep order and stopping rule as the dense path.
pub fn vbkf_update_distributed(
    prior: &GaussianBelief,
    obs: &Observation,
    cfg: &VBConfig,
) -> Result<(GaussianBelief, OutlierPosterior, usize, Vec<IterTrace>)> {
    cfg.validate()?;
    let n_y = obs.y.len();
    if !cfg.robust {
        let outliers = OutlierPosterior::pinned(n_y, cfg);
        let post = update_distributed(prior, obs, &outliers.z_mean)?;
        return Ok((post, outliers, 1, Vec::new()));
    }
    let mut outliers = OutlierPosterior::init(n_y, cfg);
    let mut post = prior.clone();
    let mut stop = StoppingRule::new(cfg.rel_change_threshold, &prior.mean);
    let mut trace = Vec::new();
    let mut iters = 0;
    let r_block = obs.noise.pixel_block();
    for iter in 1..=cfg.max_iters {
        iters = iter;
        outliers.update_pi();
        let new_post = update_distributed(prior, obs, &outliers.z_mean)?;
        for c in 0..obs.n_native_pixels() {
            let sys = pixel_system(obs, c, prior.dims);
            let z_blk: Vec<f64> = sys.meas_idx.iter().map(|&i| outliers.z_mean[i]).collect();
            let prec = block_expected_precision(&z_blk, &r_block)?;
            let r_eff = prec
                .inv_spd()
                .map_err(|_| Error::NotPositiveDefinite("expected precision"))?;
            let b = block_b(&sys, obs, prior, &new_post.mean, &r_eff)?;
            let e_t: Vec<f64> = sys.meas_idx.iter().map(|&i| outliers.e_t[i]).collect();
            let f_t: Vec<f64> = sys.meas_idx.iter().map(|&i| outliers.f_t[i]).collect();
            let mut z: Vec<f64> = sys.meas_idx.iter().map(|&i| outliers.z_mean[i]).collect();
            update_outliers_block(&b, &r_block, &e_t, &f_t, &mut z, cfg.epsilon_z)?;
            for (bi, &i) in sys.meas_idx.iter().enumerate() {
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

/// Covariance representation carried across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum EnginePath {
    /// Full-covariance oracle (random-walk dynamics only).
    Dense,
    /// Block-diagonal per-pixel covariance.
    Distributed,
}

/// Engine configuration for a fusion run.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub vb: VBConfig,
    /// Per-pixel block of the initial covariance `P_0`.
    pub p0_block: Mat,
    /// Scale applied to `P_0` at initialization.
    pub p0_scale: f64,
    /// Shared complement samples per prediction step.
    pub n_samples: usize,
    pub seed: u64,
    /// Force sampling of the full complement state. The engine's shared
    /// samples already cover the full image, so this is accepted for
    /// compatibility and has no effect.
    pub full_state_sampling: bool,
    pub path: EnginePath,
}

impl EngineConfig {
    pub fn new(vb: VBConfig, p0_block: Mat) -> Self {
        EngineConfig {
            vb,
            p0_block,
            p0_scale: 1e-10,
            n_samples: DEFAULT_N_SAMPLES,
            seed: 0,
            full_state_sampling: true,
            path: EnginePath::Distributed,
        }
    }
}

/// Per-step filtering output.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub date: i32,
    pub modality: Modality,
    /// Posterior belief (block-diagonal view even on the dense path).
    pub belief: GaussianBelief,
    /// None for the initialization step.
    pub outliers: Option<OutlierPosterior>,
    pub iters: usize,
}

fn dense_from_blocks(belief: &GaussianBelief) -> DenseBelief {
    let l = belief.dims.bands;
    let n = belief.dims.n_pixels();
    let mut cov = Mat::zeros(n * l, n * l);
    for (p, block) in belief.blocks.iter().enumerate() {
        for a in 0..l {
            for b in 0..l {
                cov[(p * l + a, p * l + b)] = block[(a, b)];
            }
        }
    }
    DenseBelief { mean: belief.mean.clone(), cov }
}

fn blocks_from_dense(dense: &DenseBelief, dims: GridDims) -> Result<GaussianBelief> {
    let l = dims.bands;
    let blocks = (0..dims.n_pixels())
        .map(|p| Mat::from_fn(l, l, |a, b| dense.cov[(p * l + a, p * l + b)]))
        .collect();
    GaussianBelief::new(dense.mean.clone(), blocks, dims)
}

/// Runs the full filtering recursion over a date-ordered observation list.
///
/// The first observation must be FINE at HR resolution: it initializes the
/// state mean directly (divided by the band gains) with covariance
/// `p0_scale · P_0`. Every later observation triggers predict + variational
/// update on the configured path. `q0` is planar band-major.
pub fn fuse_sequence(
    observations: &[Observation],
    hr: GridDims,
    model: &TransitionModel,
    q0: &[f64],
    cfg: &EngineConfig,
) -> Result<Vec<StepResult>> {
    cfg.vb.validate()?;
    let first = observations
        .first()
        .ok_or_else(|| Error::InvalidArgument(String::from("empty observation sequence")))?;
    if first.modality != Modality::Fine || first.operator.decimation != 1 {
        return Err(Error::InvalidArgument(String::from(
            "first observation must be FINE at HR resolution",
        )));
    }
    if first.y.len() != hr.state_len() {
        return Err(Error::DimensionMismatch {
            expected: hr.state_len(),
            got: first.y.len(),
            what: "initialization image",
        });
    }
    if q0.len() != hr.state_len() {
        return Err(Error::DimensionMismatch { expected: hr.state_len(), got: q0.len(), what: "q0" });
    }
    let (n, l) = (hr.n_pixels(), hr.bands);
    let mut mean = vec![0.0; hr.state_len()];
    for b in 0..l {
        let g = first.operator.gains[b];
        for p in 0..n {
            mean[p * l + b] = first.y[b * n + p] / g;
        }
    }
    let p0 = cfg.p0_block.scale(cfg.p0_scale);
    let mut belief = GaussianBelief::uniform(mean, p0, hr)?;
    let mut results = vec![StepResult {
        date: first.date,
        modality: first.modality,
        belief: belief.clone(),
        outliers: None,
        iters: 0,
    }];
    let mut dense = if cfg.path == EnginePath::Dense { Some(dense_from_blocks(&belief)) } else { None };
    let mut prev_date = first.date;

    for (k, obs) in observations.iter().enumerate().skip(1) {
        let delta = obs.date - prev_date;
        if delta <= 0 {
            return Err(Error::InvalidArgument(String::from("observation dates must be strictly increasing")));
        }
        let aux = AuxInput::new(q0.to_vec(), obs.date as f64, delta as f64)?;
        let step_seed = splitmix64(cfg.seed ^ splitmix64(k as u64));
        let (post, outliers, iters) = match cfg.path {
            EnginePath::Distributed => {
                let prior = predict_distributed(&belief, model, &aux, cfg.n_samples, step_seed)?;
                let (post, out, iters, _) = vbkf_update_distributed(&prior, obs, &cfg.vb)?;
                (post, out, iters)
            }
            EnginePath::Dense => {
                let mut prior = dense.take().expect("dense belief present");
                match model {
                    TransitionModel::RandomWalk => {
                        for b in 0..l {
                            for p in 0..n {
                                let i = p * l + b;
                                prior.cov[(i, i)] += (delta as f64 * q0[b * n + p]).max(EPSILON_VAR);
                            }
                        }
                    }
                    TransitionModel::Nn(_) => {
                        return Err(Error::InvalidArgument(String::from(
                            "dense oracle path supports random-walk dynamics only",
                        )));
                    }
                }
                let (post, out, iters, _) = crate::vbkf::vbkf_update_dense(&prior, obs, hr, &cfg.vb)?;
                let block_view = blocks_from_dense(&post, hr)?;
                dense = Some(post);
                (block_view, out, iters)
            }
        };
        belief = post;
        prev_date = obs.date;
        results.push(StepResult {
            date: obs.date,
            modality: obs.modality,
            belief: belief.clone(),
            outliers: Some(outliers),
            iters,
        });
    }
    Ok(results)
}
