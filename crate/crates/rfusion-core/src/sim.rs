//! Synthetic scene simulator.
//!
//! Generates ground-truth reflectance sequences of a drifting/oscillating
//! water body over land (two spectral classes with a smooth mixed boundary
//! and static seeded texture), degrades them through the sensor models on a
//! date/modality schedule, and optionally contaminates observations with
//! cloud-like additive offsets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{GridDims, GridImage, Modality};
use crate::sensor::{DegradationOperator, Observation, Preset};

/// One acquisition slot of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleEntry {
    /// Days since the sequence epoch.
    pub day: i32,
    pub modality: Modality,
}

/// Water-body motion model: linear center drift plus sinusoidal radius.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WaterDynamics {
    /// Initial center in HR pixel coordinates.
    pub center: (f64, f64),
    /// Center drift in pixels per day.
    pub drift: (f64, f64),
    /// Base radius in pixels.
    pub radius: f64,
    /// Radius oscillation amplitude in pixels.
    pub radius_amplitude: f64,
    /// Radius oscillation period in days.
    pub radius_period: f64,
    /// Width of the smooth water/land boundary in pixels.
    pub edge_width: f64,
}

/// Cloud contamination: an additive offset over a rectangle of one
/// observation, all bands.
#[derive(Debug, Clone, Copy)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CloudSpec {
    /// Index into the observation schedule.
    pub step: usize,
    /// `(x, y, w, h)` in the observation's native resolution.
    pub rect: (usize, usize, usize, usize),
    /// Additive reflectance offset (positive = bright cloud, negative =
    /// shadow); must be nonzero.
    pub magnitude: f64,
}

/// Full description of a synthetic scenario.
#[derive(Debug, Clone)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub schedule: Vec<ScheduleEntry>,
    pub water: WaterDynamics,
    /// Per-band land reflectance.
    pub land: Vec<f64>,
    /// Per-band water reflectance.
    pub water_refl: Vec<f64>,
    /// Static per-pixel texture amplitude.
    pub texture_amp: f64,
    /// Per-pixel per-band per-day variance of an independent Gaussian random
    /// walk added to the texture (0 = static texture).
    #[cfg_attr(feature = "serde", serde(default))]
    pub texture_walk: f64,
    /// Noise/prior preset used for the degraded observations.
    pub preset: Preset,
    /// Coarse-sensor footprint edge length.
    pub decimation: usize,
    /// Per-band sensor gains (applied by both modalities' operators as
    /// configured; fine gain fixed at 1).
    pub coarse_gains: Vec<f64>,
    /// Multiplier on the sampled observation noise standard deviation
    /// (1 = preset level, 0 = noise-free measurements).
    pub noise_amp: f64,
    pub clouds: Vec<CloudSpec>,
}

impl ScenarioConfig {
    /// Desk-scale default: 27x27 HR grid, decimation-3 coarse sensor, a
    /// gently oscillating water disk and a fine/coarse alternating schedule.
    pub fn desk(preset: Preset) -> Self {
        let mut schedule = vec![ScheduleEntry { day: 0, modality: Modality::Fine }];
        for k in 1..12 {
            let modality = if k % 4 == 0 { Modality::Fine } else { Modality::Coarse };
            schedule.push(ScheduleEntry { day: 4 * k, modality });
        }
        ScenarioConfig {
            width: 27,
            height: 27,
            bands: 2,
            schedule,
            water: WaterDynamics {
                center: (13.0, 13.0),
                drift: (0.0, 0.0),
                radius: 7.0,
                radius_amplitude: 2.0,
                radius_period: 32.0,
                edge_width: 2.0,
            },
            land: vec![0.45, 0.55],
            water_refl: vec![0.12, 0.06],
            texture_amp: 0.01,
            texture_walk: 0.0,
            preset,
            decimation: 3,
            coarse_gains: vec![1.0, 1.0],
            noise_amp: 1.0,
            clouds: Vec::new(),
        }
    }

    /// Desk-scale drifting variant: the disk moves steadily, which a
    /// data-driven dynamics model can learn and a random walk cannot. The
    /// drift keeps the disk inside the grid from day -80 through day +44.
    pub fn desk_drift(preset: Preset) -> Self {
        let mut cfg = Self::desk(preset);
        cfg.water.center = (12.0, 12.0);
        cfg.water.drift = (0.10, 0.075);
        cfg.water.radius_amplitude = 0.0;
        cfg
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.width, self.height, self.bands)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(Error::InvalidArgument(String::from("degenerate scene dims")));
        }
        if self.land.len() != self.bands || self.water_refl.len() != self.bands {
            return Err(Error::InvalidArgument(String::from("class reflectances must have one value per band")));
        }
        if self.schedule.is_empty() {
            return Err(Error::InvalidArgument(String::from("empty schedule")));
        }
        if self.schedule.windows(2).any(|w| w[1].day <= w[0].day) {
            return Err(Error::InvalidArgument(String::from("schedule dates must be strictly increasing")));
        }
        if !(self.water.edge_width > 0.0) {
            return Err(Error::InvalidArgument(String::from("edge width must be positive")));
        }
        if self.texture_walk < 0.0 {
            return Err(Error::InvalidArgument(String::from("texture walk variance must be >= 0")));
        }
        if self.noise_amp < 0.0 {
            return Err(Error::InvalidArgument(String::from("noise amplitude must be >= 0")));
        }
        for cloud in &self.clouds {
            if cloud.magnitude == 0.0 {
                return Err(Error::InvalidArgument(String::from("cloud magnitude must be nonzero")));
            }
            if cloud.step >= self.schedule.len() {
                return Err(Error::InvalidArgument(String::from("cloud step beyond schedule")));
            }
            let (nw, nh) = self.native_dims(self.schedule[cloud.step].modality)?;
            let (x, y, w, h) = cloud.rect;
            if w == 0 || h == 0 || x + w > nw || y + h > nh {
                return Err(Error::InvalidArgument(String::from("cloud rect outside native bounds")));
            }
        }
        Ok(())
    }

    /// Native grid size of a modality.
    pub fn native_dims(&self, modality: Modality) -> Result<(usize, usize)> {
        match modality {
            Modality::Coarse => self.operator(Modality::Coarse).out_dims(self.dims()),
            _ => Ok((self.width, self.height)),
        }
    }

    /// Degradation operator of a modality.
    pub fn operator(&self, modality: Modality) -> DegradationOperator {
        match modality {
            Modality::Coarse => DegradationOperator::coarse(self.decimation, self.bands)
                .with_gains(self.coarse_gains.clone()),
            _ => DegradationOperator::fine(self.bands),
        }
    }

    /// Continuous water fraction at pixel center `(x, y)` on day `day`.
    pub fn water_fraction(&self, day: i32, x: usize, y: usize) -> f64 {
        let t = day as f64;
        let cx = self.water.center.0 + self.water.drift.0 * t;
        let cy = self.water.center.1 + self.water.drift.1 * t;
        let radius = self.water.radius
            + self.water.radius_amplitude
                * libm::sin(2.0 * core::f64::consts::PI * t / self.water.radius_period);
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let dist = libm::sqrt(dx * dx + dy * dy);
        ((radius - dist) / self.water.edge_width + 0.5).clamp(0.0, 1.0)
    }

    /// Binary ground-truth class map on day `day` (1 = water).
    pub fn class_map(&self, day: i32) -> Vec<u8> {
        let mut map = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                map.push(if self.water_fraction(day, x, y) > 0.5 { 1 } else { 0 });
            }
        }
        map
    }
}

/// Static per-pixel texture field, deterministic in `seed`.
fn texture(cfg: &ScenarioConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.bands * cfg.width * cfg.height)
        .map(|_| cfg.texture_amp * (2.0 * rng.gen::<f64>() - 1.0))
        .collect()
}

/// Ground-truth latent frames for every schedule entry, values in `[0, 1]`.
pub fn generate_scene(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<GridImage>> {
    cfg.validate()?;
    let mut tex = texture(cfg, seed);
    let n = cfg.width * cfg.height;
    let mut walk_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7477616c6b); // texture walk stream
    let mut prev_day = cfg.schedule[0].day;
    let mut frames = Vec::with_capacity(cfg.schedule.len());
    for entry in &cfg.schedule {
        if cfg.texture_walk > 0.0 && entry.day > prev_day {
            let step_std = libm::sqrt(cfg.texture_walk * (entry.day - prev_day) as f64);
            for t in tex.iter_mut() {
                let u1: f64 = walk_rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = walk_rng.gen();
                *t += step_std
                    * libm::sqrt(-2.0 * libm::log(u1))
                    * libm::cos(2.0 * core::f64::consts::PI * u2);
            }
        }
        prev_day = entry.day;
        let mut data = vec![0.0; cfg.bands * n];
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let f = cfg.water_fraction(entry.day, x, y);
                let p = y * cfg.width + x;
                for b in 0..cfg.bands {
                    let v = f * cfg.water_refl[b] + (1.0 - f) * cfg.land[b] + tex[b * n + p];
                    data[b * n + p] = v.clamp(0.0, 1.0);
                }
            }
        }
        frames.push(GridImage::new(cfg.width, cfg.height, cfg.bands, data, entry.day, Modality::Latent)?);
    }
    Ok(frames)
}

/// Ground-truth frames on an arbitrary day list (historical datasets for
/// q0 estimation and dynamics training reuse the scene generator).
pub fn generate_history(cfg: &ScenarioConfig, days: &[i32], seed: u64) -> Result<Vec<GridImage>> {
    let mut hist_cfg = cfg.clone();
    hist_cfg.schedule = days.iter().map(|&day| ScheduleEntry { day, modality: Modality::Fine }).collect();
    generate_scene(&hist_cfg, seed)
}

/// Degrades the latent frames into the scheduled observations, adding
/// seeded zero-mean Gaussian noise with the preset covariance (per-step
/// seeds, so steps can be generated independently).
pub fn observe_schedule(scene: &[GridImage], cfg: &ScenarioConfig, seed: u64) -> Result<Vec<Observation>> {
    cfg.validate()?;
    if scene.len() != cfg.schedule.len() {
        return Err(Error::DimensionMismatch {
            expected: cfg.schedule.len(),
            got: scene.len(),
            what: "scene frames",
        });
    }
    let mut obs = Vec::with_capacity(scene.len());
    let mut prev_day = cfg.schedule[0].day;
    for (k, (frame, entry)) in scene.iter().zip(&cfg.schedule).enumerate() {
        let operator = cfg.operator(entry.modality);
        let noise = cfg.preset.noise(entry.modality);
        let state = crate::raster::vectorize_state(frame)?;
        let mut y = operator.apply(&state)?;
        if cfg.noise_amp > 0.0 {
            let block = noise.pixel_block();
            let chol = block.cholesky().map_err(|_| Error::NotPositiveDefinite("noise block"))?;
            let l_m = operator.bands();
            let n_m = y.len() / l_m;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15));
            for c in 0..n_m {
                let eps: Vec<f64> = (0..l_m)
                    .map(|_| {
                        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                        let u2: f64 = rng.gen();
                        libm::sqrt(-2.0 * libm::log(u1))
                            * libm::cos(2.0 * core::f64::consts::PI * u2)
                    })
                    .collect();
                for a in 0..l_m {
                    let mut v = 0.0;
                    for b in 0..=a {
                        v += chol[(a, b)] * eps[b];
                    }
                    y[a * n_m + c] += cfg.noise_amp * v;
                }
            }
        }
        obs.push(Observation {
            y,
            modality: entry.modality,
            date: entry.day,
            delta_days: entry.day - prev_day,
            operator,
            noise,
        });
        prev_day = entry.day;
    }
    Ok(obs)
}

/// Adds the configured cloud offsets to the targeted observations; steps
/// without clouds are returned bit-identical. `hr` is the HR grid the
/// observations were generated from (needed to resolve native widths).
pub fn inject_clouds(
    mut obs: Vec<Observation>,
    clouds: &[CloudSpec],
    hr: GridDims,
) -> Result<Vec<Observation>> {
    for cloud in clouds {
        let o = obs
            .get_mut(cloud.step)
            .ok_or_else(|| Error::InvalidArgument(String::from("cloud step beyond observation list")))?;
        let n_m = o.n_native_pixels();
        let l_m = o.operator.bands();
        let (nw, nh) = o.operator.out_dims(hr)?;
        let (x0, y0, w, h) = cloud.rect;
        if w == 0 || h == 0 || x0 + w > nw || y0 + h > nh {
            return Err(Error::InvalidArgument(String::from("cloud rect outside native bounds")));
        }
        for b in 0..l_m {
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    o.y[b * n_m + y * nw + x] += cloud.magnitude;
                }
            }
        }
    }
    Ok(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::vectorize_state;

    #[test]
    fn static_config_gives_identical_frames() {
        let mut cfg = ScenarioConfig::desk(Preset::Oroville);
        cfg.water.radius_amplitude = 0.0;
        cfg.water.drift = (0.0, 0.0);
        let frames = generate_scene(&cfg, 3).unwrap();
        for f in &frames[1..] {
            assert_eq!(f.data, frames[0].data);
        }
    }

    #[test]
    fn seeds_change_texture_but_not_class_map() {
        let cfg = ScenarioConfig::desk(Preset::Oroville);
        let a = generate_scene(&cfg, 1).unwrap();
        let b = generate_scene(&cfg, 2).unwrap();
        assert_ne!(a[0].data, b[0].data);
        // thresholded NIR-band maps agree wherever the class is pure; only
        // boundary-mixed pixels may flip under a different texture draw
        let n = cfg.width * cfg.height;
        for (k, (fa, fb)) in a.iter().zip(b.iter()).enumerate() {
            let day = cfg.schedule[k].day;
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let f = cfg.water_fraction(day, x, y);
                    if f > 0.0 && f < 1.0 {
                        continue;
                    }
                    let p = y * cfg.width + x;
                    let ca = fa.data[n + p] < 0.3;
                    let cb = fb.data[n + p] < 0.3;
                    assert_eq!(ca, cb, "pixel ({x},{y}) day {day}");
                }
            }
        }
    }

    #[test]
    fn values_bounded_over_config_sweep() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200 {
            let mut cfg = ScenarioConfig::desk(Preset::Oroville);
            cfg.water.center = (rng.gen::<f64>() * 27.0, rng.gen::<f64>() * 27.0);
            cfg.water.drift = (rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            cfg.water.radius = rng.gen::<f64>() * 15.0;
            cfg.water.radius_amplitude = rng.gen::<f64>() * 5.0;
            cfg.texture_amp = rng.gen::<f64>() * 0.2;
            cfg.land = vec![rng.gen(), rng.gen()];
            cfg.water_refl = vec![rng.gen(), rng.gen()];
            let frames = generate_scene(&cfg, trial).unwrap();
            for f in &frames {
                assert!(f.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn texture_walk_increment_variance() {
        let mut cfg = ScenarioConfig::desk(Preset::Oroville);
        cfg.water.radius = 0.0;
        cfg.water.radius_amplitude = 0.0;
        cfg.texture_amp = 0.0;
        cfg.texture_walk = 4e-4;
        cfg.land = vec![0.5, 0.5];
        let frames = generate_scene(&cfg, 11).unwrap();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        for w in frames.windows(2) {
            let delta = (w[1].date - w[0].date) as f64;
            for (a, b) in w[0].data.iter().zip(w[1].data.iter()) {
                let d = (b - a) / libm::sqrt(delta);
                sum += d;
                sq += d * d;
                count += 1;
            }
        }
        let nf = count as f64;
        let var = sq / nf - (sum / nf) * (sum / nf);
        assert!((var - 4e-4).abs() < 0.1 * 4e-4, "per-day increment variance {var}");
    }

    #[test]
    fn zero_noise_observations_are_exact() {
        let mut cfg = ScenarioConfig::desk(Preset::Oroville);
        cfg.noise_amp = 0.0;
        let frames = generate_scene(&cfg, 5).unwrap();
        let obs = observe_schedule(&frames, &cfg, 9).unwrap();
        for (o, f) in obs.iter().zip(frames.iter()) {
            let want = o.operator.apply(&vectorize_state(f).unwrap()).unwrap();
            assert_eq!(o.y, want);
        }
    }

    #[test]
    fn observation_shapes_match_modality() {
        let cfg = ScenarioConfig::desk(Preset::Oroville);
        let frames = generate_scene(&cfg, 5).unwrap();
        let obs = observe_schedule(&frames, &cfg, 9).unwrap();
        for (o, entry) in obs.iter().zip(&cfg.schedule) {
            let expect = match entry.modality {
                Modality::Coarse => (27 / 3) * (27 / 3) * 2,
                _ => 27 * 27 * 2,
            };
            assert_eq!(o.y.len(), expect);
            assert_eq!(o.date, entry.day);
        }
        // deltas chain the schedule
        assert_eq!(obs[0].delta_days, 0);
        for (o, w) in obs[1..].iter().zip(cfg.schedule.windows(2)) {
            assert_eq!(o.delta_days, w[1].day - w[0].day);
        }
    }

    #[test]
    fn empirical_noise_variance_matches_preset() {
        // one fine pixel observed many times: sample covariance within 5% of R
        let mut cfg = ScenarioConfig::desk(Preset::Oroville);
        cfg.width = 1;
        cfg.height = 1;
        cfg.decimation = 1;
        cfg.schedule = (0..2).map(|k| ScheduleEntry { day: k, modality: Modality::Fine }).collect();
        cfg.water.radius = 0.0;
        cfg.water.radius_amplitude = 0.0;
        cfg.texture_amp = 0.0;
        let frames = generate_scene(&cfg, 0).unwrap();
        let r = cfg.preset.noise(Modality::Fine).pixel_block();
        let n_draws = 10_000;
        let mut sums = [0.0f64; 2];
        let mut sq = [[0.0f64; 2]; 2];
        let clean: Vec<f64> = {
            let mut c2 = cfg.clone();
            c2.noise_amp = 0.0;
            observe_schedule(&frames, &c2, 0).unwrap()[0].y.clone()
        };
        for seed in 0..n_draws {
            let o = &observe_schedule(&frames, &cfg, seed as u64).unwrap()[0];
            let e = [o.y[0] - clean[0], o.y[1] - clean[1]];
            for a in 0..2 {
                sums[a] += e[a];
                for b in 0..2 {
                    sq[a][b] += e[a] * e[b];
                }
            }
        }
        let nf = n_draws as f64;
        for a in 0..2 {
            for b in 0..2 {
                let cov = sq[a][b] / nf - (sums[a] / nf) * (sums[b] / nf);
                let want = r[(a, b)];
                assert!(
                    (cov - want).abs() < 0.05 * want.abs().max(r[(0, 0)]),
                    "({a},{b}): {cov} vs {want}"
                );
            }
        }
    }

    #[test]
    fn cloud_injection_bookkeeping() {
        let cfg = ScenarioConfig::desk(Preset::Oroville);
        let frames = generate_scene(&cfg, 4).unwrap();
        let obs = observe_schedule(&frames, &cfg, 4).unwrap();
        let hr = cfg.dims();
        // empty list is the identity
        let same = inject_clouds(obs.clone(), &[], hr).unwrap();
        for (a, b) in same.iter().zip(obs.iter()) {
            assert_eq!(a.y, b.y);
        }
        // step 1 is coarse (9x9 native); 2x3 rect at (1,2)
        let cloud = CloudSpec { step: 1, rect: (1, 2, 2, 3), magnitude: 0.5 };
        let injected = inject_clouds(obs.clone(), &[cloud], hr).unwrap();
        let mut changed = 0;
        for (a, b) in injected[1].y.iter().zip(obs[1].y.iter()) {
            if a != b {
                assert!((a - b - 0.5).abs() < 1e-15);
                changed += 1;
            }
        }
        assert_eq!(changed, 2 * 3 * 2); // rect area x bands
        for k in [0usize, 2, 3] {
            assert_eq!(injected[k].y, obs[k].y);
        }
        // out-of-bounds rect rejected
        let bad = CloudSpec { step: 1, rect: (8, 8, 3, 3), magnitude: 0.5 };
        assert!(inject_clouds(obs, &[bad], hr).is_err());
    }
}
