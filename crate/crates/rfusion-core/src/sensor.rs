//! Degradation operators and measurement noise.
//!
//! The fine sensor observes the latent image directly (identity up to a
//! per-band gain). The coarse sensor averages non-overlapping `d x d`
//! footprints of HR pixels: a uniform `d x d` blur kernel followed by
//! decimation by the same factor `d` collapses into one footprint-mean per
//! coarse pixel, which keeps the measurement update decoupled per footprint.
//!
//! Measurements are stacked band-major: index `i = band * N_m + pixel`, with
//! pixels scanned row-major at the native resolution of the sensor.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::raster::{GridDims, Modality, StateVector};

/// Linear map from the HR state to one sensor's stacked measurement vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationOperator {
    pub modality: Modality,
    /// Footprint edge length in HR pixels; 1 for the fine sensor.
    pub decimation: usize,
    /// Per-band scale factors.
    pub gains: Vec<f64>,
}

impl DegradationOperator {
    pub fn fine(bands: usize) -> Self {
        Self { modality: Modality::Fine, decimation: 1, gains: alloc::vec![1.0; bands] }
    }

    pub fn coarse(decimation: usize, bands: usize) -> Self {
        Self { modality: Modality::Coarse, decimation, gains: alloc::vec![1.0; bands] }
    }

    pub fn with_gains(mut self, gains: Vec<f64>) -> Self {
        self.gains = gains;
        self
    }

    pub fn bands(&self) -> usize {
        self.gains.len()
    }

    /// Native (measurement-grid) dimensions for a given HR grid.
    pub fn out_dims(&self, hr: GridDims) -> Result<(usize, usize)> {
        if self.decimation == 0
            || hr.width % self.decimation != 0
            || hr.height % self.decimation != 0
        {
            return Err(Error::InvalidArgument(alloc::format!(
                "HR dims {}x{} not divisible by decimation {}",
                hr.width,
                hr.height,
                self.decimation
            )));
        }
        Ok((hr.width / self.decimation, hr.height / self.decimation))
    }

    /// Total measurement length `L_m * N_m`.
    pub fn out_len(&self, hr: GridDims) -> Result<usize> {
        let (w, h) = self.out_dims(hr)?;
        Ok(w * h * self.bands())
    }

    /// HR pixel indices covered by measurement pixel `c` (row-major, native grid).
    pub fn footprint(&self, c: usize, hr: GridDims) -> Vec<usize> {
        let d = self.decimation;
        let wc = hr.width / d;
        let (cx, cy) = (c % wc, c / wc);
        let mut out = Vec::with_capacity(d * d);
        for dy in 0..d {
            for dx in 0..d {
                let x = cx * d + dx;
                let y = cy * d + dy;
                out.push(y * hr.width + x);
            }
        }
        out
    }

    /// Weight each footprint HR pixel contributes to a band-`l` measurement.
    #[inline]
    pub fn footprint_weight(&self, band: usize) -> f64 {
        self.gains[band] / (self.decimation * self.decimation) as f64
    }

    /// Apply the operator: `y = H s`.
    pub fn apply(&self, s: &StateVector) -> Result<Vec<f64>> {
        let hr = s.dims;
        if self.bands() > hr.bands {
            return Err(Error::InvalidArgument(alloc::string::String::from(
                "operator measures more bands than the state carries",
            )));
        }
        let (w, h) = self.out_dims(hr)?;
        let n_m = w * h;
        let mut y = alloc::vec![0.0; n_m * self.bands()];
        for band in 0..self.bands() {
            let wgt = self.footprint_weight(band);
            for c in 0..n_m {
                let mut acc = 0.0;
                for p in self.footprint(c, hr) {
                    acc += s.values[p * hr.bands + band];
                }
                y[band * n_m + c] = wgt * acc;
            }
        }
        Ok(y)
    }

    /// Adjoint map: `H^T v`, back onto the HR state layout.
    pub fn adjoint(&self, v: &[f64], hr: GridDims) -> Result<Vec<f64>> {
        let (w, h) = self.out_dims(hr)?;
        let n_m = w * h;
        if v.len() != n_m * self.bands() {
            return Err(Error::DimensionMismatch {
                expected: n_m * self.bands(),
                got: v.len(),
                what: "adjoint input",
            });
        }
        let mut s = alloc::vec![0.0; hr.state_len()];
        for band in 0..self.bands() {
            let wgt = self.footprint_weight(band);
            for c in 0..n_m {
                let val = wgt * v[band * n_m + c];
                for p in self.footprint(c, hr) {
                    s[p * hr.bands + band] += val;
                }
            }
        }
        Ok(s)
    }

    /// Non-zero entries `(state_index, weight)` of measurement row `i`.
    pub fn row_entries(&self, i: usize, hr: GridDims) -> Result<Vec<(usize, f64)>> {
        let (w, h) = self.out_dims(hr)?;
        let n_m = w * h;
        if i >= n_m * self.bands() {
            return Err(Error::InvalidArgument(alloc::format!(
                "measurement index {i} out of range ({})",
                n_m * self.bands()
            )));
        }
        let band = i / n_m;
        let c = i % n_m;
        let wgt = self.footprint_weight(band);
        Ok(self
            .footprint(c, hr)
            .into_iter()
            .map(|p| (p * hr.bands + band, wgt))
            .collect())
    }

    /// `h_i P h_i^T` for measurement row `i`, with `P` block-diagonal per HR
    /// pixel; only footprint pixels contribute.
    pub fn row_variance(&self, i: usize, blocks: &[Mat], hr: GridDims) -> Result<f64> {
        let (w, h) = self.out_dims(hr)?;
        let n_m = w * h;
        if i >= n_m * self.bands() {
            return Err(Error::InvalidArgument(alloc::format!(
                "measurement index {i} out of range ({})",
                n_m * self.bands()
            )));
        }
        let band = i / n_m;
        let c = i % n_m;
        let wgt = self.footprint_weight(band);
        let mut acc = 0.0;
        for p in self.footprint(c, hr) {
            acc += blocks[p][(band, band)];
        }
        Ok(wgt * wgt * acc)
    }
}

/// Per-pixel cross-band measurement noise covariance.
///
/// The full covariance is block-diagonal over measurement pixels, every block
/// equal to `scale * base`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    base: Mat,
    scale: f64,
}

impl NoiseModel {
    pub fn new(base: Mat, scale: f64) -> Result<Self> {
        if scale <= 0.0 {
            return Err(Error::InvalidArgument(alloc::string::String::from(
                "noise scale must be positive",
            )));
        }
        let mut sym = base.clone();
        sym.symmetrize();
        if sym.data != base.data {
            return Err(Error::InvalidArgument(alloc::string::String::from(
                "noise block must be symmetric",
            )));
        }
        base.cholesky().map_err(|_| Error::NotPositiveDefinite("noise block"))?;
        Ok(Self { base, scale })
    }

    /// Cross-band covariance block of one measurement pixel.
    pub fn pixel_block(&self) -> Mat {
        self.base.scale(self.scale)
    }

    /// Diagonal noise variance for band `band`.
    pub fn diag(&self, band: usize) -> f64 {
        self.scale * self.base[(band, band)]
    }

    pub fn bands(&self) -> usize {
        self.base.rows
    }

    /// Whether cross-band noise correlations are present.
    pub fn is_diagonal(&self) -> bool {
        let n = self.base.rows;
        (0..n).all(|i| (0..n).all(|j| i == j || self.base[(i, j)] == 0.0))
    }
}

/// Named noise/prior presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Preset {
    Oroville,
    ElephantButte,
}

impl Preset {
    /// Cross-band structure shared by all pixels of one modality.
    fn base_block(&self) -> Mat {
        match self {
            // I (x) [[1, 0.1], [0.1, 2]]
            Preset::Oroville => Mat::from_rows(2, 2, alloc::vec![1.0, 0.1, 0.1, 2.0]).unwrap(),
            // shaped like the initial covariance: 0.5*1 + 0.5*I
            Preset::ElephantButte => {
                Mat::from_rows(2, 2, alloc::vec![1.0, 0.5, 0.5, 1.0]).unwrap()
            }
        }
    }

    pub fn noise(&self, modality: Modality) -> NoiseModel {
        let scale = match (self, modality) {
            (Preset::Oroville, Modality::Fine) => 3e-2,
            (Preset::Oroville, _) => 1e-4,
            (Preset::ElephantButte, Modality::Fine) => 7.5e-3,
            (Preset::ElephantButte, _) => 2.5e-5,
        };
        NoiseModel::new(self.base_block(), scale).unwrap()
    }

    /// Per-pixel block of the initial state covariance `P_0`.
    pub fn p0_block(&self, bands: usize) -> Mat {
        let (ones, eye) = match self {
            Preset::Oroville => (0.1, 0.9),
            Preset::ElephantButte => (0.5, 0.5),
        };
        Mat::from_fn(bands, bands, |i, j| ones + if i == j { eye } else { 0.0 })
    }
}

/// One acquisition: stacked measurements plus their degradation and noise.
#[derive(Debug, Clone)]
pub struct Observation {
    pub y: Vec<f64>,
    pub modality: Modality,
    pub date: i32,
    /// Days since the previously processed acquisition.
    pub delta_days: i32,
    pub operator: DegradationOperator,
    pub noise: NoiseModel,
}

impl Observation {
    /// Number of measurement pixels on the native grid.
    pub fn n_native_pixels(&self) -> usize {
        self.y.len() / self.operator.bands()
    }

    /// Stacked measurement indices of native pixel `c` (one per band).
    pub fn pixel_meas_indices(&self, c: usize) -> Vec<usize> {
        let n_m = self.n_native_pixels();
        (0..self.operator.bands()).map(|b| b * n_m + c).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::StateVector;
    use rand::{Rng, SeedableRng};

    fn rand_state(dims: GridDims, seed: u64) -> StateVector {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        StateVector::new((0..dims.state_len()).map(|_| rng.gen::<f64>()).collect(), dims).unwrap()
    }

    #[test]
    fn coarse_constant_image_scales_by_gain() {
        let dims = GridDims::new(9, 9, 2);
        let c = 0.42;
        let g = 1.7;
        let s = StateVector::new(vec![c; dims.state_len()], dims).unwrap();
        let op = DegradationOperator::coarse(9, 2).with_gains(vec![g, g]);
        let y = op.apply(&s).unwrap();
        assert_eq!(y.len(), 2);
        for v in y {
            assert!((v - g * c).abs() < 1e-12);
        }
    }

    #[test]
    fn fine_is_band_stacked_permutation() {
        let dims = GridDims::new(3, 2, 2);
        let s = rand_state(dims, 1);
        let op = DegradationOperator::fine(2);
        let y = op.apply(&s).unwrap();
        let n = dims.n_pixels();
        for p in 0..n {
            for b in 0..2 {
                assert_eq!(y[b * n + p], s.values[p * 2 + b]);
            }
        }
    }

    #[test]
    fn coarse_impulse_averages_to_one() {
        // 9x9 single band, one pixel holds 81, rest zero -> coarse pixel 1.
        let dims = GridDims::new(9, 9, 1);
        let mut vals = vec![0.0; dims.state_len()];
        vals[37] = 81.0;
        let s = StateVector::new(vals, dims).unwrap();
        let op = DegradationOperator::coarse(9, 1);
        let y = op.apply(&s).unwrap();
        assert_eq!(y.len(), 1);
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn operator_is_linear() {
        let dims = GridDims::new(18, 18, 2);
        let op = DegradationOperator::coarse(9, 2).with_gains(vec![1.2, 0.8]);
        let s1 = rand_state(dims, 2);
        let s2 = rand_state(dims, 3);
        let (a, b) = (0.7, -1.3);
        let mixed = StateVector::new(
            s1.values.iter().zip(&s2.values).map(|(x, y)| a * x + b * y).collect(),
            dims,
        )
        .unwrap();
        let lhs = op.apply(&mixed).unwrap();
        let y1 = op.apply(&s1).unwrap();
        let y2 = op.apply(&s2).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * y1[i] + b * y2[i];
            assert!((lhs[i] - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn adjoint_identity() {
        let dims = GridDims::new(18, 18, 2);
        let op = DegradationOperator::coarse(9, 2).with_gains(vec![1.1, 0.9]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let s = rand_state(dims, rng.gen());
            let v: Vec<f64> = (0..op.out_len(dims).unwrap()).map(|_| rng.gen::<f64>()).collect();
            let hs = op.apply(&s).unwrap();
            let htv = op.adjoint(&v, dims).unwrap();
            let lhs: f64 = hs.iter().zip(&v).map(|(a, b)| a * b).sum();
            let rhs: f64 = s.values.iter().zip(&htv).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn fine_adjoint_inverts_stacking() {
        let dims = GridDims::new(4, 4, 2);
        let op = DegradationOperator::fine(2);
        let s = rand_state(dims, 9);
        let y = op.apply(&s).unwrap();
        let back = op.adjoint(&y, dims).unwrap();
        for (a, b) in back.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-15);
        }
        let zeros = op.adjoint(&vec![0.0; y.len()], dims).unwrap();
        assert!(zeros.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn footprints_do_not_overlap() {
        // Perturbing one HR pixel changes exactly one coarse output per band.
        let dims = GridDims::new(18, 18, 2);
        let op = DegradationOperator::coarse(9, 2);
        let s = rand_state(dims, 5);
        let base = op.apply(&s).unwrap();
        let mut bumped = s.clone();
        bumped.values[100 * 2] += 1.0;
        let y = op.apply(&bumped).unwrap();
        let changed = y.iter().zip(&base).filter(|(a, b)| (*a - *b).abs() > 1e-15).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn row_variance_cases() {
        let dims = GridDims::new(9, 9, 1);
        let fine = DegradationOperator::fine(1);
        let eye: Vec<Mat> = (0..81).map(|_| Mat::identity(1)).collect();
        for i in 0..81 {
            assert!((fine.row_variance(i, &eye, dims).unwrap() - 1.0).abs() < 1e-15);
        }

        let coarse = DegradationOperator::coarse(9, 1);
        let sigma2 = 0.37;
        let scaled: Vec<Mat> = (0..81).map(|_| Mat::identity(1).scale(sigma2)).collect();
        let got = coarse.row_variance(0, &scaled, dims).unwrap();
        assert!((got - sigma2 / 81.0).abs() < 1e-15);

        let zero: Vec<Mat> = (0..81).map(|_| Mat::zeros(1, 1)).collect();
        assert_eq!(coarse.row_variance(0, &zero, dims).unwrap(), 0.0);

        assert!(coarse.row_variance(99, &zero, dims).is_err());
    }

    #[test]
    fn noise_presets_are_pd() {
        for preset in [Preset::Oroville, Preset::ElephantButte] {
            for m in [Modality::Fine, Modality::Coarse] {
                let noise = preset.noise(m);
                assert!(noise.pixel_block().cholesky().is_ok());
                assert!(!noise.is_diagonal());
            }
            assert!(preset.p0_block(2).cholesky().is_ok());
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        let op = DegradationOperator::coarse(9, 1);
        assert!(op.out_dims(GridDims::new(10, 9, 1)).is_err());
    }
}
