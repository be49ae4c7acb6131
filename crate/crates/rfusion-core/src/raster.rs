//! Canonical image and state-vector representations.
//!
//! A [`GridImage`] stores reflectances in planar band-major layout (all of
//! band 0, then band 1, ...), each band scanned row-major from the top-left
//! corner. The filter state is the same image flattened pixel-major: the
//! `L_H` bands of HR pixel 0, then pixel 1, and so on. Keeping the bands of a
//! pixel contiguous is what lets the per-pixel covariance blocks downstream
//! stay small and dense.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Acquisition modality of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Modality {
    /// High spatial resolution sensor (Landsat-like).
    Fine,
    /// Low spatial resolution sensor (MODIS-like).
    Coarse,
    /// A latent high-resolution image (ground truth or filter estimate).
    Latent,
}

/// Spatial/spectral dimensions of the high-resolution grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridDims {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
}

impl GridDims {
    pub fn new(width: usize, height: usize, bands: usize) -> Self {
        Self { width, height, bands }
    }

    /// Number of pixels.
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// State vector length `L_H * N_H`.
    pub fn state_len(&self) -> usize {
        self.n_pixels() * self.bands
    }
}

/// A multi-band raster with acquisition metadata; the unit of all I/O.
///
/// `data` is planar band-major: `data[b * w * h + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub data: Vec<f64>,
    /// Days since the sequence epoch.
    pub date: i32,
    pub modality: Modality,
}

impl GridImage {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        data: Vec<f64>,
        date: i32,
        modality: Modality,
    ) -> Result<Self> {
        if data.len() != width * height * bands {
            return Err(Error::DimensionMismatch {
                expected: width * height * bands,
                got: data.len(),
                what: "GridImage data",
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GridImage data"));
        }
        Ok(Self { width, height, bands, data, date, modality })
    }

    /// All-zero image.
    pub fn zeros(dims: GridDims, date: i32, modality: Modality) -> Self {
        Self {
            width: dims.width,
            height: dims.height,
            bands: dims.bands,
            data: alloc::vec![0.0; dims.state_len()],
            date,
            modality,
        }
    }

    pub fn dims(&self) -> GridDims {
        GridDims::new(self.width, self.height, self.bands)
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Value of band `band` at row-major pixel `p`.
    #[inline]
    pub fn at(&self, band: usize, p: usize) -> f64 {
        self.data[band * self.n_pixels() + p]
    }

    #[inline]
    pub fn at_xy(&self, band: usize, x: usize, y: usize) -> f64 {
        self.data[band * self.n_pixels() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, band: usize, p: usize, v: f64) {
        let n = self.n_pixels();
        self.data[band * n + p] = v;
    }
}

/// Pixel-major flattening of the high-resolution image.
///
/// `values[p * L_H + band]` holds band `band` of row-major pixel `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub values: Vec<f64>,
    pub dims: GridDims,
}

impl StateVector {
    pub fn new(values: Vec<f64>, dims: GridDims) -> Result<Self> {
        if values.len() != dims.state_len() {
            return Err(Error::DimensionMismatch {
                expected: dims.state_len(),
                got: values.len(),
                what: "StateVector",
            });
        }
        Ok(Self { values, dims })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bands of pixel `p` as a contiguous slice.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        let l = self.dims.bands;
        &self.values[p * l..(p + 1) * l]
    }
}

/// Flatten an image into the pixel-major state ordering.
pub fn vectorize_state(img: &GridImage) -> Result<StateVector> {
    if img.modality == Modality::Coarse {
        return Err(Error::InvalidArgument(alloc::format!(
            "cannot vectorize a COARSE image ({}x{})",
            img.width,
            img.height
        )));
    }
    let dims = img.dims();
    let n = dims.n_pixels();
    let l = dims.bands;
    let mut values = alloc::vec![0.0; dims.state_len()];
    for p in 0..n {
        for b in 0..l {
            values[p * l + b] = img.data[b * n + p];
        }
    }
    Ok(StateVector { values, dims })
}

/// Inverse of [`vectorize_state`].
pub fn devectorize_state(v: &[f64], dims: GridDims, date: i32) -> Result<GridImage> {
    if v.len() != dims.state_len() {
        return Err(Error::DimensionMismatch {
            expected: dims.state_len(),
            got: v.len(),
            what: "devectorize input",
        });
    }
    let n = dims.n_pixels();
    let l = dims.bands;
    let mut data = alloc::vec![0.0; v.len()];
    for p in 0..n {
        for b in 0..l {
            data[b * n + p] = v[p * l + b];
        }
    }
    Ok(GridImage {
        width: dims.width,
        height: dims.height,
        bands: dims.bands,
        data,
        date,
        modality: Modality::Latent,
    })
}
