//! Robust recursive fusion of multiresolution multispectral image sequences.
//!
//! The crate estimates a high-resolution latent reflectance sequence from a
//! stream of fine (high spatial, low temporal resolution) and coarse (low
//! spatial, high temporal resolution) acquisitions. The measurement update is
//! a mean-field variational scheme with per-measurement Bernoulli outlier
//! indicators under a beta-Bernoulli prior, so corrupted pixels (clouds,
//! shadows, dead sensors) are down-weighted instead of poisoning the belief.
//! Image dynamics come either from a data-driven random walk or from a small
//! location-aware convolutional model trained on historical imagery.
//!
//! Everything here is pure computation over in-memory buffers; file formats,
//! CLI orchestration and CSV/PGM export live in the companion `rfusion` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod cubature;
pub mod distributed;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod raster;
pub mod sensor;
pub mod sim;
pub mod vbkf;

pub use error::{Error, Result};
