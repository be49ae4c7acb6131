//! Command-line front end and file formats for the fusion engine in
//! `rfusion-core`: RFR1 rasters, RFW1 weights, JSON run configs and the
//! simulate / train-dynamics / fuse / evaluate / export-pgm pipeline.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
