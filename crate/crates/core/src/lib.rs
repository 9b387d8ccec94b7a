//! Marker-ink removal for H&E slide images: ink segmentation, patch dataset
//! construction, a CycleGAN-style restorer, tiled reconstruction and
//! evaluation instruments.

pub mod blindtest;
pub mod color;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod ink;
pub mod mask;
pub mod model;
pub mod morphology;
pub mod nn;
pub mod raster;
pub mod restore;
pub mod rng;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
