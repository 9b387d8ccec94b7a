//! Validation instruments for restored imagery.

pub mod blobs;
pub mod classifier;
pub mod gradient;
pub mod nuclei;
pub mod report;
