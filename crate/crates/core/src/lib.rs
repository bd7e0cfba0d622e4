//! Radiologist-positive classification: a voxel classifier trained only on
//! radiologist-annotated regions, a percentage-threshold rule turning voxel
//! maps into ROI, zone and patient decisions, and the fusion of those
//! decisions with the radiologist's own calls.

pub mod classifier;
pub mod cohort;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod selftest;
pub mod volume;

pub use error::{Error, Result};
