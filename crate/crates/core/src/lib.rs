//! Depth-guided voxel radiance fields for indoor 360-degree captures.

pub mod camera;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod priors;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
