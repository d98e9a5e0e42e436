//! Sanity tests for spurious correlations in volumetric scan classifiers.

pub mod classifier;
pub mod error;
pub mod formats;
pub mod matrix;
pub mod noise;
pub mod preprocess;
pub mod report;
pub mod stats;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
