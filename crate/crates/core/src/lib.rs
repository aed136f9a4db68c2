//! Imbalance-aware loss functions for frame-level sound event detection,
//! with a small windowed MLP, a synthetic data generator, metrics and a
//! multi-seed training harness.

pub mod data;
pub mod dataset_io;
mod error;
pub mod gradcheck;
pub mod grid;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, LabelGrid, PredictionGrid};
pub use losses::{loss_dispatch, LossSpec};
