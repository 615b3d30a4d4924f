//! Streaming per-individual baseline normalization for rating time series,
//! with the surrounding tooling needed to exercise it: a synthetic cohort
//! simulator with ground-truth anomaly flags, a region-based evaluation
//! harness, feature aggregators, and a small neural regressor with an
//! in-network normalization layer.

pub mod error;
pub mod eval;
pub mod features;
pub mod neural;
pub mod norm;
pub mod report;
pub mod sim;

pub use error::TempNormError;
pub use norm::{HalfLife, Region, TempNorm};
