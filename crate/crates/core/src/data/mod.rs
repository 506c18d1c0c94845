//! Datasets, degradations and evaluation metrics.

pub mod circle;
pub mod degrade;
pub mod image;
pub mod metrics;
