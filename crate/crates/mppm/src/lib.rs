//! File formats, run configuration and jobs around `mppm-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod idx;
pub mod jobs;
pub mod pgm;
pub mod runlog;

pub use error::{Error, Result};
