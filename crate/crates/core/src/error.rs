use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension { context: &'static str, expected: usize, got: usize },
    #[error("layer {layer}: expected input of width {expected}, got {got}")]
    LayerDimension { layer: usize, expected: usize, got: usize },
    #[error("backward called without a preceding training-mode forward pass")]
    BackwardWithoutForward,
    #[error("distance gradient norm {norm:e} is below the normalization floor")]
    DegenerateGradient { norm: f64 },
    #[error("kernel weights underflow (log total mass {log_mass:.1})")]
    ScoreUnderflow { log_mass: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid degradation: {0}")]
    InvalidDegradation(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
