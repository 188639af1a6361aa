use thiserror::Error;

use crate::activations::ActivationError;
use crate::autodiff::AdError;
use crate::hmc::HmcError;
use crate::linalg::LinalgError;

/// Errors surfaced by the modelling layers (GP, BNN, loss, trainer, metrics).
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Hmc(#[from] HmcError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("degenerate input box in dimension {dim}: [{low}, {high}]")]
    DegenerateBox { dim: usize, low: f64, high: f64 },
    #[error("invalid measurement set: {0}")]
    InvalidMeasurementSet(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("sample batches are on different grids: {0}")]
    GridMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
