//! Function-space priors for wide single-hidden-layer Bayesian neural
//! networks, learned by matching a Gaussian-process prior in 2-Wasserstein
//! distance, plus HMC posterior inference and prior-comparison metrics.

pub mod activations;
pub mod autodiff;
pub mod bnn;
pub mod data;
pub mod error;
pub mod gp;
pub mod hmc;
pub mod linalg;
pub mod metrics;
pub mod posterior;
pub mod random;
pub mod scalar;
pub mod trainer;
pub mod wasserstein;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ActivationModel64 = activations::ActivationModel<f64>;
pub type ActivationModel32 = activations::ActivationModel<f32>;
pub type MeasurementSet64 = gp::MeasurementSet<f64>;
pub type PriorParams64 = bnn::PriorParams<f64>;
pub type FunctionSampleBatch64 = bnn::FunctionSampleBatch<f64>;
pub type GaussianSummary64 = wasserstein::GaussianSummary<f64>;
