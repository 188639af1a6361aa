use std::path::Path;

use thiserror::Error;
use wideprior::hmc::HmcError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::CheckpointMismatch(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) | CliError::MissingArtifacts(_) => 4,
        }
    }
}

impl From<wideprior::Error> for CliError {
    fn from(e: wideprior::Error) -> Self {
        use wideprior::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_)
            | E::DegenerateBox { .. }
            | E::InvalidMeasurementSet(_)
            | E::DimensionMismatch(_)
            | E::GridMismatch(_)
            | E::Activation(_)
            | E::Hmc(HmcError::InvalidConfig(_)) => CliError::Config(msg),
            E::Hmc(HmcError::DivergentChain { diagnostics, .. }) => CliError::Numeric(format!(
                "{msg}; per-chain acceptance {:?}, step sizes {:?}, divergences {:?}",
                diagnostics.per_chain_acceptance, diagnostics.step_sizes, diagnostics.divergences
            )),
            E::Linalg(_) | E::Autodiff(_) | E::Hmc(_) | E::NonFiniteLoss { .. } | E::NonFinite(_) => {
                CliError::Numeric(msg)
            }
        }
    }
}
