use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wideprior::activations::ActivationKind;
use wideprior::bnn::BnnConfig;
use wideprior::data;
use wideprior::gp::{GpPriorSpec, MeasurementSet};
use wideprior::hmc::HmcConfig;
use wideprior::trainer::{self, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[serde(rename = "regression_1d")]
    Regression1d,
    TwoMoons,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Regression1d => "regression_1d",
            Task::TwoMoons => "two_moons",
        }
    }
}

/// Dataset generator settings; unset fields take the task defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_points: Option<usize>,
    /// Two-moons coordinate noise (standard deviation).
    pub noise: Option<f64>,
    /// Regression input interval.
    pub interval: Option<(f64, f64)>,
}

/// Prediction grid: `points` per dimension over `[low, high]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub low: Option<Vec<f64>>,
    pub high: Option<Vec<f64>>,
    pub points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Ground-truth GP; `noise_variance` is the regression likelihood noise.
    /// Prior matching always targets the noiseless kernel.
    pub gp: GpPriorSpec,
    pub bnn: BnnConfig,
    pub activation: ActivationKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub hmc: HmcConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        config.train.seed = config.seed;
        config.hmc.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: wideprior::Error| CliError::Config(e.to_string());
        self.gp.validate().map_err(cfg)?;
        self.bnn.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.hmc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.train.input_box.len() != self.bnn.input_dim {
            return Err(CliError::Config(format!(
                "train.input_box has {} dimensions but bnn.input_dim is {}",
                self.train.input_box.len(),
                self.bnn.input_dim
            )));
        }
        let expected_dim = match self.task {
            Task::Regression1d => 1,
            Task::TwoMoons => 2,
        };
        if self.bnn.input_dim != expected_dim {
            return Err(CliError::Config(format!(
                "task {} needs bnn.input_dim = {expected_dim}",
                self.task.name()
            )));
        }
        if let Some(noise) = self.data.noise {
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(CliError::Config(format!("data.noise must be nonnegative, got {noise}")));
            }
        }
        if let Some((lo, hi)) = self.data.interval {
            trainer::validate_box(&[(lo, hi)]).map_err(cfg)?;
        }
        if self.task == Task::Regression1d && !(self.gp.noise_variance > 0.0) {
            return Err(CliError::Config("regression needs gp.noise_variance > 0".into()));
        }
        self.grid_bounds()?;
        Ok(())
    }

    pub fn matching_target(&self) -> GpPriorSpec {
        GpPriorSpec::noiseless(self.gp.kernel)
    }

    fn grid_bounds(&self) -> Result<(Vec<f64>, Vec<f64>, usize), CliError> {
        let (low, high, points) = match self.task {
            Task::Regression1d => (vec![-5.0], vec![5.0], 101),
            Task::TwoMoons => (vec![-2.5, -2.5], vec![2.5, 2.5], 20),
        };
        let low = self.grid.low.clone().unwrap_or(low);
        let high = self.grid.high.clone().unwrap_or(high);
        let points = self.grid.points.unwrap_or(points);
        if low.len() != self.bnn.input_dim || high.len() != self.bnn.input_dim {
            return Err(CliError::Config("grid.low/high must match bnn.input_dim".into()));
        }
        let bounds: Vec<(f64, f64)> = low.iter().copied().zip(high.iter().copied()).collect();
        trainer::validate_box(&bounds).map_err(|e| CliError::Config(e.to_string()))?;
        if points < 2 {
            return Err(CliError::Config("grid.points must be at least 2".into()));
        }
        Ok((low, high, points))
    }

    pub fn grid(&self) -> Result<MeasurementSet<f64>, CliError> {
        let (low, high, points) = self.grid_bounds()?;
        let set = match self.task {
            Task::Regression1d => MeasurementSet::grid_1d(low[0], high[0], points),
            Task::TwoMoons => MeasurementSet::grid_2d((low[0], low[1]), (high[0], high[1]), points),
        };
        set.map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn dataset(&self) -> wideprior::Result<data::Dataset> {
        match self.task {
            Task::Regression1d => data::regression_1d(
                &self.gp,
                self.data.n_points.unwrap_or(data::REGRESSION_POINTS),
                self.data.interval.unwrap_or(data::REGRESSION_INTERVAL),
                self.seed,
            ),
            Task::TwoMoons => data::two_moons(
                self.data.n_points.unwrap_or(data::TWO_MOONS_POINTS),
                self.data.noise.unwrap_or(data::TWO_MOONS_NOISE),
                self.seed,
            ),
        }
    }
}
