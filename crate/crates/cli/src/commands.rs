use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use wideprior::bnn::{self, FunctionSampleBatch, SampleSource};
use wideprior::gp::{self, GpPriorSpec, MeasurementSet};
use wideprior::metrics;
use wideprior::posterior::{self, PosteriorPredictive, TaskKind};
use wideprior::random::derive_seed;
use wideprior::trainer::{self, TrainMode};

use crate::artifacts::{self, num, Checkpoint};
use crate::config::{RunConfig, Task};
use crate::error::CliError;

#[derive(Serialize)]
struct DatasetMeta<'a> {
    task: &'a str,
    seed: u64,
    n_points: usize,
    gp: &'a GpPriorSpec,
    noise: Option<f64>,
    interval: Option<(f64, f64)>,
}

pub fn gen_data(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let d = config.dataset()?;
    artifacts::write_dataset(&out.join(artifacts::DATASET), &d)?;
    let meta = DatasetMeta {
        task: config.task.name(),
        seed: config.seed,
        n_points: d.len(),
        gp: &config.gp,
        noise: (config.task == Task::TwoMoons).then(|| config.data.noise.unwrap_or(wideprior::data::TWO_MOONS_NOISE)),
        interval: (config.task == Task::Regression1d)
            .then(|| config.data.interval.unwrap_or(wideprior::data::REGRESSION_INTERVAL)),
    };
    artifacts::write_json(&out.join(artifacts::DATASET_META), &meta)?;
    info!("wrote {} {} points (seed {})", d.len(), config.task.name(), config.seed);
    Ok(())
}

pub fn train_prior(config: &RunConfig, mode: Option<TrainMode>, out: &Path) -> Result<(), CliError> {
    let mut tc = config.train.clone();
    if let Some(m) = mode {
        tc.mode = m;
    }
    info!("training mode {} for {} steps", tc.mode.name(), tc.steps);
    let target = config.matching_target();
    let outcome = trainer::train::<f64>(&tc, &config.bnn, config.activation, &target)?;
    let ckpt = Checkpoint {
        bnn: config.bnn,
        params: outcome.params,
        activation: outcome.act.clone(),
        mode: tc.mode,
        seed: tc.seed,
    };
    artifacts::write_json(&out.join(artifacts::CHECKPOINT), &ckpt)?;
    let header: Vec<String> = ["step", "loss", "seconds"].iter().map(|s| s.to_string()).collect();
    let rows = outcome.trace.entries.iter().map(|e| vec![e.step.to_string(), num(e.loss), num(e.seconds)]);
    artifacts::write_table(&out.join(artifacts::LOSS_TRACE), &header, rows)?;
    write_evaluation(out, &outcome.final_eval)?;
    info!("final held-out loss {:.6e}", outcome.final_eval.mean_loss);
    Ok(())
}

fn load_checkpoint(config: &RunConfig, path: &Path) -> Result<Checkpoint, CliError> {
    let ckpt: Checkpoint = artifacts::read_json(path)?;
    if ckpt.bnn != config.bnn {
        return Err(CliError::CheckpointMismatch(format!(
            "{} was trained with {:?}, config requests {:?}",
            path.display(),
            ckpt.bnn,
            config.bnn
        )));
    }
    if ckpt.activation.kind != config.activation {
        return Err(CliError::CheckpointMismatch(format!(
            "{} holds a {} activation, config requests {}",
            path.display(),
            ckpt.activation.kind.name(),
            config.activation.name()
        )));
    }
    Ok(ckpt)
}

fn write_evaluation(out: &Path, eval: &trainer::PriorEvaluation) -> Result<(), CliError> {
    artifacts::write_metrics(&out.join(artifacts::METRICS), &eval.metrics)?;
    let header: Vec<String> = ["set", "loss"].iter().map(|s| s.to_string()).collect();
    let rows = eval.per_set_loss.iter().enumerate().map(|(k, &l)| vec![k.to_string(), num(l)]);
    artifacts::write_table(&out.join(artifacts::PER_SET_LOSS), &header, rows)
}

pub fn eval_prior(config: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(config, checkpoint)?;
    let sets = trainer::held_out_sets::<f64>(&config.train)?;
    let eval = trainer::evaluate_prior(
        &ckpt.params,
        &ckpt.activation,
        &config.bnn,
        &config.matching_target(),
        &sets,
        &config.train.loss_settings(),
        derive_seed(config.seed, &[0xe7a1]),
    )?;
    write_evaluation(out, &eval)?;
    write_prior_predictive(config, &ckpt, out)?;
    info!("held-out loss mean {:.6e} median {:.6e}", eval.mean_loss, eval.median_loss);
    Ok(())
}

/// Latent prior function draws on the prediction grid, summarized as the
/// pointwise mean and standard deviation.
fn write_prior_predictive(config: &RunConfig, ckpt: &Checkpoint, out: &Path) -> Result<(), CliError> {
    let grid = config.grid()?;
    let act = &ckpt.activation;
    let draws = bnn::bnn_sample_functions(
        &config.bnn,
        &ckpt.params,
        act,
        &act.eta,
        &grid,
        config.train.s_fn,
        derive_seed(config.seed, &[0x9a1]),
    )?;
    let s = draws.n_samples() as f64;
    let mut header = coordinate_header(grid.dim());
    header.extend(["mean", "std"].map(String::from));
    let rows = (0..grid.len()).map(|j| {
        let col = draws.values.col(j);
        let mean = col.iter().sum::<f64>() / s;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s;
        let mut r: Vec<String> = grid.point(j).iter().map(|&v| num(v)).collect();
        r.push(num(mean));
        r.push(num(var.sqrt()));
        r
    });
    artifacts::write_table(&out.join(artifacts::PRIOR_PREDICTIVE), &header, rows)
}

fn coordinate_header(dim: usize) -> Vec<String> {
    if dim == 1 {
        vec!["x".into()]
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PredictiveFormat {
    /// Mean, standard deviation and, for classification, uncertainty maps.
    Summary,
    /// One column per posterior draw.
    Draws,
}

pub enum PriorChoice {
    Checkpoint(PathBuf),
    DefaultRelu,
}

pub fn posterior(
    config: &RunConfig,
    prior: PriorChoice,
    dataset: &Path,
    format: PredictiveFormat,
    out: &Path,
) -> Result<(), CliError> {
    let (params, act) = match prior {
        PriorChoice::Checkpoint(p) => {
            let c = load_checkpoint(config, &p)?;
            (c.params, c.activation)
        }
        PriorChoice::DefaultRelu => posterior::default_relu_prior(&config.bnn),
    };
    let d = artifacts::read_dataset(dataset, config.bnn.input_dim)?;
    let grid = config.grid()?;
    let pred = match config.task {
        Task::Regression1d => posterior::bnn_posterior_regression(
            &config.bnn,
            &params,
            &act,
            &act.eta,
            &d.x,
            &d.y,
            config.gp.noise_variance,
            &grid,
            &config.hmc,
        )?,
        Task::TwoMoons => {
            let labels = d.labels()?;
            posterior::bnn_posterior_classification(
                &config.bnn, &params, &act, &act.eta, &d.x, &labels, &grid, &config.hmc,
            )?
        }
    };
    info!("posterior acceptance {:.3}", pred.acceptance_rate);
    write_predictive(&out.join(artifacts::PREDICTIVE), &pred, format)?;

    let reference = reference_samples(config, &d, &grid, pred.samples.rows())?;
    let report = metrics::compare_batches(&pred.batch(), &reference)?;
    artifacts::write_metrics(&out.join(artifacts::METRICS), &report)?;
    Ok(())
}

/// Ground-truth GP posterior draws on the grid: exact for regression,
/// latent HMC for classification.
fn reference_samples(
    config: &RunConfig,
    d: &wideprior::data::Dataset,
    grid: &MeasurementSet<f64>,
    count: usize,
) -> Result<FunctionSampleBatch<f64>, CliError> {
    let values = match config.task {
        Task::Regression1d => {
            let post = gp::gp_posterior_regression(&config.gp, &d.x, &d.y, grid.points())?;
            gp::gp_posterior_samples(&config.gp, &post, count, derive_seed(config.seed, &[0x9e5]))?
        }
        Task::TwoMoons => {
            let labels = d.labels()?;
            let hc = wideprior::hmc::HmcConfig { seed: derive_seed(config.seed, &[0x9e6]), ..config.hmc.clone() };
            gp::gp_latent_classification_samples(&config.gp, &d.x, &labels, grid, &hc)?
        }
    };
    Ok(FunctionSampleBatch::new(values, grid.points().clone(), SampleSource::Gp))
}

fn write_predictive(path: &Path, pred: &PosteriorPredictive<f64>, format: PredictiveFormat) -> Result<(), CliError> {
    let f = pred.grid.cols();
    let mut header = coordinate_header(f);
    let g = pred.grid.rows();
    let coords = |j: usize| pred.grid.row(j).iter().map(|&v| num(v)).collect::<Vec<_>>();
    match format {
        PredictiveFormat::Summary => {
            header.extend(["mean", "std"].map(String::from));
            let (mean, std) = (pred.mean(), pred.std());
            let unc = (pred.task == TaskKind::Classification).then(|| pred.uncertainty());
            if unc.is_some() {
                header.extend(["total", "epistemic"].map(String::from));
            }
            let rows = (0..g).map(|j| {
                let mut r = coords(j);
                r.push(num(mean[j]));
                r.push(num(std[j]));
                if let Some(u) = &unc {
                    r.push(num(u.total[j]));
                    r.push(num(u.epistemic[j]));
                }
                r
            });
            artifacts::write_table(path, &header, rows)
        }
        PredictiveFormat::Draws => {
            header.extend((0..pred.samples.rows()).map(|s| format!("draw_{s}")));
            let rows = (0..g).map(|j| {
                let mut r = coords(j);
                r.extend((0..pred.samples.rows()).map(|s| num(pred.samples[(s, j)])));
                r
            });
            artifacts::write_table(path, &header, rows)
        }
    }
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join(artifacts::METRICS);
        if !path.is_file() {
            return Err(CliError::MissingArtifacts(format!("{} not found", path.display())));
        }
        rows.push((name, artifacts::read_metrics(&path)?));
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let header = artifacts::metric_header(&["run"]);
    let table = rows.into_iter().map(|(name, m)| {
        let mut r = vec![name];
        r.extend(artifacts::metric_cells(&m));
        r
    });
    artifacts::write_table(&out.join(artifacts::REPORT), &header, table)
}
