//! On-disk formats: CSV tables (header row, LF endings, shortest round-trip
//! decimals) and the JSON checkpoint.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wideprior::activations::ActivationModel;
use wideprior::bnn::{BnnConfig, PriorParams};
use wideprior::data::Dataset;
use wideprior::linalg::Matrix;
use wideprior::metrics::MetricReport;
use wideprior::trainer::TrainMode;

use crate::error::CliError;

pub const DATASET: &str = "dataset.csv";
pub const DATASET_META: &str = "dataset_meta.json";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const LOSS_TRACE: &str = "loss_trace.csv";
pub const METRICS: &str = "metrics.csv";
pub const PER_SET_LOSS: &str = "per_set_loss.csv";
pub const PREDICTIVE: &str = "predictive.csv";
pub const PRIOR_PREDICTIVE: &str = "prior_predictive.csv";
pub const REPORT: &str = "report.csv";
pub const LOG: &str = "run.log";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub bnn: BnnConfig,
    pub params: PriorParams<f64>,
    pub activation: ActivationModel<f64>,
    pub mode: TrainMode,
    pub seed: u64,
}

fn writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

pub fn write_table<I>(path: &Path, header: &[String], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = writer(path)?;
    let io = |e: csv::Error| CliError::io(path, e);
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<(), CliError> {
    let rows = (0..d.len()).map(|i| {
        let mut r: Vec<String> = d.x.row(i).iter().map(|&v| num(v)).collect();
        r.push(num(d.y[i]));
        r
    });
    write_table(path, &d.header(), rows)
}

/// Reads a dataset CSV with `dim` input columns followed by `y`.
pub fn read_dataset(path: &Path, dim: usize) -> Result<Dataset, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.len() != dim + 1 || header.get(dim) != Some("y") {
        return Err(CliError::Config(format!(
            "{}: expected {dim} input columns and a final 'y' column, got {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{}: row {}: {e}", path.display(), line + 1)))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Config(format!("{}: row {} is not finite", path.display(), line + 1)));
        }
        x.extend_from_slice(&vals[..dim]);
        y.push(vals[dim]);
    }
    let n = y.len();
    let x = Matrix::new(n, dim, x).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Dataset { x, y, seed: 0 })
}

pub fn metric_header(first: &[&str]) -> Vec<String> {
    first.iter().chain(MetricReport::FIELDS.iter()).map(|s| s.to_string()).collect()
}

pub fn metric_cells(m: &MetricReport) -> Vec<String> {
    m.values().iter().map(|&v| num(v)).collect()
}

pub fn write_metrics(path: &Path, m: &MetricReport) -> Result<(), CliError> {
    write_table(path, &metric_header(&[]), [metric_cells(m)])
}

pub fn read_metrics(path: &Path) -> Result<MetricReport, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let header = r.headers().map_err(|e| CliError::io(path, e))?.clone();
    if header.iter().ne(MetricReport::FIELDS.iter().copied()) {
        return Err(CliError::Config(format!("{}: unexpected metric columns", path.display())));
    }
    let rec = r
        .records()
        .next()
        .ok_or_else(|| CliError::MissingArtifacts(format!("{} has no data row", path.display())))?
        .map_err(|e| CliError::io(path, e))?;
    let mut v = [0.0; 11];
    for (slot, s) in v.iter_mut().zip(rec.iter()) {
        *slot = s.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(MetricReport::from_values(v))
}
