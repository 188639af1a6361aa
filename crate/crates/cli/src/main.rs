//! `wideprior` command-line driver.

mod artifacts;
mod commands;
mod config;
mod error;

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use wideprior::trainer::TrainMode;

use crate::commands::{PredictiveFormat, PriorChoice};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "wideprior", version, about = "Function-space priors for wide Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: `out_dir` from the config, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task's dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Match the BNN prior to the configured GP.
    TrainPrior {
        #[command(flatten)]
        common: Common,
        /// Which parameters to train (overrides `train.mode`).
        #[arg(long, value_parser = ["w", "a", "a+w", "w_only", "a_only", "a_plus_w"])]
        mode: Option<String>,
    },
    /// Evaluate a trained prior on held-out measurement sets.
    EvalPrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample the BNN posterior on a dataset and compare it with the GP posterior.
    Posterior {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "default_prior", conflicts_with = "default_prior")]
        checkpoint: Option<PathBuf>,
        /// Use the fixed unit-variance ReLU prior instead of a checkpoint.
        #[arg(long)]
        default_prior: bool,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "summary")]
        format: PredictiveFormat,
    },
    /// Collect `metrics.csv` from run directories into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let config = RunConfig::load(&common.config, common.seed)?;
    let out = common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    create_out(&out)?;
    Ok((config, out))
}

fn create_out(out: &PathBuf) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let log_path = out.join(artifacts::LOG);
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    // Timestamps only ever go to the log file.
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(file)))
        .try_init();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let (config, out) = prepare(&common)?;
            commands::gen_data(&config, &out)
        }
        Command::TrainPrior { common, mode } => {
            let (config, out) = prepare(&common)?;
            let mode = mode.map(|m| TrainMode::parse(&m).expect("restricted by clap"));
            commands::train_prior(&config, mode, &out)
        }
        Command::EvalPrior { common, checkpoint } => {
            let (config, out) = prepare(&common)?;
            commands::eval_prior(&config, &checkpoint, &out)
        }
        Command::Posterior { common, checkpoint, default_prior, dataset, format } => {
            let (config, out) = prepare(&common)?;
            let prior = match checkpoint {
                Some(p) if !default_prior => PriorChoice::Checkpoint(p),
                _ => PriorChoice::DefaultRelu,
            };
            commands::posterior(&config, prior, &dataset, format, &out)
        }
        Command::Report { runs, out } => {
            create_out(&out)?;
            commands::report(&runs, &out)
        }
    }
}

/// Parses the arguments; every rejected invocation ends with a usage line.
fn parse() -> Cli {
    let err = match Cli::try_parse() {
        Ok(cli) => return cli,
        Err(e) => e,
    };
    if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        err.exit();
    }
    let rendered = err.render().to_string();
    eprint!("{rendered}");
    if !rendered.contains("Usage:") {
        let mut cmd = Cli::command();
        cmd.build();
        let usage = std::env::args()
            .nth(1)
            .and_then(|name| cmd.find_subcommand_mut(&name).map(|sub| sub.render_usage().to_string()))
            .unwrap_or_else(|| cmd.render_usage().to_string());
        eprintln!("\n{usage}");
    }
    std::process::exit(2);
}

fn main() -> ExitCode {
    let cli = parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("wideprior: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
