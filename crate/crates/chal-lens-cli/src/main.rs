//! Command-line pipeline: ingest and audit annotated challenge data,
//! compute mask metrics, pick a model path, fit mixed models, and turn
//! fits into effect tables and forest plots. Synthetic challenges with
//! known ground truth come from `simulate`; `coverage` runs the
//! Monte-Carlo validation harness.

mod config;
mod pipeline;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{FitArgs, SimulateArgs};

#[derive(Parser)]
#[command(
    name = "chal-lens",
    version,
    about = "Learning from challenge results: metrics, mixed models, effect reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DatasetArgs {
    /// images.csv with global and background annotation flags
    #[arg(long)]
    images: std::path::PathBuf,
    /// instances.csv with per-instrument annotation flags
    #[arg(long)]
    instances: std::path::PathBuf,
    /// outcomes.csv with per-(image, instance, algorithm) confusion counts
    #[arg(long)]
    outcomes: Option<std::path::PathBuf>,
    /// reference mask directory (ref/<image_id>.pgm)
    #[arg(long = "ref")]
    masks_ref: Option<std::path::PathBuf>,
    /// prediction mask root (pred/<algorithm_id>/<image_id>.pgm)
    #[arg(long = "pred")]
    masks_pred: Option<std::path::PathBuf>,
    /// comma-separated algorithm ids (default: derived from the data)
    #[arg(long, value_delimiter = ',')]
    algorithms: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset, audit annotation counts, summarize prevalences
    Ingest {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Compute outcomes.csv and instance metrics from mask directories
    Metrics {
        /// images.csv (defines the image set and hierarchy)
        #[arg(long)]
        images: std::path::PathBuf,
        #[arg(long)]
        instances: std::path::PathBuf,
        #[arg(long = "ref")]
        masks_ref: std::path::PathBuf,
        #[arg(long = "pred")]
        masks_pred: std::path::PathBuf,
        #[arg(long, value_delimiter = ',')]
        algorithms: Option<Vec<String>>,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Recommend LMM / transformed LMM / binomial GLMM for an outcome
    Recommend {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// which success probability the rows model
        #[arg(long, default_value = "recall")]
        perspective: String,
        /// declared outcome support: unit, nonneg, unbounded or binary
        #[arg(long, default_value = "unit")]
        support: String,
        /// normality-verdict significance level
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Fit a mixed model and write the fit record and effect report
    Fit(FitArgs),
    /// Regenerate the effect report from an existing fit.json
    Report {
        #[arg(long)]
        fit: std::path::PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: std::path::PathBuf,
    },
    /// Generate a synthetic challenge dataset with known ground truth
    Simulate(SimulateArgs),
    /// Monte-Carlo coverage study of an estimator
    Coverage {
        /// simulation config JSON (default: desk-scale binomial config)
        #[arg(long)]
        config: Option<std::path::PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value = "glmm")]
        model: String,
        /// worker threads (default: env CHAL_LENS_JOBS, then 1)
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: std::path::PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err.message);
            ExitCode::from(err.exit_code)
        }
    }
}

/// Error carrying the documented exit code: 1 for user errors,
/// 2 for numerical failures.
pub struct CliError {
    pub message: anyhow::Error,
    pub exit_code: u8,
}

impl CliError {
    pub fn user(message: impl Into<anyhow::Error>) -> Self {
        CliError {
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn numerical(message: impl Into<anyhow::Error>) -> Self {
        CliError {
            message: message.into(),
            exit_code: 2,
        }
    }
}

impl From<chal_lens::data::DataError> for CliError {
    fn from(e: chal_lens::data::DataError) -> Self {
        CliError::user(e)
    }
}

impl From<chal_lens::design::DesignError> for CliError {
    fn from(e: chal_lens::design::DesignError) -> Self {
        CliError::user(e)
    }
}

impl From<chal_lens::mask::MaskError> for CliError {
    fn from(e: chal_lens::mask::MaskError) -> Self {
        CliError::user(e)
    }
}

impl From<chal_lens::mme::FitError> for CliError {
    fn from(e: chal_lens::mme::FitError) -> Self {
        CliError::numerical(e)
    }
}

impl From<chal_lens::metrics::MetricError> for CliError {
    fn from(e: chal_lens::metrics::MetricError) -> Self {
        CliError::numerical(e)
    }
}

impl From<chal_lens::transforms::TransformError> for CliError {
    fn from(e: chal_lens::transforms::TransformError) -> Self {
        CliError::numerical(anyhow::Error::from(e))
    }
}

impl From<chal_lens::simulate::SimError> for CliError {
    fn from(e: chal_lens::simulate::SimError) -> Self {
        match e {
            chal_lens::simulate::SimError::Fit(inner) => CliError::numerical(inner),
            other => CliError::user(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::user(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::user(e)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest { dataset, out } => pipeline::ingest(&dataset, &out),
        Command::Metrics {
            images,
            instances,
            masks_ref,
            masks_pred,
            algorithms,
            out,
        } => pipeline::metrics(&images, &instances, &masks_ref, &masks_pred, algorithms, &out),
        Command::Recommend {
            dataset,
            perspective,
            support,
            alpha,
            seed,
            out,
        } => pipeline::recommend(&dataset, &perspective, &support, alpha, seed, &out),
        Command::Fit(args) => pipeline::fit(args),
        Command::Report { fit, alpha, out } => pipeline::report(&fit, alpha, &out),
        Command::Simulate(args) => pipeline::simulate(args),
        Command::Coverage {
            config,
            seed,
            reps,
            model,
            jobs,
            out,
        } => pipeline::coverage(config.as_deref(), seed, reps, &model, jobs, &out),
    }
}
