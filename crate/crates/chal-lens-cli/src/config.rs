//! Run configuration: JSON config files overridden by command-line
//! flags, with the effective configuration echoed into the output
//! directory.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Args)]
pub struct FitArgs {
    /// JSON run config; explicit flags override its fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long = "ref")]
    pub masks_ref: Option<PathBuf>,
    #[arg(long = "pred")]
    pub masks_pred: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub algorithms: Option<Vec<String>>,
    /// lmm or glmm
    #[arg(long)]
    pub model: Option<String>,
    /// recall or precision
    #[arg(long)]
    pub perspective: Option<String>,
    /// all, single or multi (instrument count per image)
    #[arg(long)]
    pub subset: Option<String>,
    /// none, logit or log (LMM only)
    #[arg(long)]
    pub transform: Option<String>,
    /// clamp distance from the boundary for transforms
    #[arg(long)]
    pub eps: Option<f64>,
    /// significance level for stars and buckets
    #[arg(long)]
    pub alpha: Option<f64>,
    /// model algorithms as fixed effects instead of a random factor
    #[arg(long)]
    pub algorithm_fixed: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// outer optimizer tolerance on the criterion
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Effective, fully-resolved fit configuration (echoed to config.json).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub images: PathBuf,
    pub instances: PathBuf,
    pub outcomes: Option<PathBuf>,
    pub masks_ref: Option<PathBuf>,
    pub masks_pred: Option<PathBuf>,
    pub algorithms: Option<Vec<String>>,
    pub model: String,
    pub perspective: String,
    pub subset: String,
    pub transform: String,
    pub eps: f64,
    pub alpha: f64,
    pub algorithm_fixed: bool,
    pub seed: u64,
    pub tol: f64,
    pub out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
struct RunConfigFile {
    images: Option<PathBuf>,
    instances: Option<PathBuf>,
    outcomes: Option<PathBuf>,
    masks_ref: Option<PathBuf>,
    masks_pred: Option<PathBuf>,
    algorithms: Option<Vec<String>>,
    model: Option<String>,
    perspective: Option<String>,
    subset: Option<String>,
    transform: Option<String>,
    eps: Option<f64>,
    alpha: Option<f64>,
    algorithm_fixed: Option<bool>,
    seed: Option<u64>,
    tol: Option<f64>,
    out: Option<PathBuf>,
}

fn user(msg: String) -> CliError {
    CliError::user(anyhow::anyhow!(msg))
}

impl FitArgs {
    /// Merges the config file (if any) under the flags and validates the
    /// combination.
    pub fn resolve(self) -> Result<RunConfig, CliError> {
        let file: RunConfigFile = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => RunConfigFile::default(),
        };
        let config = RunConfig {
            images: self
                .images
                .or(file.images)
                .ok_or_else(|| user("missing --images (or `images` in the config file)".into()))?,
            instances: self.instances.or(file.instances).ok_or_else(|| {
                user("missing --instances (or `instances` in the config file)".into())
            })?,
            outcomes: self.outcomes.or(file.outcomes),
            masks_ref: self.masks_ref.or(file.masks_ref),
            masks_pred: self.masks_pred.or(file.masks_pred),
            algorithms: self.algorithms.or(file.algorithms),
            model: self.model.or(file.model).unwrap_or_else(|| "glmm".into()),
            perspective: self
                .perspective
                .or(file.perspective)
                .unwrap_or_else(|| "recall".into()),
            subset: self.subset.or(file.subset).unwrap_or_else(|| "all".into()),
            transform: self
                .transform
                .or(file.transform)
                .unwrap_or_else(|| "none".into()),
            eps: self
                .eps
                .or(file.eps)
                .unwrap_or(chal_lens::transforms::DEFAULT_EPS),
            alpha: self.alpha.or(file.alpha).unwrap_or(0.05),
            algorithm_fixed: self.algorithm_fixed || file.algorithm_fixed.unwrap_or(false),
            seed: self.seed.or(file.seed).unwrap_or(0),
            tol: self.tol.or(file.tol).unwrap_or(1e-9),
            out: self
                .out
                .or(file.out)
                .ok_or_else(|| user("missing --out (or `out` in the config file)".into()))?,
        };
        config.validate()?;
        Ok(config)
    }
}

impl RunConfig {
    fn validate(&self) -> Result<(), CliError> {
        match self.model.as_str() {
            "lmm" | "glmm" => {}
            other => return Err(user(format!("unknown model `{other}` (use lmm or glmm)"))),
        }
        match self.perspective.as_str() {
            "recall" | "precision" => {}
            other => {
                return Err(user(format!(
                    "unknown perspective `{other}` (use recall or precision)"
                )))
            }
        }
        match self.subset.as_str() {
            "all" | "single" | "multi" => {}
            other => {
                return Err(user(format!(
                    "unknown subset `{other}` (use all, single or multi)"
                )))
            }
        }
        match self.transform.as_str() {
            "none" | "logit" | "log" => {}
            other => {
                return Err(user(format!(
                    "unknown transform `{other}` (use none, logit or log)"
                )))
            }
        }
        if self.model == "glmm" && self.transform != "none" {
            return Err(user(
                "incompatible options: --transform only applies to --model lmm \
                 (the GLMM links the binomial outcome directly)"
                    .into(),
            ));
        }
        if self.outcomes.is_none() && (self.masks_ref.is_none() || self.masks_pred.is_none()) {
            return Err(user(
                "outcomes source missing: give --outcomes, or both --ref and --pred".into(),
            ));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(user(format!("alpha {} must be in (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Args)]
pub struct SimulateArgs {
    /// simulation config JSON (default: desk-scale binomial config)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_sim_config(
    path: Option<&Path>,
    seed: Option<u64>,
) -> Result<chal_lens::simulate::SimConfig, CliError> {
    let mut config = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => chal_lens::simulate::SimConfig::desk_scale(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

/// Worker-thread default: --jobs flag, then CHAL_LENS_JOBS, then 1.
pub fn resolve_jobs(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("CHAL_LENS_JOBS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}
