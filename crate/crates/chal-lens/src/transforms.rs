//! Outcome transforms and the model-path recommendation.
//!
//! Bounded metrics violate the normality assumption of a linear mixed
//! model; the logit maps (0, 1) onto the real line, the natural log maps
//! (0, inf). Boundary values are clamped into [eps, 1 - eps] with the
//! number of clamps reported, because a clamped transform can still fail
//! to normalise the residuals and the caller must be able to see that.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{normality_check, DiagnosticsError, NormalityOptions, NormalityReport};

/// Default clamp distance from the unit-interval boundary.
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("logit domain error: {value} is outside [0, 1]")]
    LogitDomain { value: f64 },
    #[error("log domain error: {value} is negative")]
    LogDomain { value: f64 },
    #[error("invalid epsilon {eps}; must be in (0, 0.5)")]
    BadEps { eps: f64 },
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Logit,
    Log,
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransformKind::Logit => write!(f, "logit"),
            TransformKind::Log => write!(f, "log"),
        }
    }
}

/// ln(v / (1 - v)) on the open unit interval.
pub fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// Inverse of [`logit`]; accepts any real.
pub fn logit_inverse(z: f64) -> f64 {
    crate::stats::sigmoid(z)
}

/// Clamps into [eps, 1 - eps] and reports whether the value moved.
/// Values already inside the band are returned untouched.
pub fn clamp_unit(v: f64, eps: f64) -> (f64, bool) {
    if v < eps {
        (eps, true)
    } else if v > 1.0 - eps {
        (1.0 - eps, true)
    } else {
        (v, false)
    }
}

/// Logit with boundary clamping; rejects values outside [0, 1].
/// Returns the transformed value and whether clamping occurred.
pub fn logit_clamped(v: f64, eps: f64) -> Result<(f64, bool), TransformError> {
    if !(0.0..=0.5).contains(&eps) || eps == 0.0 {
        return Err(TransformError::BadEps { eps });
    }
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(TransformError::LogitDomain { value: v });
    }
    let (clamped, moved) = clamp_unit(v, eps);
    Ok((logit(clamped), moved))
}

/// Natural log with zero clamped to eps; rejects negative values.
pub fn log_clamped(v: f64, eps: f64) -> Result<(f64, bool), TransformError> {
    if !(0.0..=0.5).contains(&eps) || eps == 0.0 {
        return Err(TransformError::BadEps { eps });
    }
    if v < 0.0 || v.is_nan() {
        return Err(TransformError::LogDomain { value: v });
    }
    if v < eps {
        Ok((eps.ln(), true))
    } else {
        Ok((v.ln(), false))
    }
}

/// Result of transforming a batch of outcome values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformedBatch {
    pub values: Vec<f64>,
    /// Number of inputs that had to be clamped away from the boundary.
    pub clamped: u64,
}

/// Applies a transform elementwise with the given clamp epsilon.
pub fn transform_batch(
    values: &[f64],
    kind: TransformKind,
    eps: f64,
) -> Result<TransformedBatch, TransformError> {
    let mut out = Vec::with_capacity(values.len());
    let mut clamped = 0u64;
    for &v in values {
        let (t, moved) = match kind {
            TransformKind::Logit => logit_clamped(v, eps)?,
            TransformKind::Log => log_clamped(v, eps)?,
        };
        if moved {
            clamped += 1;
        }
        out.push(t);
    }
    Ok(TransformedBatch {
        values: out,
        clamped,
    })
}

/// Declared support of an outcome metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeSupport {
    Unbounded,
    UnitInterval,
    NonNegative,
    BinaryCounts,
}

impl std::str::FromStr for OutcomeSupport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unbounded" => Ok(OutcomeSupport::Unbounded),
            "unit" | "unit_interval" => Ok(OutcomeSupport::UnitInterval),
            "nonneg" | "non_negative" => Ok(OutcomeSupport::NonNegative),
            "binary" | "binary_counts" => Ok(OutcomeSupport::BinaryCounts),
            other => Err(format!("unknown outcome support `{other}`")),
        }
    }
}

/// Which model the workflow recommends for a given outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model", content = "transform")]
pub enum ModelPath {
    Lmm,
    LmmWithTransform(TransformKind),
    GlmmBinary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecommendation {
    pub path: ModelPath,
    /// Normality diagnostics of the untransformed values, when applicable.
    pub normality: Option<NormalityReport>,
}

/// Model-selection workflow: binary counts go to the binomial GLMM;
/// outcomes that look normal (or are unbounded) go to a plain LMM;
/// bounded non-normal outcomes get the transform matching their support.
///
/// The recommendation is a pure function of the sample and the declared
/// support. If the transformed residuals still fail the normality check
/// downstream, the binomial GLMM is the documented fallback.
pub fn recommend_model_path(
    outcome_values: &[f64],
    support: OutcomeSupport,
    options: &NormalityOptions,
) -> Result<ModelRecommendation, TransformError> {
    if support == OutcomeSupport::BinaryCounts {
        return Ok(ModelRecommendation {
            path: ModelPath::GlmmBinary,
            normality: None,
        });
    }
    let report = normality_check(outcome_values, options)?;
    let path = match support {
        OutcomeSupport::Unbounded => ModelPath::Lmm,
        OutcomeSupport::UnitInterval => {
            if report.verdict {
                ModelPath::Lmm
            } else {
                ModelPath::LmmWithTransform(TransformKind::Logit)
            }
        }
        OutcomeSupport::NonNegative => {
            if report.verdict {
                ModelPath::Lmm
            } else {
                ModelPath::LmmWithTransform(TransformKind::Log)
            }
        }
        OutcomeSupport::BinaryCounts => unreachable!(),
    };
    Ok(ModelRecommendation {
        path,
        normality: Some(report),
    })
}
