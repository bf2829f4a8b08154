//! Binomial logistic regression by iteratively reweighted least squares.
//!
//! Serves two roles: the stand-alone fixed-effects fit, and the exact
//! reduction target of the mixed logistic model when all random-effect
//! variances are zero.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::mme::{check_full_rank, FitError, FixedEffects};
use crate::stats::{ln_1p_exp, ln_choose, sigmoid};
use crate::transforms::clamp_unit;

/// Coefficients past this magnitude are treated as (quasi-)separation.
pub const SEPARATION_LIMIT: f64 = 15.0;

#[derive(Debug, Clone)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Convergence tolerance on the coefficient change.
    pub tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions {
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub alpha: f64,
    pub alpha_se: f64,
    pub beta: Vec<f64>,
    pub beta_names: Vec<String>,
    pub beta_se: Vec<f64>,
    /// -2 x binomial log-likelihood (including the binomial coefficients).
    pub minus_two_log_lik: f64,
    pub converged: bool,
    pub n_iter: usize,
}

pub(crate) fn binomial_minus_two_log_lik(
    successes: &[u64],
    trials: &[u64],
    eta: &[f64],
) -> f64 {
    let mut acc = 0.0;
    for i in 0..eta.len() {
        let s = successes[i] as f64;
        let t = trials[i] as f64;
        // s*ln(mu) + (t-s)*ln(1-mu) in a form stable for large |eta|
        acc += ln_choose(trials[i], successes[i]) + s * eta[i] - t * ln_1p_exp(eta[i]);
    }
    -2.0 * acc
}

pub(crate) fn validate_binomial(
    successes: &[u64],
    trials: &[u64],
    n: usize,
) -> Result<(), FitError> {
    if successes.len() != n {
        return Err(FitError::DimensionMismatch {
            what: "successes",
            expected: n,
            got: successes.len(),
        });
    }
    if trials.len() != n {
        return Err(FitError::DimensionMismatch {
            what: "trials",
            expected: n,
            got: trials.len(),
        });
    }
    for i in 0..n {
        if trials[i] == 0 {
            return Err(FitError::Numerical {
                message: format!("row {i}: trials must be >= 1"),
            });
        }
        if successes[i] > trials[i] {
            return Err(FitError::Numerical {
                message: format!(
                    "row {i}: successes {} exceed trials {}",
                    successes[i], trials[i]
                ),
            });
        }
    }
    Ok(())
}

pub(crate) fn start_alpha(successes: &[u64], trials: &[u64]) -> f64 {
    let s: f64 = successes.iter().map(|&v| v as f64).sum();
    let t: f64 = trials.iter().map(|&v| v as f64).sum();
    let (rate, _) = clamp_unit(s / t, 1e-6);
    crate::transforms::logit(rate)
}

/// Maximum-likelihood logistic regression on aggregated binomial rows.
pub fn fit_glm_logistic(
    successes: &[u64],
    trials: &[u64],
    x: &FixedEffects,
    options: &GlmOptions,
) -> Result<GlmFit, FitError> {
    let n = x.n_rows;
    validate_binomial(successes, trials, n)?;
    let p1 = x.p() + 1;
    if n < p1 {
        return Err(FitError::TooFewRows { n, needed: p1 });
    }
    check_full_rank(x)?;

    let row = |i: usize, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            x.values[i * x.p() + j - 1]
        }
    };
    let column_name = |j: usize| -> String {
        if j == 0 {
            "intercept".to_string()
        } else {
            x.names[j - 1].clone()
        }
    };

    let mut coef = DVector::<f64>::zeros(p1);
    coef[0] = start_alpha(successes, trials);

    let mut n_iter = 0;
    let mut converged = false;
    while n_iter < options.max_iter {
        n_iter += 1;
        let mut xtwx = DMatrix::<f64>::zeros(p1, p1);
        let mut xtwz = DVector::<f64>::zeros(p1);
        for i in 0..n {
            let mut eta = 0.0;
            for j in 0..p1 {
                eta += row(i, j) * coef[j];
            }
            let mu = sigmoid(eta);
            let t = trials[i] as f64;
            let w = (t * mu * (1.0 - mu)).max(1e-12);
            let z = eta + (successes[i] as f64 - t * mu) / w;
            for a in 0..p1 {
                let xa = row(i, a);
                if xa == 0.0 {
                    continue;
                }
                xtwz[a] += w * xa * z;
                for b in a..p1 {
                    xtwx[(a, b)] += w * xa * row(i, b);
                }
            }
        }
        for a in 0..p1 {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = Cholesky::new(xtwx).ok_or_else(|| FitError::Numerical {
            message: "IRLS information matrix is not positive definite".to_string(),
        })?;
        let new_coef = chol.solve(&xtwz);

        for j in 0..p1 {
            if new_coef[j].abs() > SEPARATION_LIMIT {
                return Err(FitError::Separation {
                    column: column_name(j),
                    limit: SEPARATION_LIMIT,
                });
            }
        }
        let delta = (&new_coef - &coef).amax();
        coef = new_coef;
        if delta < options.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FitError::NotConverged {
            what: "IRLS",
            n_iter,
            last_change: f64::NAN,
        });
    }

    // SEs from the inverse information at the optimum
    let mut xtwx = DMatrix::<f64>::zeros(p1, p1);
    let mut eta_vec = vec![0.0; n];
    for i in 0..n {
        let mut eta = 0.0;
        for j in 0..p1 {
            eta += row(i, j) * coef[j];
        }
        eta_vec[i] = eta;
        let mu = sigmoid(eta);
        let w = (trials[i] as f64 * mu * (1.0 - mu)).max(1e-12);
        for a in 0..p1 {
            let xa = row(i, a);
            if xa == 0.0 {
                continue;
            }
            for b in a..p1 {
                xtwx[(a, b)] += w * xa * row(i, b);
            }
        }
    }
    for a in 0..p1 {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    let info_inv = Cholesky::new(xtwx)
        .ok_or_else(|| FitError::Numerical {
            message: "information matrix is singular at the optimum".to_string(),
        })?
        .inverse();
    let se: Vec<f64> = (0..p1).map(|j| info_inv[(j, j)].sqrt()).collect();

    Ok(GlmFit {
        alpha: coef[0],
        alpha_se: se[0],
        beta: coef.iter().skip(1).copied().collect(),
        beta_names: x.names.clone(),
        beta_se: se[1..].to_vec(),
        minus_two_log_lik: binomial_minus_two_log_lik(successes, trials, &eta_vec),
        converged,
        n_iter,
    })
}
