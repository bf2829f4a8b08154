//! Binomial logistic mixed model fitted by the Laplace approximation.
//!
//! For fixed variance parameters, the inner loop finds the joint mode of
//! the fixed effects and the spherical random effects u* by penalized
//! iteratively reweighted least squares (PIRLS) with step halving on the
//! penalized deviance. The Laplace-approximated marginal deviance is
//!
//! ```text
//! d(theta) = -2 ln f(y | mode) + ||u*||^2 + ln det(L'Z'WZL + I)
//! ```
//!
//! with the weights W evaluated at the mode. The outer simplex runs over
//! the log standard deviations of the (at most four) crossed factors.
//! Adaptive quadrature is not an option here: the factors are crossed,
//! not nested, so the integral does not factor into low-dimensional
//! pieces. The accuracy caveat of the Laplace approximation is mildest
//! in exactly our regime of large binomial trials.

use serde::{Deserialize, Serialize};

use crate::design::GroupSpec;
use crate::glm::{start_alpha, validate_binomial, SEPARATION_LIMIT};
use crate::lmm::{RandomEffectBlock, VarianceComponent, LOG_SD_LOWER};
use crate::mme::{check_full_rank, FitError, FixedEffects, PenalizedSystem};
use crate::optim::{minimize, OptimOptions};
use crate::stats::{ln_1p_exp, ln_choose, sigmoid};

const BOUNDARY_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GlmmOptions {
    /// PIRLS tolerance on the conditional-mode change.
    pub inner_tol: f64,
    pub max_inner: usize,
    /// Simplex tolerance on the Laplace deviance.
    pub outer_tol: f64,
    pub max_outer: usize,
    /// Fix the log SDs instead of optimizing them
    /// (`f64::NEG_INFINITY` pins a component to exactly zero).
    pub fixed_log_sd: Option<Vec<f64>>,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        GlmmOptions {
            inner_tol: 1e-8,
            max_inner: 200,
            outer_tol: 1e-9,
            max_outer: 500,
            fixed_log_sd: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmmFit {
    pub alpha: f64,
    pub alpha_se: f64,
    pub beta: Vec<f64>,
    pub beta_names: Vec<String>,
    pub beta_se: Vec<f64>,
    /// Random-effect variances on the link scale (no residual scaling in
    /// a binomial model).
    pub variance_components: Vec<VarianceComponent>,
    pub conditional_modes: Vec<RandomEffectBlock>,
    /// -2 x Laplace-approximated marginal log-likelihood.
    pub laplace_deviance: f64,
    pub fitted_probabilities: Vec<f64>,
    pub converged: bool,
    pub n_iter_outer: usize,
    pub n_iter_inner_total: usize,
    pub n_obs: usize,
    pub warnings: Vec<String>,
}

/// Binomial data view shared by the PIRLS internals.
pub struct BinomialData<'a> {
    pub successes: &'a [u64],
    pub trials: &'a [u64],
}

struct PirlsState {
    coef: Vec<f64>,
    ustar: Vec<f64>,
    eta: Vec<f64>,
    /// -2 log f(y|mode) + ||u*||^2, up to the binomial constant.
    penalized_deviance: f64,
    n_iter: usize,
    separation: bool,
}

struct PirlsContext<'a> {
    data: BinomialData<'a>,
    /// Per-row ln C(t, s), computed once.
    ln_coef: Vec<f64>,
    s_f: Vec<f64>,
    t_f: Vec<f64>,
}

impl<'a> PirlsContext<'a> {
    fn new(data: BinomialData<'a>) -> Self {
        let ln_coef = data
            .successes
            .iter()
            .zip(data.trials)
            .map(|(&s, &t)| ln_choose(t, s))
            .collect();
        let s_f = data.successes.iter().map(|&v| v as f64).collect();
        let t_f = data.trials.iter().map(|&v| v as f64).collect();
        PirlsContext {
            data,
            ln_coef,
            s_f,
            t_f,
        }
    }

    // compensated sums keep the deviance insensitive to the row order,
    // which equivalent datasets (split or permuted rows) rely on
    fn penalized_deviance(&self, eta: &[f64], ustar: &[f64]) -> f64 {
        let ll = crate::stats::compensated_sum(
            (0..eta.len())
                .map(|i| self.ln_coef[i] + self.s_f[i] * eta[i] - self.t_f[i] * ln_1p_exp(eta[i])),
        );
        -2.0 * ll + crate::stats::compensated_sum(ustar.iter().map(|u| u * u))
    }
}

fn pirls(
    sys: &mut PenalizedSystem,
    ctx: &PirlsContext,
    lambda: &[f64],
    options: &GlmmOptions,
    warm: Option<&(Vec<f64>, Vec<f64>)>,
) -> Result<PirlsState, FitError> {
    let n = sys.n;
    // the mode is unique (strictly concave penalized objective), so a warm
    // start from a nearby theta changes nothing but the iteration count
    let (mut coef, mut ustar) = match warm {
        Some((c, u)) if c.len() == sys.p1 && u.len() == sys.q => (c.clone(), u.clone()),
        _ => {
            let mut coef = vec![0.0; sys.p1];
            coef[0] = start_alpha(ctx.data.successes, ctx.data.trials);
            (coef, vec![0.0; sys.q])
        }
    };
    let mut eta = vec![0.0; n];
    sys.linear_predictor(&coef, &ustar, lambda, &mut eta);
    let mut dev = ctx.penalized_deviance(&eta, &ustar);

    let mut weights = vec![0.0; n];
    let mut working = vec![0.0; n];
    let mut n_iter = 0;
    let mut separation = false;
    let mut last_change = f64::INFINITY;
    // after meeting the tolerance, one extra Newton step parks the mode
    // at its quadratic floor: the log-determinant term is not stationary
    // in the mode, so stopping-point scatter would otherwise leak into
    // the deviance at the tolerance scale
    let mut extra_step_done = false;

    while n_iter < options.max_inner {
        n_iter += 1;
        for i in 0..n {
            let mu = sigmoid(eta[i]);
            let w = (ctx.t_f[i] * mu * (1.0 - mu)).max(1e-12);
            weights[i] = w;
            working[i] = eta[i] + (ctx.s_f[i] - ctx.t_f[i] * mu) / w;
        }
        let sol = sys.solve(lambda, Some(&weights), &working)?;

        // step halving on the penalized deviance
        let mut step = 1.0;
        let mut accepted = false;
        let mut cand_coef = coef.clone();
        let mut cand_ustar = ustar.clone();
        let mut cand_eta = vec![0.0; n];
        let mut cand_dev = dev;
        for _ in 0..30 {
            for j in 0..sys.p1 {
                cand_coef[j] = coef[j] + step * (sol.coef[j] - coef[j]);
            }
            for k in 0..sys.q {
                cand_ustar[k] = ustar[k] + step * (sol.ustar[k] - ustar[k]);
            }
            sys.linear_predictor(&cand_coef, &cand_ustar, lambda, &mut cand_eta);
            cand_dev = ctx.penalized_deviance(&cand_eta, &cand_ustar);
            if cand_dev <= dev + 1e-12 {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // the mode is already as good as the quadratic model allows
            break;
        }

        last_change = coef
            .iter()
            .zip(&cand_coef)
            .chain(ustar.iter().zip(&cand_ustar))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        coef.copy_from_slice(&cand_coef);
        ustar.copy_from_slice(&cand_ustar);
        eta.copy_from_slice(&cand_eta);
        dev = cand_dev;

        if coef.iter().any(|c| c.abs() > SEPARATION_LIMIT) {
            separation = true;
            break;
        }
        if last_change < options.inner_tol {
            if extra_step_done {
                break;
            }
            extra_step_done = true;
        } else {
            extra_step_done = false;
        }
    }
    if last_change >= options.inner_tol && !separation && n_iter >= options.max_inner {
        return Err(FitError::NotConverged {
            what: "PIRLS inner loop",
            n_iter,
            last_change,
        });
    }

    Ok(PirlsState {
        coef,
        ustar,
        eta,
        penalized_deviance: dev,
        n_iter,
        separation,
    })
}

struct DevianceParts {
    deviance: f64,
    state: PirlsState,
    solution: crate::mme::SystemSolution,
}

fn laplace_parts(
    sys: &mut PenalizedSystem,
    ctx: &PirlsContext,
    theta: &[f64],
    options: &GlmmOptions,
    warm: Option<&(Vec<f64>, Vec<f64>)>,
) -> Result<DevianceParts, FitError> {
    let lambda: Vec<f64> = theta
        .iter()
        .map(|&t| if t == f64::NEG_INFINITY { 0.0 } else { t.exp() })
        .collect();
    let state = pirls(sys, ctx, &lambda, options, warm)?;
    // one extra solve at the mode so the log-determinant uses the final
    // weights (step halving can leave the last factorization stale)
    let n = sys.n;
    let mut weights = vec![0.0; n];
    let mut working = vec![0.0; n];
    for i in 0..n {
        let mu = sigmoid(state.eta[i]);
        let w = (ctx.t_f[i] * mu * (1.0 - mu)).max(1e-12);
        weights[i] = w;
        working[i] = state.eta[i] + (ctx.s_f[i] - ctx.t_f[i] * mu) / w;
    }
    let solution = sys.solve(&lambda, Some(&weights), &working)?;
    let deviance = state.penalized_deviance + solution.log_det_h;
    if !deviance.is_finite() {
        return Err(FitError::Numerical {
            message: format!("Laplace deviance is not finite at theta {theta:?}"),
        });
    }
    Ok(DevianceParts {
        deviance,
        state,
        solution,
    })
}

/// -2 x Laplace-approximated marginal log-likelihood at the given log
/// standard deviations. Deterministic for fixed inputs: the inner PIRLS
/// always cold-starts from beta = 0, alpha = logit of the pooled rate.
pub fn laplace_deviance(
    theta: &[f64],
    successes: &[u64],
    trials: &[u64],
    x: &FixedEffects,
    groups: &[GroupSpec],
    options: &GlmmOptions,
) -> Result<f64, FitError> {
    if theta.len() != groups.len() {
        return Err(FitError::DimensionMismatch {
            what: "theta",
            expected: groups.len(),
            got: theta.len(),
        });
    }
    validate_binomial(successes, trials, x.n_rows)?;
    let mut sys = PenalizedSystem::new(x, groups)?;
    let ctx = PirlsContext::new(BinomialData { successes, trials });
    Ok(laplace_parts(&mut sys, &ctx, theta, options, None)?.deviance)
}

/// Fits the binomial logistic mixed model.
pub fn fit_glmm_binomial(
    successes: &[u64],
    trials: &[u64],
    x: &FixedEffects,
    groups: &[GroupSpec],
    options: &GlmmOptions,
) -> Result<GlmmFit, FitError> {
    let n = x.n_rows;
    validate_binomial(successes, trials, n)?;
    let needed = x.p() + 1 + groups.len();
    if n < needed {
        return Err(FitError::TooFewRows { n, needed });
    }
    check_full_rank(x)?;

    let mut sys = PenalizedSystem::new(x, groups)?;
    let ctx = PirlsContext::new(BinomialData { successes, trials });
    let n_factors = groups.len();

    let inner_total = std::cell::Cell::new(0usize);
    let (theta_hat, n_outer, converged) = match &options.fixed_log_sd {
        Some(fixed) => {
            if fixed.len() != n_factors {
                return Err(FitError::DimensionMismatch {
                    what: "fixed_log_sd",
                    expected: n_factors,
                    got: fixed.len(),
                });
            }
            (fixed.clone(), 0, true)
        }
        None => {
            let mut last_err: Option<FitError> = None;
            // every evaluation cold-starts PIRLS so the deviance is a pure
            // function of theta; warm starts leave history-dependent noise
            // at exactly the simplex tolerance scale
            let result = minimize(
                |theta| match laplace_parts(&mut sys, &ctx, theta, options, None) {
                    Ok(parts) => {
                        inner_total.set(inner_total.get() + parts.state.n_iter);
                        parts.deviance
                    }
                    Err(e) => {
                        last_err = Some(e);
                        f64::INFINITY
                    }
                },
                &vec![0.0; n_factors],
                &OptimOptions {
                    max_iter: options.max_outer,
                    tol_f: options.outer_tol,
                    ..Default::default()
                },
            );
            if !result.f.is_finite() {
                return Err(last_err.unwrap_or(FitError::NotConverged {
                    what: "Laplace outer optimization",
                    n_iter: result.n_iter,
                    last_change: f64::NAN,
                }));
            }
            (result.x, result.n_iter, result.converged)
        }
    };

    // final cold-started evaluation at the optimum keeps the reported fit
    // identical to the public deviance operation
    let parts = laplace_parts(&mut sys, &ctx, &theta_hat, options, None)?;
    inner_total.set(inner_total.get() + parts.state.n_iter);
    let lambda: Vec<f64> = theta_hat
        .iter()
        .map(|&t| if t == f64::NEG_INFINITY { 0.0 } else { t.exp() })
        .collect();

    let mut warnings = Vec::new();
    if parts.state.separation {
        let worst = parts
            .state
            .coef
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(j, _)| j)
            .unwrap_or(0);
        let name = if worst == 0 {
            "intercept".to_string()
        } else {
            x.names[worst - 1].clone()
        };
        warnings.push(format!(
            "quasi-separation: |coefficient| > {SEPARATION_LIMIT} on `{name}`; estimates are unreliable"
        ));
    }

    let mut variance_components = Vec::with_capacity(n_factors);
    for (f, layout) in sys.factors.iter().enumerate() {
        let boundary = theta_hat[f] <= LOG_SD_LOWER + BOUNDARY_EPS;
        let variance = if boundary { 0.0 } else { lambda[f] * lambda[f] };
        if boundary {
            warnings.push(format!(
                "variance component `{}` estimated at the zero boundary",
                layout.name
            ));
        }
        variance_components.push(VarianceComponent {
            factor: layout.name.clone(),
            variance,
            sd: variance.sqrt(),
            boundary,
        });
    }

    let s_inv = parts.solution.s_inverse();
    let se: Vec<f64> = (0..sys.p1).map(|j| s_inv[(j, j)].sqrt()).collect();

    let fitted_probabilities: Vec<f64> = parts.state.eta.iter().map(|&e| sigmoid(e)).collect();
    let modes = sys.conditional_modes(&parts.state.ustar, &lambda);
    let conditional_modes = sys
        .factors
        .iter()
        .zip(modes)
        .map(|(layout, m)| RandomEffectBlock {
            factor: layout.name.clone(),
            modes: m,
        })
        .collect();

    if !converged && options.fixed_log_sd.is_none() {
        return Err(FitError::NotConverged {
            what: "Laplace outer optimization",
            n_iter: n_outer,
            last_change: parts.deviance,
        });
    }

    Ok(GlmmFit {
        alpha: parts.state.coef[0],
        alpha_se: se[0],
        beta: parts.state.coef[1..].to_vec(),
        beta_names: x.names.clone(),
        beta_se: se[1..].to_vec(),
        variance_components,
        conditional_modes,
        laplace_deviance: parts.deviance,
        fitted_probabilities,
        converged,
        n_iter_outer: n_outer,
        n_iter_inner_total: inner_total.get(),
        n_obs: n,
        warnings,
    })
}
