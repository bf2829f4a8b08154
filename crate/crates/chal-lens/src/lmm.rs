//! Linear mixed model with crossed random intercepts, fitted by REML.
//!
//! The criterion is the profiled restricted deviance in the style of
//! Bates et al. (2015): for relative standard deviations lambda (one per
//! factor, parameterized as log lambda), the penalized least-squares
//! solve yields beta, the spherical modes u* and the penalized residual
//! sum of squares r^2; beta and the residual variance are profiled out
//! analytically, leaving
//!
//! ```text
//! -2 l_REML(theta) = ln|H| + ln|S| + (n - p - 1) (1 + ln(2 pi r^2 / (n - p - 1)))
//! ```
//!
//! with `H` the penalized random block and `S` the fixed-effect Schur
//! complement. The outer optimization is a simplex search over at most
//! four log relative standard deviations.

use serde::{Deserialize, Serialize};

use crate::design::GroupSpec;
use crate::mme::{check_full_rank, FitError, FixedEffects, PenalizedSystem};
use crate::optim::{minimize, OptimOptions};

/// Log relative SDs at or below this are reported as zero variance.
pub const LOG_SD_LOWER: f64 = -15.0;
const BOUNDARY_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LmmOptions {
    pub max_outer_iter: usize,
    /// Convergence tolerance on the REML criterion.
    pub tol: f64,
    /// Fix the log relative SDs instead of optimizing them
    /// (`f64::NEG_INFINITY` pins a component to exactly zero).
    pub fixed_log_sd: Option<Vec<f64>>,
}

impl Default for LmmOptions {
    fn default() -> Self {
        LmmOptions {
            max_outer_iter: 500,
            tol: 1e-9,
            fixed_log_sd: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub factor: String,
    pub variance: f64,
    pub sd: f64,
    /// Estimate collapsed to the zero boundary.
    pub boundary: bool,
}

/// Conditional modes of one random factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomEffectBlock {
    pub factor: String,
    pub modes: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmmFit {
    pub alpha: f64,
    pub alpha_se: f64,
    pub beta: Vec<f64>,
    pub beta_names: Vec<String>,
    pub beta_se: Vec<f64>,
    pub sigma2_eps: f64,
    pub sigma_eps_boundary: bool,
    pub variance_components: Vec<VarianceComponent>,
    pub conditional_modes: Vec<RandomEffectBlock>,
    pub restricted_log_likelihood: f64,
    /// -2 * restricted log-likelihood at the optimum.
    pub criterion: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub n_eval: usize,
    pub n_obs: usize,
    pub residuals: Vec<f64>,
    pub fitted: Vec<f64>,
    pub warnings: Vec<String>,
}

fn lambdas_from_log_sd(theta: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .map(|&t| if t == f64::NEG_INFINITY { 0.0 } else { t.exp() })
        .collect()
}

struct CriterionParts {
    criterion: f64,
    r2: f64,
    solution: crate::mme::SystemSolution,
}

fn reml_parts(
    sys: &mut PenalizedSystem,
    y: &[f64],
    theta: &[f64],
) -> Result<CriterionParts, FitError> {
    let lambda = lambdas_from_log_sd(theta);
    let solution = sys.solve(&lambda, None, y)?;
    let n = sys.n;
    let mut eta = vec![0.0; n];
    sys.linear_predictor(&solution.coef, &solution.ustar, &lambda, &mut eta);
    let rss: f64 = y.iter().zip(&eta).map(|(yi, ei)| (yi - ei).powi(2)).sum();
    let pen: f64 = solution.ustar.iter().map(|u| u * u).sum();
    let r2 = rss + pen;
    let df = (n - sys.p1) as f64;
    let criterion = solution.log_det_h
        + solution.log_det_s
        + df * (1.0 + (2.0 * std::f64::consts::PI * r2 / df).ln());
    if !criterion.is_finite() {
        return Err(FitError::Numerical {
            message: format!("REML criterion is not finite at theta {theta:?}"),
        });
    }
    Ok(CriterionParts {
        criterion,
        r2,
        solution,
    })
}

// REML fixed-point refinement. The simplex localizes theta only to the
// square root of the criterion's evaluation noise; the EM-style update
//
//   sigma_f^2 <- lambda_f^2 (||u*_f||^2 + sigma_eps^2 tr_f) / q_f
//
// (tr_f the u-block trace of the inverse bordered system) has the REML
// stationary point as its fixed point and uses no criterion values, so
// iterating it pins theta to machine precision. Components at the zero
// boundary stay clamped; the result is only kept if it does not worsen
// the criterion.
fn ecme_polish(
    sys: &mut PenalizedSystem,
    y: &[f64],
    theta: Vec<f64>,
    f_start: f64,
) -> Vec<f64> {
    let start = theta.clone();
    match ecme_iterate(sys, y, theta) {
        Ok(polished) => {
            // keep the refinement only if it did not degrade the criterion
            match reml_parts(sys, y, &polished) {
                Ok(parts) if parts.criterion <= f_start + 1e-7 => polished,
                _ => start,
            }
        }
        Err(_) => start,
    }
}

fn ecme_iterate(
    sys: &mut PenalizedSystem,
    y: &[f64],
    mut theta: Vec<f64>,
) -> Result<Vec<f64>, FitError> {
    let df = (sys.n - sys.p1) as f64;
    let q_f: Vec<f64> = sys.factors.iter().map(|l| l.n_groups as f64).collect();
    for _ in 0..200 {
        let lambda = lambdas_from_log_sd(&theta);
        let solution = sys.solve(&lambda, None, y)?;
        let mut eta = vec![0.0; sys.n];
        sys.linear_predictor(&solution.coef, &solution.ustar, &lambda, &mut eta);
        let rss: f64 = y.iter().zip(&eta).map(|(yi, ei)| (yi - ei).powi(2)).sum();
        let pen: f64 = solution.ustar.iter().map(|u| u * u).sum();
        let sigma2_eps = (rss + pen) / df;
        if sigma2_eps < 1e-200 {
            // (near-)perfect fit: the update ratio is 0/0, leave theta alone
            return Err(FitError::Numerical {
                message: "degenerate residual variance in fixed-point refinement".to_string(),
            });
        }
        let norms = sys.ustar_block_norms(&solution.ustar);
        let traces = sys.u_inverse_block_traces(&solution);

        let mut max_move = 0.0f64;
        for f in 0..theta.len() {
            if theta[f] <= LOG_SD_LOWER + BOUNDARY_EPS {
                theta[f] = LOG_SD_LOWER;
                continue;
            }
            let lambda2_new =
                lambda[f] * lambda[f] * (norms[f] + sigma2_eps * traces[f]) / (q_f[f] * sigma2_eps);
            let new_theta = (0.5 * lambda2_new.ln()).clamp(LOG_SD_LOWER, 15.0);
            max_move = max_move.max((new_theta - theta[f]).abs());
            theta[f] = new_theta;
        }
        if max_move < 1e-13 {
            break;
        }
    }
    Ok(theta)
}

/// -2 x restricted log-likelihood with beta and the residual variance
/// profiled out. `theta` holds the log relative SDs, one per factor.
pub fn reml_criterion(
    theta: &[f64],
    y: &[f64],
    x: &FixedEffects,
    groups: &[GroupSpec],
) -> Result<f64, FitError> {
    if theta.len() != groups.len() {
        return Err(FitError::DimensionMismatch {
            what: "theta",
            expected: groups.len(),
            got: theta.len(),
        });
    }
    if y.len() != x.n_rows {
        return Err(FitError::DimensionMismatch {
            what: "outcome vector",
            expected: x.n_rows,
            got: y.len(),
        });
    }
    let mut sys = PenalizedSystem::new(x, groups)?;
    Ok(reml_parts(&mut sys, y, theta)?.criterion)
}

/// Fits the LMM by REML.
pub fn fit_lmm(
    y: &[f64],
    x: &FixedEffects,
    groups: &[GroupSpec],
    options: &LmmOptions,
) -> Result<LmmFit, FitError> {
    let n = y.len();
    if n != x.n_rows {
        return Err(FitError::DimensionMismatch {
            what: "outcome vector",
            expected: x.n_rows,
            got: n,
        });
    }
    let needed = x.p() + 1 + groups.len();
    if n <= needed {
        return Err(FitError::TooFewRows { n, needed });
    }
    check_full_rank(x)?;

    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 1e-24 * mean.mul_add(mean, 1.0) {
        return Ok(degenerate_constant_fit(y, x, groups, mean));
    }

    let mut sys = PenalizedSystem::new(x, groups)?;
    let n_factors = groups.len();

    let (theta_hat, n_iter, n_eval, converged) = match &options.fixed_log_sd {
        Some(fixed) => {
            if fixed.len() != n_factors {
                return Err(FitError::DimensionMismatch {
                    what: "fixed_log_sd",
                    expected: n_factors,
                    got: fixed.len(),
                });
            }
            (fixed.clone(), 0, 1, true)
        }
        None => {
            let mut last_err: Option<FitError> = None;
            let result = minimize(
                |theta| match reml_parts(&mut sys, y, theta) {
                    Ok(parts) => parts.criterion,
                    Err(e) => {
                        last_err = Some(e);
                        f64::INFINITY
                    }
                },
                &vec![0.0; n_factors],
                &OptimOptions {
                    max_iter: options.max_outer_iter,
                    tol_f: options.tol,
                    ..Default::default()
                },
            );
            if !result.f.is_finite() {
                return Err(last_err.unwrap_or(FitError::NotConverged {
                    what: "REML outer optimization",
                    n_iter: result.n_iter,
                    last_change: f64::NAN,
                }));
            }
            let theta = ecme_polish(&mut sys, y, result.x, result.f);
            (theta, result.n_iter, result.n_eval, result.converged)
        }
    };

    let parts = reml_parts(&mut sys, y, &theta_hat)?;
    let lambda = lambdas_from_log_sd(&theta_hat);
    let df = (n - sys.p1) as f64;
    let sigma2_eps = parts.r2 / df;

    let mut warnings = Vec::new();
    let mut variance_components = Vec::with_capacity(n_factors);
    for (f, layout) in sys.factors.iter().enumerate() {
        let boundary = theta_hat[f] <= LOG_SD_LOWER + BOUNDARY_EPS;
        let variance = if boundary {
            0.0
        } else {
            lambda[f] * lambda[f] * sigma2_eps
        };
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
    let se: Vec<f64> = (0..sys.p1)
        .map(|j| (sigma2_eps * s_inv[(j, j)]).sqrt())
        .collect();

    let mut eta = vec![0.0; n];
    sys.linear_predictor(&parts.solution.coef, &parts.solution.ustar, &lambda, &mut eta);
    let residuals: Vec<f64> = y.iter().zip(&eta).map(|(yi, ei)| yi - ei).collect();

    let modes = sys.conditional_modes(&parts.solution.ustar, &lambda);
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
            what: "REML outer optimization",
            n_iter,
            last_change: parts.criterion,
        });
    }

    Ok(LmmFit {
        alpha: parts.solution.coef[0],
        alpha_se: se[0],
        beta: parts.solution.coef[1..].to_vec(),
        beta_names: x.names.clone(),
        beta_se: se[1..].to_vec(),
        sigma2_eps,
        sigma_eps_boundary: false,
        variance_components,
        conditional_modes,
        restricted_log_likelihood: -0.5 * parts.criterion,
        criterion: parts.criterion,
        converged,
        n_iter,
        n_eval,
        n_obs: n,
        residuals,
        fitted: eta,
        warnings,
    })
}

// All-equal outcome: variance estimates collapse to the zero boundary.
fn degenerate_constant_fit(
    y: &[f64],
    x: &FixedEffects,
    groups: &[GroupSpec],
    mean: f64,
) -> LmmFit {
    LmmFit {
        alpha: mean,
        alpha_se: 0.0,
        beta: vec![0.0; x.p()],
        beta_names: x.names.clone(),
        beta_se: vec![0.0; x.p()],
        sigma2_eps: 0.0,
        sigma_eps_boundary: true,
        variance_components: groups
            .iter()
            .map(|g| VarianceComponent {
                factor: g.name.clone(),
                variance: 0.0,
                sd: 0.0,
                boundary: true,
            })
            .collect(),
        conditional_modes: groups
            .iter()
            .map(|g| RandomEffectBlock {
                factor: g.name.clone(),
                modes: vec![0.0; g.n_groups],
            })
            .collect(),
        restricted_log_likelihood: f64::INFINITY,
        criterion: f64::NEG_INFINITY,
        converged: true,
        n_iter: 0,
        n_eval: 0,
        n_obs: y.len(),
        residuals: vec![0.0; y.len()],
        fitted: vec![mean; y.len()],
        warnings: vec!["outcome is constant; all variances at the zero boundary".to_string()],
    }
}

/// Residuals y - alpha - X beta - Z u from a converged fit.
pub fn residuals(
    fit: &LmmFit,
    y: &[f64],
    x: &FixedEffects,
    groups: &[GroupSpec],
) -> Result<Vec<f64>, FitError> {
    if !fit.converged {
        return Err(FitError::NotConverged {
            what: "fit passed to residuals",
            n_iter: fit.n_iter,
            last_change: f64::NAN,
        });
    }
    if y.len() != x.n_rows {
        return Err(FitError::DimensionMismatch {
            what: "outcome vector",
            expected: x.n_rows,
            got: y.len(),
        });
    }
    let mut out = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let mut eta = fit.alpha;
        for j in 0..x.p() {
            eta += x.values[i * x.p() + j] * fit.beta[j];
        }
        for (g, block) in groups.iter().zip(&fit.conditional_modes) {
            eta += block.modes[g.indices[i] as usize];
        }
        out.push(y[i] - eta);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one_way(n_groups: usize, per_group: usize) -> GroupSpec {
        GroupSpec {
            name: "group".into(),
            n_groups,
            levels: (0..n_groups).map(|g| format!("g{g}")).collect(),
            indices: (0..n_groups as u32)
                .flat_map(|g| std::iter::repeat_n(g, per_group))
                .collect(),
        }
    }

    fn simulate_one_way(seed: u64, k: usize, m: usize, mu: f64, su: f64, se: f64) -> Vec<f64> {
        let mut rng = crate::rng::CounterRng::from_stream(seed, &[41]);
        let effects: Vec<f64> = (0..k).map(|_| rng.normal() * su).collect();
        (0..k)
            .flat_map(|g| {
                let mut r = crate::rng::CounterRng::from_stream(seed, &[42, g as u64]);
                (0..m)
                    .map(|_| mu + effects[g] + r.normal() * se)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Closed-form balanced one-way REML: sigma_u^2 = (MSB - MSW) / m.
    fn balanced_oracle(y: &[f64], k: usize, m: usize) -> (f64, f64) {
        let grand = y.iter().sum::<f64>() / y.len() as f64;
        let group_means: Vec<f64> = (0..k)
            .map(|g| y[g * m..(g + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        let msb =
            m as f64 * group_means.iter().map(|gm| (gm - grand).powi(2)).sum::<f64>() / (k - 1) as f64;
        let msw = (0..k)
            .map(|g| {
                y[g * m..(g + 1) * m]
                    .iter()
                    .map(|v| (v - group_means[g]).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (k * (m - 1)) as f64;
        ((msb - msw) / m as f64, msw)
    }

    #[test]
    fn balanced_one_way_matches_closed_form() {
        let (k, m) = (4, 5);
        let y = simulate_one_way(3, k, m, 3.0, 2.0, 0.5);
        let (want_su2, want_se2) = balanced_oracle(&y, k, m);
        assert!(want_su2 > 0.0, "oracle requires an interior optimum");

        let x = FixedEffects::intercept_only(k * m);
        let fit = fit_lmm(&y, &x, &[one_way(k, m)], &LmmOptions::default()).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.variance_components[0].variance, want_su2, epsilon = 1e-6);
        assert_relative_eq!(fit.sigma2_eps, want_se2, epsilon = 1e-6);
        // alpha is the grand mean in the balanced case
        assert_relative_eq!(fit.alpha, y.iter().sum::<f64>() / y.len() as f64, epsilon = 1e-8);
    }

    #[test]
    fn constant_outcome_degenerates_cleanly() {
        let y = vec![7.5; 20];
        let x = FixedEffects::intercept_only(20);
        let fit = fit_lmm(&y, &x, &[one_way(4, 5)], &LmmOptions::default()).unwrap();
        assert_eq!(fit.alpha, 7.5);
        assert_eq!(fit.sigma2_eps, 0.0);
        assert!(fit.sigma_eps_boundary);
        assert!(fit.variance_components[0].boundary);
    }

    #[test]
    fn criterion_interior_optimum_on_grid() {
        let (k, m) = (4, 5);
        let y = simulate_one_way(11, k, m, 1.0, 2.0, 0.5);
        let (want_su2, want_se2) = balanced_oracle(&y, k, m);
        let theta_opt = 0.5 * (want_su2 / want_se2).ln();
        let x = FixedEffects::intercept_only(k * m);
        let groups = [one_way(k, m)];
        let at = |t: f64| reml_criterion(&[t], &y, &x, &groups).unwrap();
        let c0 = at(theta_opt);
        for dt in [-0.1, 0.1] {
            assert!(at(theta_opt + dt) > c0, "criterion not minimal at closed form");
        }
    }

    #[test]
    fn criterion_matches_ols_at_zero_variance_limit() {
        let n = 24;
        let mut rng = crate::rng::CounterRng::from_stream(9, &[51]);
        let xcol: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let y: Vec<f64> = xcol.iter().map(|x| 0.5 + 0.8 * x + 0.3 * rng.normal()).collect();
        let x = FixedEffects::new(vec!["x".into()], n, xcol.clone()).unwrap();
        let groups = [one_way(4, 6)];

        // OLS oracle pieces
        let p1 = 2;
        let mut xtx = [[0.0f64; 2]; 2];
        let mut xty = [0.0f64; 2];
        for i in 0..n {
            let row = [1.0, xcol[i]];
            for a in 0..2 {
                xty[a] += row[a] * y[i];
                for b in 0..2 {
                    xtx[a][b] += row[a] * row[b];
                }
            }
        }
        let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
        let beta0 = (xty[0] * xtx[1][1] - xty[1] * xtx[0][1]) / det;
        let beta1 = (xty[1] * xtx[0][0] - xty[0] * xtx[1][0]) / det;
        let rss: f64 = (0..n)
            .map(|i| (y[i] - beta0 - beta1 * xcol[i]).powi(2))
            .sum();
        let df = (n - p1) as f64;
        let want = det.ln() + df * (1.0 + (2.0 * std::f64::consts::PI * rss / df).ln());

        let got = reml_criterion(&[f64::NEG_INFINITY], &y, &x, &groups).unwrap();
        assert_relative_eq!(got, want, max_relative = 1e-10);
    }

    #[test]
    fn criterion_invariant_to_row_order() {
        let (k, m) = (3, 4);
        let y = simulate_one_way(5, k, m, 0.0, 1.0, 0.7);
        let x = FixedEffects::intercept_only(k * m);
        let g = one_way(k, m);
        let base = reml_criterion(&[0.3], &y, &x, &[g.clone()]).unwrap();

        // reverse all rows
        let y_rev: Vec<f64> = y.iter().rev().copied().collect();
        let g_rev = GroupSpec {
            indices: g.indices.iter().rev().copied().collect(),
            ..g
        };
        let rev = reml_criterion(&[0.3], &y_rev, &x, &[g_rev]).unwrap();
        assert_relative_eq!(base, rev, max_relative = 1e-12);
    }

    #[test]
    fn residuals_match_direct_recomputation() {
        let (k, m) = (4, 6);
        let y = simulate_one_way(21, k, m, -1.0, 1.5, 0.4);
        let x = FixedEffects::intercept_only(k * m);
        let groups = [one_way(k, m)];
        let fit = fit_lmm(&y, &x, &groups, &LmmOptions::default()).unwrap();
        let r = residuals(&fit, &y, &x, &groups).unwrap();
        for (a, b) in r.iter().zip(&fit.residuals) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
        // residual mean ~ 0 at convergence
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        assert!(mean.abs() < 1e-8, "residual mean {mean}");
    }

    #[test]
    fn perfect_fit_data_has_near_zero_residuals() {
        // y exactly linear in x: residuals collapse
        let n = 24;
        let xcol: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let y: Vec<f64> = xcol.iter().map(|x| 2.0 + 0.5 * x).collect();
        let x = FixedEffects::new(vec!["x".into()], n, xcol).unwrap();
        let fit = fit_lmm(&y, &x, &[one_way(4, 6)], &LmmOptions::default()).unwrap();
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-6));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let n = 20;
        let mut rng = crate::rng::CounterRng::from_stream(6, &[52]);
        let col: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mut values = Vec::new();
        for &v in &col {
            values.push(v);
            values.push(-v);
        }
        let x = FixedEffects::new(vec!["c1".into(), "c2".into()], n, values).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let err = fit_lmm(&y, &x, &[one_way(4, 5)], &LmmOptions::default()).unwrap_err();
        assert!(matches!(err, FitError::RankDeficient { .. }));
    }

    #[test]
    fn refit_from_optimum_does_not_improve() {
        let (k, m) = (4, 5);
        let y = simulate_one_way(13, k, m, 2.0, 1.0, 0.6);
        let x = FixedEffects::intercept_only(k * m);
        let groups = [one_way(k, m)];
        let fit = fit_lmm(&y, &x, &groups, &LmmOptions::default()).unwrap();
        // evaluate the criterion on a fine grid around the fitted optimum
        let sd_ratio = (fit.variance_components[0].variance / fit.sigma2_eps).sqrt();
        let theta = sd_ratio.ln();
        let c_opt = reml_criterion(&[theta], &y, &x, &groups).unwrap();
        assert!(c_opt <= fit.criterion + 1e-9);
    }
}
