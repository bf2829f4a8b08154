//! Estimator oracles: equivariances, reductions to closed-form special
//! cases and the Monte-Carlo checks that use the simulator as ground
//! truth.

use chal_lens::design::GroupSpec;
use chal_lens::glm::{fit_glm_logistic, GlmOptions};
use chal_lens::glmm::{fit_glmm_binomial, laplace_deviance, GlmmOptions};
use chal_lens::lmm::{fit_lmm, LmmOptions};
use chal_lens::mme::FixedEffects;
use chal_lens::rng::CounterRng;
use chal_lens::simulate::{coverage_study, CoverageModel, OutcomeFamily, SimConfig};
use chal_lens::stats::sigmoid;

fn one_way(name: &str, n_groups: usize, per_group: usize) -> GroupSpec {
    GroupSpec {
        name: name.into(),
        n_groups,
        levels: (0..n_groups).map(|g| format!("g{g}")).collect(),
        indices: (0..n_groups as u32)
            .flat_map(|g| std::iter::repeat_n(g, per_group))
            .collect(),
    }
}

fn lmm_fixture(seed: u64, n: usize) -> (Vec<f64>, FixedEffects, Vec<GroupSpec>) {
    let mut rng = CounterRng::from_stream(seed, &[10]);
    let k = 6;
    let groups = vec![one_way("cluster", k, n / k)];
    let effects: Vec<f64> = (0..k).map(|_| rng.normal() * 0.8).collect();
    let xcol: Vec<f64> = (0..n).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            1.5 + 0.6 * xcol[i] + effects[groups[0].indices[i] as usize] + 0.5 * rng.normal()
        })
        .collect();
    let x = FixedEffects::new(vec!["flag".into()], n, xcol).unwrap();
    (y, x, groups)
}

#[test]
fn lmm_location_equivariance() {
    let (y, x, groups) = lmm_fixture(1, 60);
    let opts = LmmOptions::default();
    let base = fit_lmm(&y, &x, &groups, &opts).unwrap();
    let shifted: Vec<f64> = y.iter().map(|v| v + 13.25).collect();
    let shift_fit = fit_lmm(&shifted, &x, &groups, &opts).unwrap();
    assert!((shift_fit.alpha - base.alpha - 13.25).abs() < 1e-8);
    assert!((shift_fit.beta[0] - base.beta[0]).abs() < 1e-8);
    assert!((shift_fit.sigma2_eps - base.sigma2_eps).abs() < 1e-8);
    for (a, b) in shift_fit
        .variance_components
        .iter()
        .zip(&base.variance_components)
    {
        assert!((a.variance - b.variance).abs() < 1e-8);
    }
}

#[test]
fn lmm_scale_equivariance() {
    let (y, x, groups) = lmm_fixture(2, 60);
    let opts = LmmOptions::default();
    let base = fit_lmm(&y, &x, &groups, &opts).unwrap();
    let c = 3.5;
    let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
    let scale_fit = fit_lmm(&scaled, &x, &groups, &opts).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    assert!(rel(scale_fit.alpha, c * base.alpha) < 1e-6);
    assert!(rel(scale_fit.beta[0], c * base.beta[0]) < 1e-6);
    assert!(rel(scale_fit.sigma2_eps, c * c * base.sigma2_eps) < 1e-6);
    assert!(
        rel(
            scale_fit.variance_components[0].variance,
            c * c * base.variance_components[0].variance
        ) < 1e-6
    );
}

#[test]
fn lmm_zero_variance_equals_ols() {
    let (y, x, groups) = lmm_fixture(3, 48);
    let fit = fit_lmm(
        &y,
        &x,
        &groups,
        &LmmOptions {
            fixed_log_sd: Some(vec![f64::NEG_INFINITY]),
            ..Default::default()
        },
    )
    .unwrap();

    // dense OLS oracle
    let n = y.len();
    let mut xtx = [[0.0f64; 2]; 2];
    let mut xty = [0.0f64; 2];
    for i in 0..n {
        let row = [1.0, x.values[i]];
        for a in 0..2 {
            xty[a] += row[a] * y[i];
            for b in 0..2 {
                xtx[a][b] += row[a] * row[b];
            }
        }
    }
    let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
    let alpha_ols = (xty[0] * xtx[1][1] - xty[1] * xtx[0][1]) / det;
    let beta_ols = (xty[1] * xtx[0][0] - xty[0] * xtx[1][0]) / det;
    assert!((fit.alpha - alpha_ols).abs() < 1e-8, "{} vs {alpha_ols}", fit.alpha);
    assert!((fit.beta[0] - beta_ols).abs() < 1e-8);
}

#[test]
fn glmm_binomial_aggregation_invariance() {
    // splitting a row into parts with identical covariates and
    // groups must not change the fit
    let mut rng = CounterRng::from_stream(5, &[11]);
    let n = 30;
    let groups = vec![one_way("cluster", 5, 6)];
    let effects: Vec<f64> = (0..5).map(|_| rng.normal() * 0.5).collect();
    let xcol: Vec<f64> = (0..n).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
    let trials: Vec<u64> = (0..n).map(|_| 200 + rng.uniform_int(0, 300)).collect();
    let successes: Vec<u64> = (0..n)
        .map(|i| {
            let p = sigmoid(0.4 - 0.6 * xcol[i] + effects[groups[0].indices[i] as usize]);
            let mut s = 0;
            for _ in 0..trials[i] {
                if rng.uniform() < p {
                    s += 1;
                }
            }
            s
        })
        .collect();
    let x = FixedEffects::new(vec!["flag".into()], n, xcol.clone()).unwrap();
    let opts = GlmmOptions::default();
    let base = fit_glmm_binomial(&successes, &trials, &x, &groups, &opts).unwrap();

    // split the first row into a 1/3 + 2/3 partition
    let k = successes[0] / 3;
    let t1 = trials[0] / 3;
    let mut successes2 = vec![k, successes[0] - k];
    successes2.extend_from_slice(&successes[1..]);
    let mut trials2 = vec![t1, trials[0] - t1];
    trials2.extend_from_slice(&trials[1..]);
    let mut xcol2 = vec![xcol[0], xcol[0]];
    xcol2.extend_from_slice(&xcol[1..]);
    let mut idx2 = vec![groups[0].indices[0], groups[0].indices[0]];
    idx2.extend_from_slice(&groups[0].indices[1..]);
    let groups2 = vec![GroupSpec {
        indices: idx2,
        ..groups[0].clone()
    }];
    let x2 = FixedEffects::new(vec!["flag".into()], n + 1, xcol2).unwrap();
    let split = fit_glmm_binomial(&successes2, &trials2, &x2, &groups2, &opts).unwrap();

    assert!((base.alpha - split.alpha).abs() < 1e-8, "{} vs {}", base.alpha, split.alpha);
    assert!((base.beta[0] - split.beta[0]).abs() < 1e-8);
    // variance components sit in a region where a 1e-8 shift moves the
    // deviance by ~1e-14, below f64 evaluation noise; 1e-7 is the
    // reproducibility the objective itself can express
    assert!(
        (base.variance_components[0].variance - split.variance_components[0].variance).abs()
            < 1e-7
    );
}

#[test]
fn glmm_link_monotonicity() {
    // raising a coefficient raises fitted probabilities on rows with the flag
    let eta_base: f64 = 0.3;
    for beta in [-0.5, 0.0, 0.4, 1.2] {
        let lo = sigmoid(eta_base + beta);
        let hi = sigmoid(eta_base + beta + 0.2);
        assert!(hi > lo);
    }
}

#[test]
fn glmm_zero_variance_matches_glm_on_seeded_fixtures() {
    for seed in 0..20u64 {
        let mut rng = CounterRng::from_stream(seed, &[12]);
        let n = 25;
        let xcol: Vec<f64> = (0..n).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
        let trials: Vec<u64> = (0..n).map(|_| 50 + rng.uniform_int(0, 150)).collect();
        let successes: Vec<u64> = (0..n)
            .map(|i| {
                let p = sigmoid(0.3 + 0.7 * xcol[i]);
                let mut s = 0;
                for _ in 0..trials[i] {
                    if rng.uniform() < p {
                        s += 1;
                    }
                }
                s
            })
            .collect();
        let x = FixedEffects::new(vec!["flag".into()], n, xcol).unwrap();
        let glm = fit_glm_logistic(&successes, &trials, &x, &GlmOptions::default()).unwrap();
        let glmm = fit_glmm_binomial(
            &successes,
            &trials,
            &x,
            &[one_way("cluster", 5, 5)],
            &GlmmOptions {
                fixed_log_sd: Some(vec![f64::NEG_INFINITY]),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(
            (glm.alpha - glmm.alpha).abs() < 1e-6,
            "seed {seed}: {} vs {}",
            glm.alpha,
            glmm.alpha
        );
        assert!((glm.beta[0] - glmm.beta[0]).abs() < 1e-6, "seed {seed}");
    }
}

#[test]
fn laplace_deviance_zero_variance_limit_is_glm_loglik() {
    let successes = vec![10u64, 40, 25, 60, 35, 20];
    let trials = vec![100u64; 6];
    let x = FixedEffects::intercept_only(6);
    let glm = fit_glm_logistic(&successes, &trials, &x, &GlmOptions::default()).unwrap();
    let dev = laplace_deviance(
        &[f64::NEG_INFINITY],
        &successes,
        &trials,
        &x,
        &[one_way("cluster", 2, 3)],
        &GlmmOptions::default(),
    )
    .unwrap();
    assert!(
        (dev - glm.minus_two_log_lik).abs() < 1e-6,
        "{dev} vs {}",
        glm.minus_two_log_lik
    );
}

#[test]
fn lmm_wald_coverage_monte_carlo() {
    // correctly specified gaussian model, ~2000 rows per replication:
    // the 95% Wald CIs cover each true coefficient in 90-99% of runs
    let config = SimConfig {
        family: OutcomeFamily::Gaussian { sigma2_eps: 0.25 },
        ..SimConfig::desk_scale(2024)
    };
    let report = coverage_study(&config, 100, CoverageModel::Lmm, 1).unwrap();
    assert_eq!(report.n_failed, 0);
    for c in &report.coefficients {
        assert!(
            c.coverage >= 0.90 && c.coverage <= 0.99,
            "{}: coverage {}",
            c.name,
            c.coverage
        );
    }
    // the planted effect is found essentially always
    let planted = report
        .coefficients
        .iter()
        .find(|c| c.name == "in_covered_by_instrument")
        .unwrap();
    assert!(planted.sign_recovery.unwrap() >= 0.95);
}

#[test]
fn lmm_balanced_variance_component_mean_close_to_truth() {
    // balanced one-way: mean REML variance across replications near truth
    let (k, m) = (8, 10);
    let (su2, se2): (f64, f64) = (1.44, 0.25);
    let mut sum = 0.0;
    let reps = 100;
    for rep in 0..reps {
        let mut rng = CounterRng::from_stream(rep, &[13]);
        let effects: Vec<f64> = (0..k).map(|_| rng.normal() * su2.sqrt()).collect();
        let y: Vec<f64> = (0..k * m)
            .map(|i| 2.0 + effects[i / m] + rng.normal() * se2.sqrt())
            .collect();
        let x = FixedEffects::intercept_only(k * m);
        let fit = fit_lmm(&y, &x, &[one_way("g", k, m)], &LmmOptions::default()).unwrap();
        sum += fit.variance_components[0].variance;
    }
    let mean = sum / reps as f64;
    assert!(
        (mean - su2).abs() / su2 < 0.05,
        "mean sigma_u^2 {mean} vs truth {su2}"
    );
}
