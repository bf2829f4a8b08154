//! Seeded synthetic-challenge generator and Monte-Carlo coverage studies.
//!
//! The generator draws a hierarchical dataset (patients, images,
//! instrument instances, annotation flags) and outcomes from the exact
//! generative models the fitters assume, with all ground-truth
//! parameters echoed back. Every random quantity has its own counter
//! stream addressed by entity coordinates, so enlarging the configuration
//! leaves existing draws untouched and replications are reproducible on
//! any platform.
//!
//! For the binomial family the confusion counts are built symmetric
//! (fp = fn), which plants the same model in the recall and the
//! precision perspective; mask geometry is out of scope, counts are
//! drawn directly.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    characteristic_names, BackgroundFlags, ChallengeDataset, DataError, GlobalFlags, ImageRecord,
    InstanceOutcome, InstanceRecord, InstrumentFlags, PatientRecord,
};
use crate::design::{
    build_design, build_structure_design, drop_column_policy, DesignError, EffectSpec, Outcome,
    Perspective,
};
use crate::glmm::{fit_glmm_binomial, GlmmOptions};
use crate::lmm::{fit_lmm, LmmOptions, RandomEffectBlock};
use crate::mme::{FitError, FixedEffects};
use crate::report::{wald_test, CI_95_Z};
use crate::rng::{derive_seed, CounterRng};
use crate::stats::sigmoid;

// stream kinds
const STREAM_STRUCTURE: u64 = 1;
const STREAM_IMAGE_FLAGS: u64 = 2;
const STREAM_INSTANCE_FLAGS: u64 = 3;
const STREAM_RANDOM_EFFECT: u64 = 4;
const STREAM_OUTCOME: u64 = 5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OutcomeFamily {
    Gaussian { sigma2_eps: f64 },
    Binomial,
}

/// Ground-truth parameters of a simulated challenge.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_algorithms: usize,
    pub n_patients: usize,
    pub images_per_patient: usize,
    /// Weight of drawing k+1 instances at index k.
    pub instance_count_weights: Vec<f64>,
    pub true_alpha: f64,
    /// One coefficient per characteristic, canonical order.
    pub true_beta: Vec<f64>,
    /// Random-intercept variances for [algorithm, patient, image, instance].
    pub true_variances: [f64; 4],
    /// Marginal flag probabilities, canonical order.
    pub prevalence: Vec<f64>,
    /// Inclusive range of binomial trial counts (pixels per instance).
    pub trials_range: (u64, u64),
    pub family: OutcomeFamily,
}

impl SimConfig {
    /// Desk-scale configuration mirroring the paper-shaped hierarchy at
    /// roughly a tenth of the size: 5 algorithms, 10 patients, ~200
    /// images with 1-3 instruments each, one strong planted negative
    /// effect on `in_covered_by_instrument`.
    pub fn desk_scale(seed: u64) -> SimConfig {
        let mut beta = vec![0.0; 17];
        beta[2] = 0.3; // in_tissue
        beta[5] = -0.7; // in_covered_by_instrument
        beta[10] = -0.25; // bg_smoke
        beta[15] = -0.4; // img_too_dark
        SimConfig {
            seed,
            n_algorithms: 5,
            n_patients: 10,
            images_per_patient: 20,
            instance_count_weights: vec![0.55, 0.30, 0.15],
            true_alpha: 1.0,
            true_beta: beta,
            true_variances: [0.09, 0.09, 0.09, 0.09],
            prevalence: vec![0.25; 17],
            trials_range: (500, 20_000),
            family: OutcomeFamily::Binomial,
        }
    }

    pub fn with_seed(&self, seed: u64) -> SimConfig {
        SimConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_algorithms == 0 || self.n_patients == 0 || self.images_per_patient == 0 {
            return Err(SimError::Config("all counts must be >= 1".into()));
        }
        if self.true_beta.len() != 17 {
            return Err(SimError::Config(format!(
                "true_beta must have 17 entries, got {}",
                self.true_beta.len()
            )));
        }
        if self.prevalence.len() != 17 {
            return Err(SimError::Config(format!(
                "prevalence must have 17 entries, got {}",
                self.prevalence.len()
            )));
        }
        if self.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SimError::Config("prevalences must be in [0, 1]".into()));
        }
        if self.true_variances.iter().any(|v| *v < 0.0) {
            return Err(SimError::Config("variances must be >= 0".into()));
        }
        if self.instance_count_weights.is_empty()
            || self.instance_count_weights.iter().any(|w| *w < 0.0)
            || self.instance_count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(SimError::Config(
                "instance_count_weights must be non-negative with positive sum".into(),
            ));
        }
        if self.trials_range.0 == 0 || self.trials_range.0 > self.trials_range.1 {
            return Err(SimError::Config(format!(
                "invalid trials range [{}, {}]",
                self.trials_range.0, self.trials_range.1
            )));
        }
        if let OutcomeFamily::Gaussian { sigma2_eps } = self.family {
            if sigma2_eps < 0.0 {
                return Err(SimError::Config("sigma2_eps must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Everything needed to score an estimator against the truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub beta_names: Vec<String>,
    /// Realized random effects per factor, in factor order.
    pub random_effects: Vec<RandomEffectBlock>,
    /// Continuous outcomes in design row order (gaussian family only).
    pub gaussian_y: Option<Vec<f64>>,
}

/// Draws a synthetic challenge dataset with known ground truth.
///
/// Flags are independent at the configured prevalences, with
/// covered-by-instrument forced false on single-instance images; random
/// effects are zero-mean normal with the configured variances; outcomes
/// follow the configured family. Identical configs and seeds give
/// bit-identical datasets.
pub fn simulate_dataset(config: &SimConfig) -> Result<(ChallengeDataset, GroundTruth), SimError> {
    config.validate()?;
    let seed = config.seed;
    let sd: Vec<f64> = config.true_variances.iter().map(|v| v.sqrt()).collect();

    let algorithms: Vec<String> = (1..=config.n_algorithms)
        .map(|k| format!("alg{k:02}"))
        .collect();
    let patients: Vec<PatientRecord> = (1..=config.n_patients)
        .map(|p| PatientRecord {
            patient_id: format!("p{p:03}"),
        })
        .collect();

    let u_alg: Vec<f64> = (0..config.n_algorithms)
        .map(|k| sd[0] * CounterRng::from_stream(seed, &[STREAM_RANDOM_EFFECT, 0, k as u64]).normal())
        .collect();
    let u_pat: Vec<f64> = (0..config.n_patients)
        .map(|p| sd[1] * CounterRng::from_stream(seed, &[STREAM_RANDOM_EFFECT, 1, p as u64]).normal())
        .collect();

    let mut images = Vec::new();
    let mut outcomes = Vec::new();
    let mut u_img_all = Vec::new();
    let mut u_inst_all = Vec::new();
    let mut gaussian_y = Vec::new();

    for p in 0..config.n_patients {
        for i in 0..config.images_per_patient {
            let image_id = format!("p{:03}_img{:04}", p + 1, i + 1);
            let mut struct_rng =
                CounterRng::from_stream(seed, &[STREAM_STRUCTURE, p as u64, i as u64]);
            let n_instances = struct_rng.weighted_index(&config.instance_count_weights) + 1;

            let mut img_rng =
                CounterRng::from_stream(seed, &[STREAM_IMAGE_FLAGS, p as u64, i as u64]);
            // background flags use prevalence[9..14], global flags [14..17]
            let bg: Vec<bool> = (9..14).map(|c| img_rng.uniform() < config.prevalence[c]).collect();
            let gl: Vec<bool> = (14..17).map(|c| img_rng.uniform() < config.prevalence[c]).collect();

            let u_img = sd[2]
                * CounterRng::from_stream(seed, &[STREAM_RANDOM_EFFECT, 2, p as u64, i as u64])
                    .normal();
            u_img_all.push(u_img);

            let mut instances = Vec::new();
            for j in 0..n_instances {
                let mut inst_rng = CounterRng::from_stream(
                    seed,
                    &[STREAM_INSTANCE_FLAGS, p as u64, i as u64, j as u64],
                );
                let mut flag_vals = [false; 9];
                for (c, slot) in flag_vals.iter_mut().enumerate() {
                    *slot = inst_rng.uniform() < config.prevalence[c];
                }
                // covered-by-instrument requires at least two instances
                if n_instances < 2 {
                    flag_vals[5] = false;
                }
                let flags = InstrumentFlags {
                    blood: flag_vals[0],
                    smoke: flag_vals[1],
                    tissue: flag_vals[2],
                    motion: flag_vals[3],
                    reflections: flag_vals[4],
                    covered_by_instrument: flag_vals[5],
                    other_object: flag_vals[6],
                    too_bright: flag_vals[7],
                    too_dark: flag_vals[8],
                };
                let u_inst = sd[3]
                    * CounterRng::from_stream(
                        seed,
                        &[STREAM_RANDOM_EFFECT, 3, p as u64, i as u64, j as u64],
                    )
                    .normal();
                u_inst_all.push(u_inst);

                // fixed-effect contribution of this instance's 17 flags
                let mut xbeta = 0.0;
                for (c, &on) in flag_vals.iter().enumerate() {
                    if on {
                        xbeta += config.true_beta[c];
                    }
                }
                for (c, &on) in bg.iter().enumerate() {
                    if on {
                        xbeta += config.true_beta[9 + c];
                    }
                }
                for (c, &on) in gl.iter().enumerate() {
                    if on {
                        xbeta += config.true_beta[14 + c];
                    }
                }

                for (k, algorithm_id) in algorithms.iter().enumerate() {
                    let eta =
                        config.true_alpha + xbeta + u_alg[k] + u_pat[p] + u_img + u_inst;
                    let mut out_rng = CounterRng::from_stream(
                        seed,
                        &[STREAM_OUTCOME, p as u64, i as u64, j as u64, k as u64],
                    );
                    match config.family {
                        OutcomeFamily::Binomial => {
                            let trials =
                                out_rng.uniform_int(config.trials_range.0, config.trials_range.1);
                            let pi = sigmoid(eta);
                            let successes = Binomial::new(trials, pi)
                                .expect("valid binomial parameters")
                                .sample(&mut out_rng);
                            outcomes.push(InstanceOutcome {
                                image_id: image_id.clone(),
                                instance_id: (j + 1) as u16,
                                algorithm_id: algorithm_id.clone(),
                                tp: successes,
                                fp: trials - successes,
                                fn_: trials - successes,
                                tn: None,
                            });
                        }
                        OutcomeFamily::Gaussian { sigma2_eps } => {
                            gaussian_y.push(eta + sigma2_eps.sqrt() * out_rng.normal());
                        }
                    }
                }
                instances.push(InstanceRecord {
                    instance_id: (j + 1) as u16,
                    flags,
                });
            }

            images.push(ImageRecord {
                image_id,
                patient_id: format!("p{:03}", p + 1),
                global_flags: GlobalFlags {
                    too_bright: gl[0],
                    too_dark: gl[1],
                    dirty_lens: gl[2],
                },
                background_flags: BackgroundFlags {
                    blood: bg[0],
                    smoke: bg[1],
                    motion: bg[2],
                    reflections: bg[3],
                    other_object: bg[4],
                },
                instances,
            });
        }
    }

    let dataset = ChallengeDataset::new(patients, algorithms, images, outcomes)?;
    let truth = GroundTruth {
        config: config.clone(),
        beta_names: characteristic_names(),
        random_effects: vec![
            RandomEffectBlock {
                factor: "algorithm".into(),
                modes: u_alg,
            },
            RandomEffectBlock {
                factor: "patient".into(),
                modes: u_pat,
            },
            RandomEffectBlock {
                factor: "image".into(),
                modes: u_img_all,
            },
            RandomEffectBlock {
                factor: "instance".into(),
                modes: u_inst_all,
            },
        ],
        gaussian_y: match config.family {
            OutcomeFamily::Gaussian { .. } => Some(gaussian_y),
            OutcomeFamily::Binomial => None,
        },
    };
    Ok((dataset, truth))
}

/// Which model a coverage study exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageModel {
    Lmm,
    Glmm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefCoverage {
    pub name: String,
    pub truth: f64,
    /// Replications in which this coefficient was estimated.
    pub n_used: usize,
    /// Fraction of replications whose 95% CI covers the truth.
    pub coverage: f64,
    pub mean_bias: f64,
    /// Fraction of replications with p <= 0.05.
    pub detection_rate: f64,
    /// Fraction with p <= 0.05 and the correct sign (null truths: none).
    pub sign_recovery: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub model: CoverageModel,
    pub n_replications: usize,
    pub n_failed: usize,
    pub coefficients: Vec<CoefCoverage>,
}

struct RepEstimates {
    names: Vec<String>,
    beta: Vec<f64>,
    se: Vec<f64>,
}

fn run_replication(
    config: &SimConfig,
    model: CoverageModel,
    rep: u64,
) -> Result<RepEstimates, SimError> {
    let rep_config = config.with_seed(derive_seed(config.seed, rep));
    let (dataset, truth) = simulate_dataset(&rep_config)?;
    let spec = EffectSpec::default();
    match model {
        CoverageModel::Glmm => {
            let design = build_design(&dataset, Perspective::Recall, &spec)?;
            let (design, _dropped) = drop_column_policy(&design);
            let (successes, trials) = match &design.outcome {
                Outcome::Binomial { successes, trials } => (successes.clone(), trials.clone()),
                _ => unreachable!("build_design yields binomial outcomes"),
            };
            let x = FixedEffects::from_design(&design);
            let fit = fit_glmm_binomial(
                &successes,
                &trials,
                &x,
                &design.groups,
                &GlmmOptions::default(),
            )?;
            Ok(RepEstimates {
                names: fit.beta_names,
                beta: fit.beta,
                se: fit.beta_se,
            })
        }
        CoverageModel::Lmm => {
            let y = truth
                .gaussian_y
                .as_ref()
                .ok_or_else(|| SimError::Config("LMM coverage needs the gaussian family".into()))?
                .clone();
            let design = build_structure_design(&dataset, &spec)?;
            let (design, _dropped) = drop_column_policy(&design);
            let x = FixedEffects::from_design(&design);
            let fit = fit_lmm(&y, &x, &design.groups, &LmmOptions::default())?;
            Ok(RepEstimates {
                names: fit.beta_names,
                beta: fit.beta,
                se: fit.beta_se,
            })
        }
    }
}

/// Monte-Carlo study of CI coverage, bias and sign recovery.
///
/// Replication r uses the sub-seed derived from (config.seed, r), so
/// studies are reproducible and independent of `jobs`. Fit failures are
/// counted, not fatal.
pub fn coverage_study(
    config: &SimConfig,
    n_replications: usize,
    model: CoverageModel,
    jobs: usize,
) -> Result<CoverageReport, SimError> {
    config.validate()?;
    if n_replications < 10 {
        return Err(SimError::Config(
            "coverage studies need at least 10 replications".into(),
        ));
    }
    match (model, config.family) {
        (CoverageModel::Glmm, OutcomeFamily::Binomial) => {}
        (CoverageModel::Lmm, OutcomeFamily::Gaussian { .. }) => {}
        (m, f) => {
            return Err(SimError::Config(format!(
                "model {m:?} is incompatible with outcome family {f:?}"
            )))
        }
    }

    let jobs = jobs.max(1);
    let results: Vec<Option<RepEstimates>> = if jobs == 1 {
        (0..n_replications)
            .map(|r| run_replication(config, model, r as u64).ok())
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<RepEstimates>>> =
            (0..n_replications).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let r = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if r >= n_replications {
                        break;
                    }
                    let est = run_replication(config, model, r as u64).ok();
                    *slots[r].lock().expect("no poisoned replication slot") = est;
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("no poisoned replication slot"))
            .collect()
    };

    let n_failed = results.iter().filter(|r| r.is_none()).count();
    let successful: Vec<&RepEstimates> = results.iter().flatten().collect();

    // coefficient universe: union over replications, canonical order first
    let mut names: Vec<String> = characteristic_names();
    for rep in &successful {
        for n in &rep.names {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
    }

    let truth_of = |name: &str| -> f64 {
        characteristic_names()
            .iter()
            .position(|n| n == name)
            .map(|i| config.true_beta[i])
            .unwrap_or(0.0)
    };

    let coefficients = names
        .iter()
        .map(|name| {
            let truth = truth_of(name);
            let mut n_used = 0usize;
            let mut covered = 0usize;
            let mut bias_sum = 0.0;
            let mut detected = 0usize;
            let mut sign_ok = 0usize;
            for rep in &successful {
                if let Some(j) = rep.names.iter().position(|n| n == name) {
                    n_used += 1;
                    let (b, se) = (rep.beta[j], rep.se[j]);
                    if (b - CI_95_Z * se..=b + CI_95_Z * se).contains(&truth) {
                        covered += 1;
                    }
                    bias_sum += b - truth;
                    let (_, p) = wald_test(b, se);
                    if p <= 0.05 {
                        detected += 1;
                        if truth != 0.0 && b.signum() == truth.signum() {
                            sign_ok += 1;
                        }
                    }
                }
            }
            let denom = n_used.max(1) as f64;
            CoefCoverage {
                name: name.clone(),
                truth,
                n_used,
                coverage: covered as f64 / denom,
                mean_bias: bias_sum / denom,
                detection_rate: detected as f64 / denom,
                sign_recovery: (truth != 0.0).then_some(sign_ok as f64 / denom),
            }
        })
        .collect();

    Ok(CoverageReport {
        model,
        n_replications,
        n_failed,
        coefficients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{audit_annotation_counts, summarize_characteristics};

    fn small_config(seed: u64) -> SimConfig {
        SimConfig {
            n_patients: 4,
            images_per_patient: 6,
            ..SimConfig::desk_scale(seed)
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = small_config(99);
        let (a, _) = simulate_dataset(&cfg).unwrap();
        let (b, _) = simulate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_patients_preserves_existing_draws() {
        let small = small_config(5);
        let big = SimConfig {
            n_patients: small.n_patients + 2,
            ..small.clone()
        };
        let (ds_small, _) = simulate_dataset(&small).unwrap();
        let (ds_big, _) = simulate_dataset(&big).unwrap();
        for (a, b) in ds_small.images().iter().zip(ds_big.images()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn passes_validation_and_audit() {
        let (ds, _) = simulate_dataset(&small_config(7)).unwrap();
        // re-validating from parts must succeed
        let rebuilt = ChallengeDataset::new(
            ds.patients().to_vec(),
            ds.algorithms().to_vec(),
            ds.images().to_vec(),
            ds.outcomes().to_vec(),
        )
        .unwrap();
        let audit = audit_annotation_counts(&rebuilt);
        assert_eq!(audit.image_related_count, 8 * ds.n_images() as u64);
        assert_eq!(audit.total, audit.image_related_count + audit.instance_count);
    }

    #[test]
    fn degenerate_gaussian_collapses_to_alpha() {
        let mut cfg = small_config(3);
        cfg.family = OutcomeFamily::Gaussian { sigma2_eps: 0.0 };
        cfg.true_variances = [0.0; 4];
        cfg.true_beta = vec![0.0; 17];
        cfg.true_alpha = 2.5;
        let (_, truth) = simulate_dataset(&cfg).unwrap();
        for y in truth.gaussian_y.unwrap() {
            assert!((y - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn binomial_rate_concentrates_on_alpha() {
        let mut cfg = small_config(11);
        cfg.true_variances = [0.0; 4];
        cfg.true_beta = vec![0.0; 17];
        cfg.true_alpha = crate::transforms::logit(0.7);
        let (ds, _) = simulate_dataset(&cfg).unwrap();
        let (mut s, mut t) = (0u64, 0u64);
        for o in ds.outcomes() {
            s += o.tp;
            t += o.tp + o.fn_;
        }
        let rate = s as f64 / t as f64;
        let bound = 3.0 * (0.7 * 0.3 / t as f64).sqrt();
        assert!(
            (rate - 0.7).abs() < bound,
            "rate {rate} deviates more than {bound}"
        );
    }

    #[test]
    fn flag_prevalence_matches_configuration() {
        let mut cfg = SimConfig::desk_scale(13);
        cfg.n_patients = 20;
        cfg.prevalence = vec![0.3; 17];
        let (ds, _) = simulate_dataset(&cfg).unwrap();
        let table = summarize_characteristics(&ds);
        let n_images = ds.n_images() as f64;
        // background flag prevalence: binomial concentration bound
        let bound = 3.0 * (0.3f64 * 0.7 / n_images).sqrt();
        let bg_blood = table
            .characteristics
            .iter()
            .find(|(n, _)| n == "bg_blood")
            .unwrap()
            .1;
        assert!(
            (bg_blood - 0.3).abs() < bound,
            "prevalence {bg_blood} outside {bound}"
        );
    }

    #[test]
    fn ground_truth_aligns_with_design_rows() {
        let mut cfg = small_config(21);
        cfg.family = OutcomeFamily::Gaussian { sigma2_eps: 0.25 };
        let (ds, truth) = simulate_dataset(&cfg).unwrap();
        let design = build_structure_design(&ds, &EffectSpec::default()).unwrap();
        assert_eq!(truth.gaussian_y.as_ref().unwrap().len(), design.n_rows());
        // generation order must equal the canonical design row order
        for (i, key) in design.rows.iter().enumerate().take(20) {
            assert!(key.image_id.starts_with(&key.patient_id), "row {i}");
        }
    }

    #[test]
    fn coverage_study_rejects_mismatched_family() {
        let cfg = small_config(1);
        let err = coverage_study(&cfg, 10, CoverageModel::Lmm, 1).unwrap_err();
        assert!(matches!(err, SimError::Config(_)));
    }

    #[test]
    fn binomial_outcomes_are_symmetric_in_fp_fn() {
        let (ds, _) = simulate_dataset(&small_config(2)).unwrap();
        assert!(ds.outcomes().iter().all(|o| o.fp == o.fn_));
    }
}
