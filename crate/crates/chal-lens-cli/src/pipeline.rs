//! Implementations of the subcommands.
//!
//! Every artifact lands under `--out` with a fixed name: audit.json,
//! outcomes.csv, fit.json, effects.csv, effects.json, forest.svg,
//! qq.csv, config.json, ground_truth.json, coverage.json. Machine
//! files carry 17 significant digits; printed tables round to 3.

use std::fs;
use std::path::Path;

use serde::Serialize;

use chal_lens::data::{
    audit_annotation_counts, load_dataset, outcomes_from_mask_layout, save_dataset,
    summarize_characteristics, ChallengeDataset, OutcomeSource,
};
use chal_lens::design::{
    build_design, drop_column_policy, split_by_instrument_count, DesignMatrices, EffectSpec,
    Outcome, Perspective,
};
use chal_lens::diagnostics::{normality_check, NormalityOptions, NormalityReport};
use chal_lens::glmm::{fit_glmm_binomial, GlmmOptions};
use chal_lens::lmm::{fit_lmm, LmmOptions};
use chal_lens::mask::LabelMask;
use chal_lens::metrics::{mi_dsc, robustness_percentile};
use chal_lens::mme::FixedEffects;
use chal_lens::report::{
    effect_summary_text, to_json_17, write_effects_csv, EffectTable, FitRecord,
};
use chal_lens::simulate::{coverage_study, simulate_dataset, CoverageModel, OutcomeFamily};
use chal_lens::transforms::{transform_batch, OutcomeSupport, TransformKind};

use crate::config::{load_sim_config, resolve_jobs, FitArgs, SimulateArgs};
use crate::{CliError, DatasetArgs};

fn ensure_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, to_json_17(value)?)?;
    Ok(())
}

fn load(dataset: &DatasetArgs) -> Result<ChallengeDataset, CliError> {
    let source = match (&dataset.outcomes, &dataset.masks_ref, &dataset.masks_pred) {
        (Some(outcomes), _, _) => OutcomeSource::OutcomesCsv(outcomes),
        (None, Some(r), Some(p)) => OutcomeSource::MaskDirs {
            reference: r,
            predictions: p,
        },
        _ => {
            return Err(CliError::user(anyhow::anyhow!(
                "outcomes source missing: give --outcomes, or both --ref and --pred"
            )))
        }
    };
    Ok(load_dataset(
        &dataset.images,
        &dataset.instances,
        source,
        dataset.algorithms.as_deref(),
    )?)
}

#[derive(Serialize)]
struct IngestReport<'a> {
    audit: chal_lens::data::AuditReport,
    characteristics: &'a [(String, f64)],
    instrument_count_histogram: &'a [(usize, f64)],
    n_patients: usize,
    n_images: usize,
    n_instances: usize,
    n_outcomes: usize,
    algorithms: &'a [String],
}

pub fn ingest(dataset: &DatasetArgs, out: &Path) -> Result<(), CliError> {
    let ds = load(dataset)?;
    let audit = audit_annotation_counts(&ds);
    let freq = summarize_characteristics(&ds);
    ensure_out(out)?;
    write_json(
        &out.join("audit.json"),
        &IngestReport {
            audit,
            characteristics: &freq.characteristics,
            instrument_count_histogram: &freq.instrument_count_histogram,
            n_patients: ds.patients().len(),
            n_images: ds.n_images(),
            n_instances: ds.n_instances(),
            n_outcomes: ds.outcomes().len(),
            algorithms: ds.algorithms(),
        },
    )?;
    println!(
        "dataset: {} patients, {} images, {} instances, {} algorithms",
        ds.patients().len(),
        ds.n_images(),
        ds.n_instances(),
        ds.algorithms().len()
    );
    println!(
        "annotations: image-related {} + instance {} = {}",
        audit.image_related_count, audit.instance_count, audit.total
    );
    println!("characteristic prevalences:");
    for (name, p) in &freq.characteristics {
        println!("  {name:<26} {p:.3}");
    }
    Ok(())
}

pub fn metrics(
    images: &Path,
    instances: &Path,
    masks_ref: &Path,
    masks_pred: &Path,
    algorithms: Option<Vec<String>>,
    out: &Path,
) -> Result<(), CliError> {
    let dataset_args = DatasetArgs {
        images: images.to_path_buf(),
        instances: instances.to_path_buf(),
        outcomes: None,
        masks_ref: Some(masks_ref.to_path_buf()),
        masks_pred: Some(masks_pred.to_path_buf()),
        algorithms,
    };
    let ds = load(&dataset_args)?;
    ensure_out(out)?;

    // outcomes.csv (recomputed through the same matching the loader used)
    let outcomes = outcomes_from_mask_layout(
        ds.images(),
        masks_ref,
        masks_pred,
        ds.algorithms(),
    )?;
    let mut w = String::from("image_id,instance_id,algorithm_id,tp,fp,fn\n");
    for o in &outcomes {
        w.push_str(&format!(
            "{},{},{},{},{},{}\n",
            o.image_id, o.instance_id, o.algorithm_id, o.tp, o.fp, o.fn_
        ));
    }
    fs::write(out.join("outcomes.csv"), w)?;

    // per-algorithm multi-instance Dice and its 5th-percentile robustness
    println!("algorithm  mean_mi_dsc  robustness_p5  n_images");
    for algorithm in ds.algorithms() {
        let mut scores = Vec::new();
        for img in ds.images() {
            let ref_mask = LabelMask::read_pgm(&masks_ref.join(format!("{}.pgm", img.image_id)))?;
            let pred_path = masks_pred
                .join(algorithm)
                .join(format!("{}.pgm", img.image_id));
            let pred_mask = if pred_path.exists() {
                LabelMask::read_pgm(&pred_path)?
            } else {
                LabelMask::zeros(ref_mask.width(), ref_mask.height())?
            };
            scores.push(mi_dsc(&ref_mask, &pred_mask)?);
        }
        let mean: f64 = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let robustness = robustness_percentile(&scores, 5.0)?;
        println!(
            "{algorithm:<10} {mean:>11.3} {robustness:>14.3} {n:>9}",
            n = scores.len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct RecommendationOut {
    perspective: String,
    support: String,
    recommendation: chal_lens::transforms::ModelPath,
    normality: Option<NormalityReport>,
}

pub fn recommend(
    dataset: &DatasetArgs,
    perspective: &str,
    support: &str,
    alpha: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let support: OutcomeSupport = support
        .parse()
        .map_err(|e: String| CliError::user(anyhow::anyhow!(e)))?;
    let perspective_parsed: Perspective = perspective
        .parse()
        .map_err(|e: String| CliError::user(anyhow::anyhow!(e)))?;
    let ds = load(dataset)?;
    let design = build_design(&ds, perspective_parsed, &EffectSpec::default())?;
    let values = design
        .ratio_outcome()
        .expect("perspective designs carry binomial outcomes");
    let options = NormalityOptions {
        alpha,
        seed,
        ..Default::default()
    };
    let rec = chal_lens::transforms::recommend_model_path(&values, support, &options)?;
    ensure_out(out)?;
    if let Some(report) = &rec.normality {
        write_qq_csv(&out.join("qq.csv"), report)?;
    }
    write_json(
        &out.join("recommendation.json"),
        &RecommendationOut {
            perspective: perspective.to_string(),
            support: format!("{support:?}"),
            recommendation: rec.path,
            normality: rec.normality.clone(),
        },
    )?;
    match rec.path {
        chal_lens::transforms::ModelPath::Lmm => println!("recommendation: LMM (no transform)"),
        chal_lens::transforms::ModelPath::LmmWithTransform(t) => {
            println!("recommendation: LMM with {t} transform")
        }
        chal_lens::transforms::ModelPath::GlmmBinary => {
            println!("recommendation: binomial GLMM (mixed logistic regression)")
        }
    }
    if let Some(n) = &rec.normality {
        println!(
            "normality check: W = {:.3}, p = {:.3e}, {} (n = {}{})",
            n.statistic,
            n.p_value,
            if n.verdict { "pass" } else { "fail" },
            n.n_used,
            if n.subsampled { ", subsampled" } else { "" }
        );
    }
    Ok(())
}

fn write_qq_csv(path: &Path, report: &NormalityReport) -> Result<(), CliError> {
    let mut text = String::from("theoretical,sample\n");
    for (t, s) in &report.qq_points {
        text.push_str(&format!(
            "{},{}\n",
            chal_lens::report::format_g17(*t),
            chal_lens::report::format_g17(*s)
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

fn subset_dataset(ds: ChallengeDataset, subset: &str) -> Result<ChallengeDataset, CliError> {
    match subset {
        "all" => Ok(ds),
        "single" => Ok(split_by_instrument_count(&ds)?.0),
        "multi" => Ok(split_by_instrument_count(&ds)?.1),
        other => Err(CliError::user(anyhow::anyhow!("unknown subset `{other}`"))),
    }
}

pub fn fit(args: FitArgs) -> Result<(), CliError> {
    let config = args.resolve()?;
    let dataset_args = DatasetArgs {
        images: config.images.clone(),
        instances: config.instances.clone(),
        outcomes: config.outcomes.clone(),
        masks_ref: config.masks_ref.clone(),
        masks_pred: config.masks_pred.clone(),
        algorithms: config.algorithms.clone(),
    };
    let ds = subset_dataset(load(&dataset_args)?, &config.subset)?;
    let perspective: Perspective = config
        .perspective
        .parse()
        .map_err(|e: String| CliError::user(anyhow::anyhow!(e)))?;
    let spec = if config.algorithm_fixed {
        EffectSpec::with_fixed_algorithms()
    } else {
        EffectSpec::default()
    };
    let design = build_design(&ds, perspective, &spec)?;
    let column_order = design.x_names.clone();
    let excluded_rows = design.excluded.len();
    let (design, dropped) = drop_column_policy(&design);
    let x = FixedEffects::from_design(&design);

    ensure_out(&config.out)?;
    let mut record = match config.model.as_str() {
        "glmm" => {
            let (successes, trials) = match &design.outcome {
                Outcome::Binomial { successes, trials } => (successes, trials),
                _ => unreachable!("perspective designs carry binomial outcomes"),
            };
            let options = GlmmOptions {
                outer_tol: config.tol,
                ..Default::default()
            };
            let fit = fit_glmm_binomial(successes, trials, &x, &design.groups, &options)?;
            FitRecord::from_glmm(&fit)
        }
        "lmm" => {
            let ratios = design
                .ratio_outcome()
                .expect("perspective designs carry binomial outcomes");
            let (y, clamped) = match config.transform.as_str() {
                "none" => (ratios, 0),
                "logit" => {
                    let b = transform_batch(&ratios, TransformKind::Logit, config.eps)?;
                    (b.values, b.clamped)
                }
                "log" => {
                    let b = transform_batch(&ratios, TransformKind::Log, config.eps)?;
                    (b.values, b.clamped)
                }
                other => return Err(CliError::user(anyhow::anyhow!("unknown transform `{other}`"))),
            };
            let options = LmmOptions {
                tol: config.tol,
                ..Default::default()
            };
            let fit = fit_lmm(&y, &x, &design.groups, &options)?;

            // residual diagnostics drive the transformed-LMM vs GLMM call
            let normality = normality_check(
                &fit.residuals,
                &NormalityOptions {
                    alpha: config.alpha,
                    seed: config.seed,
                    ..Default::default()
                },
            );
            if let Ok(report) = &normality {
                write_qq_csv(&config.out.join("qq.csv"), report)?;
                if !report.verdict {
                    println!(
                        "note: residual normality fails (W = {:.3}, p = {:.3e}); \
                         consider the binomial GLMM path",
                        report.statistic, report.p_value
                    );
                }
            }
            let mut record = FitRecord::from_lmm(&fit);
            record.clamped_values = Some(clamped);
            record
        }
        other => return Err(CliError::user(anyhow::anyhow!("unknown model `{other}`"))),
    };

    record.perspective = Some(config.perspective.clone());
    record.subset = Some(config.subset.clone());
    record.transform = (config.transform != "none").then(|| config.transform.clone());
    record.column_order = column_order;
    record.dropped_columns = dropped;
    record.excluded_rows = excluded_rows;
    record.seed = Some(config.seed);

    fs::write(config.out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    fs::write(config.out.join("fit.json"), to_json_17(&record)?)?;
    let table = record.effect_table(config.alpha);
    write_report_files(&table, &config.out)?;
    print_fit_summary(&record, &table, &design);
    Ok(())
}

fn write_report_files(table: &EffectTable, out: &Path) -> Result<(), CliError> {
    let mut csv = Vec::new();
    write_effects_csv(table, &mut csv)?;
    fs::write(out.join("effects.csv"), csv)?;
    write_json(&out.join("effects.json"), table)?;
    let mut svg = Vec::new();
    chal_lens::forest::forest_plot(table, &mut svg)?;
    fs::write(out.join("forest.svg"), svg)?;
    Ok(())
}

fn print_fit_summary(record: &FitRecord, table: &EffectTable, design: &DesignMatrices) {
    println!(
        "fit: {} on {} rows ({} excluded), p = {}, q = {}",
        record.model,
        record.n_obs,
        record.excluded_rows,
        record.coefficients.len(),
        design.sizes.q
    );
    println!(
        "converged: {} after {} outer iterations; criterion = {}",
        record.converged,
        record.n_iter_outer,
        record
            .criterion
            .map(|c| format!("{c:.3}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("variance components:");
    for vc in &record.variance_components {
        println!(
            "  {:<10} sd = {:.3}{}",
            vc.factor,
            vc.sd,
            if vc.boundary { " (boundary)" } else { "" }
        );
    }
    if let Some(s2) = record.sigma2_eps {
        println!("  residual   sd = {:.3}", s2.sqrt());
    }
    println!("{}", effect_summary_text(table));
    for w in &record.warnings {
        println!("warning: {w}");
    }
}

pub fn report(fit_path: &Path, alpha: f64, out: &Path) -> Result<(), CliError> {
    let record: FitRecord = serde_json::from_str(&fs::read_to_string(fit_path)?)?;
    ensure_out(out)?;
    let table = record.effect_table(alpha);
    write_report_files(&table, out)?;
    println!("{}", effect_summary_text(&table));
    Ok(())
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let config = load_sim_config(args.config.as_deref(), args.seed)?;
    if let OutcomeFamily::Gaussian { .. } = config.family {
        return Err(CliError::user(anyhow::anyhow!(
            "incompatible options: gaussian outcomes have no outcomes.csv representation; \
             use `coverage --model lmm` to exercise the gaussian path"
        )));
    }
    let (ds, truth) = simulate_dataset(&config)?;
    ensure_out(&args.out)?;
    save_dataset(&ds, &args.out)?;
    write_json(&args.out.join("ground_truth.json"), &truth)?;
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    println!(
        "simulated: {} patients, {} images, {} instances, {} algorithms, {} outcome rows",
        ds.patients().len(),
        ds.n_images(),
        ds.n_instances(),
        ds.algorithms().len(),
        ds.outcomes().len()
    );
    Ok(())
}

pub fn coverage(
    config_path: Option<&Path>,
    seed: Option<u64>,
    reps: usize,
    model: &str,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let config = load_sim_config(config_path, seed)?;
    let model = match model {
        "lmm" => CoverageModel::Lmm,
        "glmm" => CoverageModel::Glmm,
        other => {
            return Err(CliError::user(anyhow::anyhow!(
                "unknown model `{other}` (use lmm or glmm)"
            )))
        }
    };
    let jobs = resolve_jobs(jobs);
    let report = coverage_study(&config, reps, model, jobs)?;
    ensure_out(out)?;
    write_json(&out.join("coverage.json"), &report)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    println!(
        "coverage study: {} replications ({} failed), model {:?}, jobs {}",
        report.n_replications, report.n_failed, report.model, jobs
    );
    println!("coefficient                truth  coverage  detect  sign-recovery  bias");
    for c in &report.coefficients {
        println!(
            "{:<26} {:>6.3} {:>9.3} {:>7.3} {:>14} {:>7.3}",
            c.name,
            c.truth,
            c.coverage,
            c.detection_rate,
            c.sign_recovery
                .map(|s| format!("{s:.3}"))
                .unwrap_or_else(|| "-".into()),
            c.mean_bias
        );
    }
    Ok(())
}
