//! Acceptance suite: one test per shipping criterion, each printing a
//! single `[acceptance] ... PASS` line (visible with `--nocapture`).
//!
//! Run with `cargo test --test acceptance -- --test-threads 1 --nocapture`
//! to see the per-criterion lines in order; the suite also passes under
//! the default harness settings.

use std::sync::OnceLock;
use std::time::Instant;

use chal_lens::data::{
    audit_annotation_counts, BackgroundFlags, ChallengeDataset, GlobalFlags, ImageRecord,
    InstanceOutcome, InstanceRecord, InstrumentFlags, PatientRecord,
};
use chal_lens::design::{
    build_design, split_by_instrument_count, EffectSpec, GroupSpec, Perspective,
};
use chal_lens::glm::{fit_glm_logistic, GlmOptions};
use chal_lens::glmm::{fit_glmm_binomial, GlmmOptions};
use chal_lens::lmm::{fit_lmm, LmmOptions};
use chal_lens::mask::{BitMask, LabelMask};
use chal_lens::metrics::{dsc, precision, recall, ConfusionCounts};
use chal_lens::mme::FixedEffects;
use chal_lens::postprocess::{filter_overlapping_instances, reassign_small_regions, ScoredMask};
use chal_lens::report::bucket_for;
use chal_lens::rng::CounterRng;
use chal_lens::simulate::{coverage_study, CoverageModel, CoverageReport, SimConfig};
use chal_lens::stats::sigmoid;
use chal_lens::transforms::{logit, logit_inverse};

fn pass(criterion: &str, detail: String) {
    println!("[acceptance] {criterion}: PASS ({detail})");
}

#[test]
fn c01_metric_identities() {
    let start = Instant::now();
    let mut rng = CounterRng::from_stream(101, &[1]);
    let mut max_dev = 0.0f64;
    for _ in 0..10_000 {
        let c = ConfusionCounts {
            tp: 1 + rng.uniform_int(0, 100_000),
            fp: rng.uniform_int(0, 100_000),
            fn_: rng.uniform_int(0, 100_000),
            tn: 0,
        };
        let pre = precision(&c).unwrap();
        let rec = recall(&c).unwrap();
        let d = dsc(&c).unwrap();
        max_dev = max_dev.max((d - 2.0 * pre * rec / (pre + rec)).abs());
    }
    let elapsed = start.elapsed();
    assert!(max_dev < 1e-12, "max deviation {max_dev}");
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    pass(
        "C01 metric-identities",
        format!("10000 triples, max |DSC - harmonic| = {max_dev:.2e}, {elapsed:?}"),
    );
}

fn paper_sized_dataset() -> ChallengeDataset {
    // 2,728 images and 3,302 instances: 574 images carry 2 instances
    let patients = vec![PatientRecord {
        patient_id: "p1".into(),
    }];
    let mut images = Vec::new();
    for i in 0..2728usize {
        let n_inst = if i < 574 { 2 } else { 1 };
        images.push(ImageRecord {
            image_id: format!("img{i:04}"),
            patient_id: "p1".into(),
            global_flags: GlobalFlags::default(),
            background_flags: BackgroundFlags::default(),
            instances: (1..=n_inst)
                .map(|j| InstanceRecord {
                    instance_id: j as u16,
                    flags: InstrumentFlags::default(),
                })
                .collect(),
        });
    }
    ChallengeDataset::new(patients, vec![], images, vec![]).unwrap()
}

#[test]
fn c02_annotation_audit_arithmetic() {
    let ds = paper_sized_dataset();
    assert_eq!(ds.n_images(), 2728);
    assert_eq!(ds.n_instances(), 3302);
    let audit = audit_annotation_counts(&ds);
    assert_eq!(audit.image_related_count, 21_824);
    assert_eq!(audit.instance_count, 29_718);
    assert_eq!(audit.total, 51_542);
    pass(
        "C02 annotation-audit",
        format!(
            "{} + {} = {}",
            audit.image_related_count, audit.instance_count, audit.total
        ),
    );
}

#[test]
fn c03_design_dimensions() {
    // |K| = 5, |P| = 10, 1,184 single-instrument images and 1,031
    // multi-instrument images whose instances total 2,118
    let algorithms: Vec<String> = (1..=5).map(|k| format!("a{k}")).collect();
    let patients: Vec<PatientRecord> = (0..10)
        .map(|p| PatientRecord {
            patient_id: format!("p{p}"),
        })
        .collect();
    let mut images = Vec::new();
    let mut outcomes = Vec::new();
    let mut make_image = |idx: usize, n_inst: usize| {
        let image_id = format!("i{idx:04}");
        let patient_id = format!("p{}", idx % 10);
        images.push(ImageRecord {
            image_id: image_id.clone(),
            patient_id,
            global_flags: GlobalFlags::default(),
            background_flags: BackgroundFlags::default(),
            instances: (1..=n_inst)
                .map(|j| InstanceRecord {
                    instance_id: j as u16,
                    flags: InstrumentFlags::default(),
                })
                .collect(),
        });
        for j in 1..=n_inst {
            for a in &algorithms {
                outcomes.push(InstanceOutcome {
                    image_id: image_id.clone(),
                    instance_id: j as u16,
                    algorithm_id: a.clone(),
                    tp: 50,
                    fp: 10,
                    fn_: 10,
                    tn: None,
                });
            }
        }
    };
    let mut idx = 0;
    for _ in 0..1184 {
        make_image(idx, 1);
        idx += 1;
    }
    // 1,031 multi images: 56 with three instances, the rest with two
    for m in 0..1031 {
        make_image(idx, if m < 56 { 3 } else { 2 });
        idx += 1;
    }
    let ds = ChallengeDataset::new(patients, algorithms, images, outcomes).unwrap();
    assert_eq!(ds.n_instances(), 1184 + 2118);

    let (single, multi) = split_by_instrument_count(&ds).unwrap();
    assert_eq!(single.n_images(), 1184);
    assert_eq!(multi.n_images(), 1031);
    assert_eq!(multi.n_instances(), 2118);

    let spec = EffectSpec::default();
    let single_design = build_design(&single, Perspective::Recall, &spec).unwrap();
    assert_eq!(single_design.sizes.n_rows, 5920);
    let multi_design = build_design(&multi, Perspective::Recall, &spec).unwrap();
    assert_eq!(multi_design.sizes.n_rows, 10_590);
    assert_eq!(multi_design.sizes.q, 3164);
    assert_eq!(multi_design.sizes.q, 5 + 10 + 1031 + 2118);
    pass(
        "C03 design-dimensions",
        format!(
            "single N = {}, multi N = {}, multi q = {}",
            single_design.sizes.n_rows, multi_design.sizes.n_rows, multi_design.sizes.q
        ),
    );
}

#[test]
fn c04_lmm_closed_form_oracle() {
    let start = Instant::now();
    let (k, m) = (4usize, 5usize);
    let group = GroupSpec {
        name: "group".into(),
        n_groups: k,
        levels: (0..k).map(|g| format!("g{g}")).collect(),
        indices: (0..k as u32)
            .flat_map(|g| std::iter::repeat_n(g, m))
            .collect(),
    };
    let x = FixedEffects::intercept_only(k * m);
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = CounterRng::from_stream(seed, &[40]);
        let effects: Vec<f64> = (0..k).map(|_| rng.normal() * 2.0).collect();
        let y: Vec<f64> = (0..k * m)
            .map(|i| 3.0 + effects[i / m] + rng.normal() * 0.5)
            .collect();

        // closed-form balanced one-way REML
        let grand = y.iter().sum::<f64>() / y.len() as f64;
        let means: Vec<f64> = (0..k)
            .map(|g| y[g * m..(g + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        let msb = m as f64 * means.iter().map(|gm| (gm - grand).powi(2)).sum::<f64>()
            / (k - 1) as f64;
        let msw = (0..k)
            .map(|g| {
                y[g * m..(g + 1) * m]
                    .iter()
                    .map(|v| (v - means[g]).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / (k * (m - 1)) as f64;
        let su2 = (msb - msw) / m as f64;
        assert!(su2 > 0.0, "seed {seed}: boundary case, oracle undefined");

        let fit = fit_lmm(&y, &x, &[group.clone()], &LmmOptions::default()).unwrap();
        let d1 = (fit.variance_components[0].variance - su2).abs();
        let d2 = (fit.sigma2_eps - msw).abs();
        assert!(d1 < 1e-6, "seed {seed}: sigma_u^2 off by {d1:e}");
        assert!(d2 < 1e-6, "seed {seed}: sigma_eps^2 off by {d2:e}");
        worst = worst.max(d1.max(d2));
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    pass(
        "C04 lmm-closed-form",
        format!("50 seeds, worst |error| = {worst:.2e}, {elapsed:?}"),
    );
}

#[test]
fn c05_glmm_reduction_to_logistic() {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = CounterRng::from_stream(seed, &[50]);
        let n = 24;
        let xcol: Vec<f64> = (0..n).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
        let trials: Vec<u64> = (0..n).map(|_| 80 + rng.uniform_int(0, 200)).collect();
        let successes: Vec<u64> = (0..n)
            .map(|i| {
                let p = sigmoid(0.4 + 0.6 * xcol[i]);
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
        let group = GroupSpec {
            name: "cluster".into(),
            n_groups: 6,
            levels: (0..6).map(|g| format!("g{g}")).collect(),
            indices: (0..n as u32).map(|i| i % 6).collect(),
        };
        let glm = fit_glm_logistic(&successes, &trials, &x, &GlmOptions::default()).unwrap();
        let glmm = fit_glmm_binomial(
            &successes,
            &trials,
            &x,
            &[group],
            &GlmmOptions {
                fixed_log_sd: Some(vec![f64::NEG_INFINITY]),
                ..Default::default()
            },
        )
        .unwrap();
        let d = (glm.alpha - glmm.alpha)
            .abs()
            .max((glm.beta[0] - glmm.beta[0]).abs());
        assert!(d < 1e-6, "seed {seed}: reduction off by {d:e}");
        worst = worst.max(d);
    }
    pass(
        "C05 glmm-reduction",
        format!("20 fixtures, worst |beta difference| = {worst:.2e}"),
    );
}

// Criteria 6 and 7 share one Monte-Carlo study.
static STUDY: OnceLock<(CoverageReport, f64)> = OnceLock::new();

fn glmm_study() -> &'static (CoverageReport, f64) {
    STUDY.get_or_init(|| {
        let start = Instant::now();
        let config = SimConfig::desk_scale(1);
        let jobs = std::thread::available_parallelism().map_or(1, |p| p.get());
        let report = coverage_study(&config, 100, CoverageModel::Glmm, jobs).unwrap();
        (report, start.elapsed().as_secs_f64())
    })
}

#[test]
fn c06_glmm_recovery() {
    let (report, elapsed) = glmm_study();
    assert_eq!(report.n_failed, 0, "replications failed");
    assert!(*elapsed < 600.0, "study took {elapsed} s");
    let mut worst_low = 1.0f64;
    let mut worst_high = 0.0f64;
    for c in &report.coefficients {
        assert!(
            c.coverage >= 0.90 && c.coverage <= 0.99,
            "{}: coverage {} outside [0.90, 0.99]",
            c.name,
            c.coverage
        );
        worst_low = worst_low.min(c.coverage);
        worst_high = worst_high.max(c.coverage);
    }
    let planted = report
        .coefficients
        .iter()
        .find(|c| c.name == "in_covered_by_instrument")
        .expect("planted effect present");
    assert_eq!(planted.truth, -0.7);
    let sign = planted.sign_recovery.expect("non-null truth");
    assert!(sign >= 0.95, "sign recovery {sign}");
    pass(
        "C06 glmm-recovery",
        format!(
            "coverage in [{worst_low:.3}, {worst_high:.3}], sign recovery {sign:.2}, {elapsed:.0} s"
        ),
    );
}

#[test]
fn c07_type_i_calibration() {
    let (report, _) = glmm_study();
    let mut checked = 0;
    let mut worst = 0.0f64;
    for c in report.coefficients.iter().filter(|c| c.truth == 0.0) {
        assert!(
            c.detection_rate >= 0.01 && c.detection_rate <= 0.10,
            "{}: null rejection rate {} outside [0.01, 0.10]",
            c.name,
            c.detection_rate
        );
        worst = worst.max(c.detection_rate);
        checked += 1;
    }
    assert!(checked >= 10, "too few null coefficients ({checked})");
    pass(
        "C07 type-i-calibration",
        format!("{checked} null coefficients, max rejection rate {worst:.3}"),
    );
}

#[test]
fn c08_transform_properties() {
    let mut worst_rt = 0.0f64;
    let mut worst_anti = 0.0f64;
    for i in 1..=1000 {
        let v = i as f64 / 1001.0;
        worst_rt = worst_rt.max((logit_inverse(logit(v)) - v).abs());
        worst_anti = worst_anti.max((logit(1.0 - v) + logit(v)).abs());
    }
    assert!(worst_rt < 1e-12, "round-trip error {worst_rt:e}");
    assert!(worst_anti < 1e-10, "antisymmetry error {worst_anti:e}");
    pass(
        "C08 transform-properties",
        format!("round-trip max {worst_rt:.2e}, antisymmetry max {worst_anti:.2e}"),
    );
}

#[test]
fn c09_equivariance_suite() {
    // LMM fixture with one crossed factor
    let mut rng = CounterRng::from_stream(90, &[9]);
    let n = 60;
    let group = GroupSpec {
        name: "cluster".into(),
        n_groups: 6,
        levels: (0..6).map(|g| format!("g{g}")).collect(),
        indices: (0..n as u32).map(|g| g % 6).collect(),
    };
    let effects: Vec<f64> = (0..6).map(|_| rng.normal() * 0.7).collect();
    let xcol: Vec<f64> = (0..n).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 0.5 * xcol[i] + effects[(group.indices[i]) as usize] + 0.4 * rng.normal())
        .collect();
    let x = FixedEffects::new(vec!["flag".into()], n, xcol.clone()).unwrap();
    let opts = LmmOptions::default();
    let base = fit_lmm(&y, &x, &[group.clone()], &opts).unwrap();

    // location equivariance to 1e-8
    let shifted: Vec<f64> = y.iter().map(|v| v + 4.75).collect();
    let fit_shift = fit_lmm(&shifted, &x, &[group.clone()], &opts).unwrap();
    assert!((fit_shift.alpha - base.alpha - 4.75).abs() < 1e-8);
    assert!((fit_shift.beta[0] - base.beta[0]).abs() < 1e-8);
    assert!(
        (fit_shift.variance_components[0].variance - base.variance_components[0].variance).abs()
            < 1e-8
    );
    assert!((fit_shift.sigma2_eps - base.sigma2_eps).abs() < 1e-8);

    // scale equivariance to 1e-6 relative
    let c = 2.5;
    let scaled: Vec<f64> = y.iter().map(|v| c * v).collect();
    let fit_scale = fit_lmm(&scaled, &x, &[group.clone()], &opts).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
    assert!(rel(fit_scale.alpha, c * base.alpha) < 1e-6);
    assert!(rel(fit_scale.beta[0], c * base.beta[0]) < 1e-6);
    assert!(rel(fit_scale.sigma2_eps, c * c * base.sigma2_eps) < 1e-6);
    assert!(
        rel(
            fit_scale.variance_components[0].variance,
            c * c * base.variance_components[0].variance
        ) < 1e-6
    );

    // GLMM label-flip symmetry to 1e-6
    let trials: Vec<u64> = (0..n).map(|_| 100 + rng.uniform_int(0, 300)).collect();
    let successes: Vec<u64> = (0..n)
        .map(|i| {
            let p = sigmoid(0.5 - 0.8 * xcol[i] + effects[group.indices[i] as usize]);
            let mut s = 0;
            for _ in 0..trials[i] {
                if rng.uniform() < p {
                    s += 1;
                }
            }
            s
        })
        .collect();
    let flipped: Vec<u64> = successes.iter().zip(&trials).map(|(&s, &t)| t - s).collect();
    let gopts = GlmmOptions::default();
    let up = fit_glmm_binomial(&successes, &trials, &x, &[group.clone()], &gopts).unwrap();
    let down = fit_glmm_binomial(&flipped, &trials, &x, &[group], &gopts).unwrap();
    assert!((up.alpha + down.alpha).abs() < 1e-6);
    assert!((up.beta[0] + down.beta[0]).abs() < 1e-6);

    pass(
        "C09 equivariance-suite",
        "LMM location 1e-8, LMM scale 1e-6 rel, GLMM label-flip 1e-6".to_string(),
    );
}

// literal reapplication of the removal rule
fn filter_oracle(masks: &[BitMask], gamma: f64) -> Vec<BitMask> {
    let mut kept: Vec<BitMask> = masks.to_vec();
    loop {
        let mut removal = None;
        'outer: for i in 0..kept.len() {
            for j in (i + 1)..kept.len() {
                let denom = kept[i].count() + kept[j].count();
                if denom == 0 {
                    continue;
                }
                let d = 2.0 * kept[i].intersection_count(&kept[j]) as f64 / denom as f64;
                if d >= gamma {
                    removal = Some(if kept[i].count() < kept[j].count() { i } else { j });
                    break 'outer;
                }
            }
        }
        match removal {
            Some(idx) => {
                kept.remove(idx);
            }
            None => return kept,
        }
    }
}

#[test]
fn c10_postprocessing_oracles() {
    // two near-identical masks: the smaller one is removed at gamma = 0.5
    let mut big = BitMask::zeros(10, 1);
    for x in 0..10 {
        big.set(x, 0);
    }
    let mut small = BitMask::zeros(10, 1);
    for x in 0..9 {
        small.set(x, 0);
    }
    let kept = filter_overlapping_instances(
        &[
            ScoredMask {
                mask: small.clone(),
                score: 0.9,
            },
            ScoredMask {
                mask: big.clone(),
                score: 0.9,
            },
        ],
        0.2,
        0.5,
    )
    .unwrap();
    assert_eq!(kept, vec![big]);

    // 1,000 random candidate sets: idempotence and no overlapping pair
    for seed in 0..1000u64 {
        let mut rng = CounterRng::from_stream(seed, &[10, 1]);
        let n_masks = 2 + rng.uniform_int(0, 4) as usize;
        let candidates: Vec<ScoredMask> = (0..n_masks)
            .map(|_| {
                let mut mask = BitMask::zeros(12, 12);
                let x0 = rng.uniform_int(0, 8) as usize;
                let y0 = rng.uniform_int(0, 8) as usize;
                for y in y0..(y0 + 1 + rng.uniform_int(0, 3) as usize).min(12) {
                    for x in x0..(x0 + 1 + rng.uniform_int(0, 3) as usize).min(12) {
                        mask.set(x, y);
                    }
                }
                ScoredMask {
                    mask,
                    score: rng.uniform(),
                }
            })
            .collect();
        let once = filter_overlapping_instances(&candidates, 0.2, 0.5).unwrap();
        let again: Vec<ScoredMask> = once
            .iter()
            .map(|m| ScoredMask {
                mask: m.clone(),
                score: 1.0,
            })
            .collect();
        let twice = filter_overlapping_instances(&again, 0.2, 0.5).unwrap();
        assert_eq!(once, twice, "not idempotent at seed {seed}");
        let gated: Vec<BitMask> = candidates
            .iter()
            .filter(|c| c.score > 0.2)
            .map(|c| c.mask.clone())
            .collect();
        assert_eq!(once, filter_oracle(&gated, 0.5), "oracle mismatch at seed {seed}");
    }

    // 100 random grids: reassignment against the border-count oracle
    for seed in 0..100u64 {
        let mut rng = CounterRng::from_stream(seed, &[10, 2]);
        let w = 12 + rng.uniform_int(0, 8) as usize;
        let h = 12 + rng.uniform_int(0, 8) as usize;
        let labels = LabelMask::new(
            w,
            h,
            (0..w * h)
                .map(|_| {
                    let r = rng.uniform();
                    if r < 0.2 {
                        1
                    } else if r < 0.33 {
                        2
                    } else {
                        0
                    }
                })
                .collect(),
        )
        .unwrap();
        let mut reference = labels.to_binary();
        for idx in 0..w * h {
            if rng.uniform() < 0.3 {
                reference.set_index(idx);
            }
        }
        let got = reassign_small_regions(&labels, &reference, 100).unwrap();
        let want = reassign_border_oracle(&labels, &reference, 100);
        assert_eq!(got.labels, want, "seed {seed}");
    }
    pass(
        "C10 postprocessing",
        "1000 filter sets idempotent + oracle-equal; 100 reassignment grids oracle-equal"
            .to_string(),
    );
}

fn reassign_border_oracle(labels: &LabelMask, reference: &BitMask, delta: usize) -> LabelMask {
    let w = labels.width();
    let h = labels.height();
    let mut out = labels.clone();
    let mut seen = vec![false; w * h];
    let uncovered = |idx: usize| reference.get_index(idx) && labels.labels()[idx] == 0;
    for start in 0..w * h {
        if seen[start] || !uncovered(start) {
            continue;
        }
        let mut comp = vec![start];
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(idx) = queue.pop() {
            let (x, y) = (idx % w, idx / w);
            let mut neighbors = Vec::new();
            if x > 0 {
                neighbors.push(idx - 1);
            }
            if x + 1 < w {
                neighbors.push(idx + 1);
            }
            if y > 0 {
                neighbors.push(idx - w);
            }
            if y + 1 < h {
                neighbors.push(idx + w);
            }
            for nb in neighbors {
                if uncovered(nb) && !seen[nb] {
                    seen[nb] = true;
                    comp.push(nb);
                    queue.push(nb);
                }
            }
        }
        if comp.len() > delta {
            continue;
        }
        let mut border: std::collections::BTreeMap<u16, usize> = Default::default();
        for &idx in &comp {
            let (x, y) = (idx % w, idx / w);
            let mut count = |nx: usize, ny: usize| {
                let l = labels.get(nx, ny);
                if l != 0 {
                    *border.entry(l).or_default() += 1;
                }
            };
            if x > 0 {
                count(x - 1, y);
            }
            if x + 1 < w {
                count(x + 1, y);
            }
            if y > 0 {
                count(x, y - 1);
            }
            if y + 1 < h {
                count(x, y + 1);
            }
        }
        let mut best: Option<(u16, usize)> = None;
        for (&label, &len) in &border {
            let better = match best {
                None => true,
                Some((bl, blen)) => len > blen || (len == blen && label < bl),
            };
            if better {
                best = Some((label, len));
            }
        }
        if let Some((label, _)) = best {
            for &idx in &comp {
                out.set(idx % w, idx / w, label);
            }
        }
    }
    out
}

#[test]
fn c11_effect_classification() {
    let a = 0.05;
    let cases = [
        (1.6, 0.01, "+++"),
        (1.51, 0.05, "+++"),
        (1.5, 0.01, "++"),
        (1.26, 0.049, "++"),
        (1.25, 0.01, "+"),
        (1.01, 0.001, "+"),
        (0.99, 0.001, "-"),
        (0.75, 0.01, "-"),
        (0.74, 0.01, "--"),
        (0.6, 0.001, "--"),
        (0.5, 0.02, "--"),
        (0.49, 0.02, "---"),
        (0.1, 0.0001, "---"),
        (1.4, 0.3, ""),
        (0.6, 0.051, ""),
        (1.0, 0.001, ""),
    ];
    for (or, p, want) in cases {
        assert_eq!(bucket_for(or, p, a), want, "OR {or}, p {p}");
    }
    // structurally dropped columns surface as `x`
    let table = chal_lens::report::effect_table(
        &["kept".to_string(), "dropped".to_string()],
        &["kept".to_string()],
        &[0.5],
        &[0.1],
        &[None],
        a,
    );
    assert_eq!(table.rows[1].bucket, "x");
    assert!(table.rows[1].stats.is_none());
    pass(
        "C11 effect-classification",
        format!("{} bucket fixtures + structural x", cases.len()),
    );
}

#[test]
fn c12_pipeline_determinism() {
    let bin = env!("CARGO_BIN_EXE_chal-lens");
    let root = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let sim = root.path().join(format!("sim_{tag}"));
        let fit = root.path().join(format!("fit_{tag}"));
        let status = std::process::Command::new(bin)
            .args([
                "simulate",
                "--seed",
                "11",
                "--out",
                sim.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        let status = std::process::Command::new(bin)
            .args([
                "fit",
                "--images",
                sim.join("images.csv").to_str().unwrap(),
                "--instances",
                sim.join("instances.csv").to_str().unwrap(),
                "--outcomes",
                sim.join("outcomes.csv").to_str().unwrap(),
                "--model",
                "glmm",
                "--perspective",
                "recall",
                "--subset",
                "multi",
                "--seed",
                "11",
                "--out",
                fit.to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
        fit
    };
    let a = run("a");
    let b = run("b");
    for file in ["fit.json", "effects.csv", "forest.svg"] {
        let fa = std::fs::read(a.join(file)).unwrap();
        let fb = std::fs::read(b.join(file)).unwrap();
        assert_eq!(fa, fb, "{file} differs between identical runs");
    }
    pass(
        "C12 determinism",
        "fit.json, effects.csv, forest.svg byte-identical across two runs".to_string(),
    );
}
