//! Confusion-count metrics, multi-instance decomposition and matching.
//!
//! Precision, recall and the Dice coefficient are all functions of the
//! pixel confusion counts. Multi-instance masks are decomposed into one
//! binary mask per instance; reference and prediction instances are put
//! into correspondence by greedy matching in descending Dice order, which
//! is deterministic and one-to-one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{BitMask, LabelMask};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {w1}x{h1} vs {w2}x{h2}")]
    DimensionMismatch {
        w1: usize,
        h1: usize,
        w2: usize,
        h2: usize,
    },
    #[error("{metric} undefined: denominator is zero")]
    Undefined { metric: &'static str },
    #[error("reference mask contains no instances")]
    EmptyReference,
    #[error("percentile of an empty list")]
    EmptyList,
    #[error("percentile rank {q} outside [0, 100]")]
    BadPercentileRank { q: f64 },
    #[error("gamma must be in (0, 1], got {gamma}")]
    BadGamma { gamma: f64 },
}

/// Pixelwise confusion counts of a (reference, prediction) mask pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_shape(a_w: usize, a_h: usize, b_w: usize, b_h: usize) -> Result<(), MetricError> {
    if a_w != b_w || a_h != b_h {
        return Err(MetricError::DimensionMismatch {
            w1: a_w,
            h1: a_h,
            w2: b_w,
            h2: b_h,
        });
    }
    Ok(())
}

/// Confusion counts between two binary masks of equal shape.
pub fn confusion_counts(reference: &BitMask, prediction: &BitMask) -> Result<ConfusionCounts, MetricError> {
    check_shape(
        reference.width(),
        reference.height(),
        prediction.width(),
        prediction.height(),
    )?;
    let tp = reference.intersection_count(prediction) as u64;
    let ref_fg = reference.count() as u64;
    let pred_fg = prediction.count() as u64;
    let total = (reference.width() * reference.height()) as u64;
    let fp = pred_fg - tp;
    let fn_ = ref_fg - tp;
    Ok(ConfusionCounts {
        tp,
        fp,
        fn_,
        tn: total - tp - fp - fn_,
    })
}

/// tp / (tp + fp); undefined when nothing was predicted.
pub fn precision(c: &ConfusionCounts) -> Result<f64, MetricError> {
    let denom = c.tp + c.fp;
    if denom == 0 {
        return Err(MetricError::Undefined {
            metric: "precision",
        });
    }
    Ok(c.tp as f64 / denom as f64)
}

/// tp / (tp + fn); undefined for an empty reference.
pub fn recall(c: &ConfusionCounts) -> Result<f64, MetricError> {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        return Err(MetricError::Undefined { metric: "recall" });
    }
    Ok(c.tp as f64 / denom as f64)
}

/// Dice coefficient 2tp / (2tp + fp + fn), the harmonic mean of precision
/// and recall.
pub fn dsc(c: &ConfusionCounts) -> Result<f64, MetricError> {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        return Err(MetricError::Undefined { metric: "dsc" });
    }
    Ok(2.0 * c.tp as f64 / denom as f64)
}

fn dsc_masks(a: &BitMask, b: &BitMask) -> f64 {
    let denom = a.count() + b.count();
    if denom == 0 {
        return 0.0;
    }
    2.0 * a.intersection_count(b) as f64 / denom as f64
}

/// One binary mask per instance label.
#[derive(Debug, Clone)]
pub struct InstanceSet {
    pub masks: Vec<InstanceMask>,
}

#[derive(Debug, Clone)]
pub struct InstanceMask {
    pub label: u16,
    pub mask: BitMask,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Splits a label mask into disjoint per-instance binary masks,
/// ordered by ascending label.
pub fn decompose_instances(mask: &LabelMask) -> InstanceSet {
    let masks = mask
        .distinct_labels()
        .into_iter()
        .map(|label| InstanceMask {
            label,
            mask: mask.label_mask(label),
        })
        .collect();
    InstanceSet { masks }
}

/// One matched (or unmatched) reference instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMatch {
    pub ref_idx: usize,
    pub pred_idx: Option<usize>,
    pub counts: ConfusionCounts,
}

/// Greedy one-to-one matching of reference to prediction instances in
/// descending pairwise Dice order. Ties break on lower reference index,
/// then lower prediction index; non-overlapping pairs are never matched.
/// Unmatched references carry all-fn counts.
pub fn match_instances(
    reference: &InstanceSet,
    prediction: &InstanceSet,
) -> Result<Vec<InstanceMatch>, MetricError> {
    if let (Some(r), Some(p)) = (reference.masks.first(), prediction.masks.first()) {
        check_shape(
            r.mask.width(),
            r.mask.height(),
            p.mask.width(),
            p.mask.height(),
        )?;
    }
    let mut pairs = Vec::new();
    for (ri, r) in reference.masks.iter().enumerate() {
        for (pi, p) in prediction.masks.iter().enumerate() {
            let d = dsc_masks(&r.mask, &p.mask);
            if d > 0.0 {
                pairs.push((d, ri, pi));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("dsc is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut ref_taken = vec![false; reference.masks.len()];
    let mut pred_taken = vec![false; prediction.masks.len()];
    let mut assigned: Vec<Option<usize>> = vec![None; reference.masks.len()];
    for (_, ri, pi) in pairs {
        if !ref_taken[ri] && !pred_taken[pi] {
            ref_taken[ri] = true;
            pred_taken[pi] = true;
            assigned[ri] = Some(pi);
        }
    }

    let mut out = Vec::with_capacity(reference.masks.len());
    for (ri, r) in reference.masks.iter().enumerate() {
        let counts = match assigned[ri] {
            Some(pi) => confusion_counts(&r.mask, &prediction.masks[pi].mask)?,
            None => {
                let size = r.mask.count() as u64;
                let total = (r.mask.width() * r.mask.height()) as u64;
                ConfusionCounts {
                    tp: 0,
                    fp: 0,
                    fn_: size,
                    tn: total - size,
                }
            }
        };
        out.push(InstanceMatch {
            ref_idx: ri,
            pred_idx: assigned[ri],
            counts,
        });
    }
    Ok(out)
}

/// Multi-instance Dice: mean per-instance Dice over reference instances
/// after matching; unmatched references contribute 0.
pub fn mi_dsc(reference: &LabelMask, prediction: &LabelMask) -> Result<f64, MetricError> {
    check_shape(
        reference.width(),
        reference.height(),
        prediction.width(),
        prediction.height(),
    )?;
    let ref_set = decompose_instances(reference);
    if ref_set.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    let pred_set = decompose_instances(prediction);
    let matches = match_instances(&ref_set, &pred_set)?;
    let sum: f64 = matches
        .iter()
        .map(|m| dsc(&m.counts).unwrap_or(0.0))
        .sum();
    Ok(sum / ref_set.len() as f64)
}

/// Linear-interpolation percentile; `q = 5` is the robustness summary.
pub fn robustness_percentile(scores: &[f64], q: f64) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyList);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(MetricError::BadPercentileRank { q });
    }
    Ok(crate::stats::percentile(scores, q).expect("non-empty checked"))
}

/// Per-reference-instance outcome rows from a reference/prediction mask
/// pair: (instance label, confusion counts).
pub fn outcomes_from_masks(
    reference: &LabelMask,
    prediction: &LabelMask,
) -> Result<Vec<(u16, ConfusionCounts)>, MetricError> {
    check_shape(
        reference.width(),
        reference.height(),
        prediction.width(),
        prediction.height(),
    )?;
    let ref_set = decompose_instances(reference);
    let pred_set = decompose_instances(prediction);
    let matches = match_instances(&ref_set, &pred_set)?;
    Ok(matches
        .into_iter()
        .map(|m| (ref_set.masks[m.ref_idx].label, m.counts))
        .collect())
}
