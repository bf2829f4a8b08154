//! Outcome vectors and design matrices.
//!
//! Each row of the design is one (instance, algorithm) pair. The fixed
//! effects are the 17 binary image characteristics; algorithms, patients,
//! images and instances enter as crossed random intercepts, each row
//! belonging to exactly one group per factor. Row order is
//! (patient, image, instance, algorithm), which makes builds bit-exactly
//! reproducible.
//!
//! Dimension bookkeeping: N = |K| * total instances (one row per
//! instance and algorithm) and q = |K| + |P| + |I| + total instances.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{characteristic_names, ChallengeDataset, DataError};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("missing outcome for (image `{image_id}`, instance {instance_id}, algorithm `{algorithm_id}`)")]
    MissingOutcome {
        image_id: String,
        instance_id: u16,
        algorithm_id: String,
    },
    #[error("outcome for (image `{image_id}`, instance {instance_id}, algorithm `{algorithm_id}`) has no pixels in either mask")]
    DegenerateOutcome {
        image_id: String,
        instance_id: u16,
        algorithm_id: String,
    },
    #[error("design has no rows")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which Bernoulli success probability a row models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    /// Probability of a reference pixel appearing in the prediction
    /// (trials = tp + fn).
    Recall,
    /// Probability of a predicted pixel appearing in the reference
    /// (trials = tp + fp).
    Precision,
}

impl std::str::FromStr for Perspective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "recall" => Ok(Perspective::Recall),
            "precision" => Ok(Perspective::Precision),
            other => Err(format!("unknown perspective `{other}`")),
        }
    }
}

/// The crossed random-intercept factors, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandomFactor {
    Algorithm,
    Patient,
    Image,
    Instance,
}

impl RandomFactor {
    pub fn name(&self) -> &'static str {
        match self {
            RandomFactor::Algorithm => "algorithm",
            RandomFactor::Patient => "patient",
            RandomFactor::Image => "image",
            RandomFactor::Instance => "instance",
        }
    }

    pub const ALL: [RandomFactor; 4] = [
        RandomFactor::Algorithm,
        RandomFactor::Patient,
        RandomFactor::Image,
        RandomFactor::Instance,
    ];
}

/// Which columns and random factors a design is built with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectSpec {
    /// Fixed-effect columns, a subset (usually all) of the 17
    /// characteristics in canonical order.
    pub fixed_effect_names: Vec<String>,
    /// Random-intercept factors in canonical order.
    pub random_factors: Vec<RandomFactor>,
    /// Model algorithms as fixed dummy effects instead of a random factor.
    pub algorithm_as_fixed: bool,
}

impl Default for EffectSpec {
    fn default() -> Self {
        EffectSpec {
            fixed_effect_names: characteristic_names(),
            random_factors: RandomFactor::ALL.to_vec(),
            algorithm_as_fixed: false,
        }
    }
}

impl EffectSpec {
    pub fn with_fixed_algorithms() -> Self {
        EffectSpec {
            fixed_effect_names: characteristic_names(),
            random_factors: vec![
                RandomFactor::Patient,
                RandomFactor::Image,
                RandomFactor::Instance,
            ],
            algorithm_as_fixed: true,
        }
    }
}

/// Row identity for bookkeeping and deterministic export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub patient_id: String,
    pub image_id: String,
    pub instance_id: u16,
    pub algorithm_id: String,
}

/// Group assignment of every row for one random factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    /// Length-N vector of group indices in [0, n_groups).
    pub indices: Vec<u32>,
    pub n_groups: usize,
    /// Group labels by index.
    pub levels: Vec<String>,
}

/// Outcome attached to the design rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    /// Paired successes/trials per row.
    Binomial { successes: Vec<u64>, trials: Vec<u64> },
    /// Continuous response per row.
    Continuous(Vec<f64>),
    /// Structure-only design (rows, X, groups) without a response.
    None,
}

/// Dimension bookkeeping of a design build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSizes {
    pub n_algorithms: usize,
    pub n_patients: usize,
    pub n_images: usize,
    pub n_instances: usize,
    /// Rows actually present in the design.
    pub n_rows: usize,
    /// Fixed-effect columns (excluding the intercept).
    pub p: usize,
    /// Total random-effect levels over all factors.
    pub q: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignMatrices {
    pub outcome: Outcome,
    /// Binary fixed-effects matrix, row-major N x p.
    pub x: Vec<u8>,
    pub x_names: Vec<String>,
    pub groups: Vec<GroupSpec>,
    pub rows: Vec<RowKey>,
    pub sizes: DesignSizes,
    /// Rows excluded because the perspective had zero trials.
    pub excluded: Vec<RowKey>,
}

impl DesignMatrices {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn p(&self) -> usize {
        self.x_names.len()
    }

    #[inline]
    pub fn x_entry(&self, row: usize, col: usize) -> f64 {
        self.x[row * self.x_names.len() + col] as f64
    }

    /// Per-row success ratios s/t (binomial outcomes only).
    pub fn ratio_outcome(&self) -> Option<Vec<f64>> {
        match &self.outcome {
            Outcome::Binomial { successes, trials } => Some(
                successes
                    .iter()
                    .zip(trials)
                    .map(|(&s, &t)| s as f64 / t as f64)
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Fixed-effects matrix as dense f64 (no intercept column).
    pub fn x_f64(&self) -> Vec<f64> {
        self.x.iter().map(|&v| v as f64).collect()
    }

    /// Writes the design (keys, outcome, X columns, group indices) as CSV.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<(), DesignError> {
        let mut header: Vec<String> = vec![
            "patient_id".into(),
            "image_id".into(),
            "instance_id".into(),
            "algorithm_id".into(),
        ];
        match &self.outcome {
            Outcome::Binomial { .. } => {
                header.push("successes".into());
                header.push("trials".into());
            }
            Outcome::Continuous(_) => header.push("y".into()),
            Outcome::None => {}
        }
        header.extend(self.x_names.iter().cloned());
        for g in &self.groups {
            header.push(format!("group_{}", g.name));
        }
        writeln!(writer, "{}", header.join(","))?;
        for (i, key) in self.rows.iter().enumerate() {
            let mut fields: Vec<String> = vec![
                key.patient_id.clone(),
                key.image_id.clone(),
                key.instance_id.to_string(),
                key.algorithm_id.clone(),
            ];
            match &self.outcome {
                Outcome::Binomial { successes, trials } => {
                    fields.push(successes[i].to_string());
                    fields.push(trials[i].to_string());
                }
                Outcome::Continuous(y) => fields.push(format!("{:.17e}", y[i])),
                Outcome::None => {}
            }
            for c in 0..self.x_names.len() {
                fields.push((self.x[i * self.x_names.len() + c]).to_string());
            }
            for g in &self.groups {
                fields.push(g.indices[i].to_string());
            }
            writeln!(writer, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

// Sorted (patient, image, instance, algorithm) iteration backbone.
struct RowPlan<'a> {
    keys: Vec<RowKey>,
    flag_rows: Vec<Vec<u8>>,
    dataset: &'a ChallengeDataset,
}

fn plan_rows<'a>(dataset: &'a ChallengeDataset, spec: &EffectSpec) -> RowPlan<'a> {
    let mut image_order: Vec<usize> = (0..dataset.images().len()).collect();
    image_order.sort_by(|&a, &b| {
        let ia = &dataset.images()[a];
        let ib = &dataset.images()[b];
        (&ia.patient_id, &ia.image_id).cmp(&(&ib.patient_id, &ib.image_id))
    });
    let mut algorithms: Vec<&str> = dataset.algorithms().iter().map(|s| s.as_str()).collect();
    algorithms.sort();

    let full_names = characteristic_names();
    let enabled: Vec<usize> = full_names
        .iter()
        .enumerate()
        .filter(|(_, n)| spec.fixed_effect_names.contains(n))
        .map(|(i, _)| i)
        .collect();

    let mut keys = Vec::new();
    let mut flag_rows = Vec::new();
    for &img_idx in &image_order {
        let img = &dataset.images()[img_idx];
        let mut instances: Vec<&crate::data::InstanceRecord> = img.instances.iter().collect();
        instances.sort_by_key(|i| i.instance_id);
        for inst in instances {
            // 17 flags in canonical order: instrument, background, global
            let mut full_flags = [0u8; 17];
            for (i, v) in inst.flags.as_array().iter().enumerate() {
                full_flags[i] = *v as u8;
            }
            for (i, v) in img.background_flags.as_array().iter().enumerate() {
                full_flags[9 + i] = *v as u8;
            }
            for (i, v) in img.global_flags.as_array().iter().enumerate() {
                full_flags[14 + i] = *v as u8;
            }
            let flags: Vec<u8> = enabled.iter().map(|&i| full_flags[i]).collect();
            for algo in &algorithms {
                keys.push(RowKey {
                    patient_id: img.patient_id.clone(),
                    image_id: img.image_id.clone(),
                    instance_id: inst.instance_id,
                    algorithm_id: algo.to_string(),
                });
                flag_rows.push(flags.clone());
            }
        }
    }
    RowPlan {
        keys,
        flag_rows,
        dataset,
    }
}

fn group_specs(plan: &RowPlan, spec: &EffectSpec) -> Vec<GroupSpec> {
    let mut groups = Vec::new();
    for factor in &spec.random_factors {
        let mut level_index: BTreeMap<String, u32> = BTreeMap::new();
        let mut levels = Vec::new();
        let mut indices = Vec::with_capacity(plan.keys.len());
        for key in &plan.keys {
            let label = match factor {
                RandomFactor::Algorithm => key.algorithm_id.clone(),
                RandomFactor::Patient => key.patient_id.clone(),
                RandomFactor::Image => key.image_id.clone(),
                RandomFactor::Instance => format!("{}/{}", key.image_id, key.instance_id),
            };
            let next = level_index.len() as u32;
            let idx = *level_index.entry(label.clone()).or_insert_with(|| {
                levels.push(label);
                next
            });
            indices.push(idx);
        }
        groups.push(GroupSpec {
            name: factor.name().to_string(),
            indices,
            n_groups: levels.len(),
            levels,
        });
    }
    groups
}

fn fixed_matrix(plan: &RowPlan, spec: &EffectSpec) -> (Vec<u8>, Vec<String>) {
    let mut names: Vec<String> = spec.fixed_effect_names.clone();
    let mut algo_levels: Vec<String> = Vec::new();
    if spec.algorithm_as_fixed {
        let mut algos: Vec<String> = plan.dataset.algorithms().to_vec();
        algos.sort();
        // first level is the reference and gets no dummy
        for a in algos.iter().skip(1) {
            names.push(format!("algorithm:{a}"));
            algo_levels.push(a.clone());
        }
    }
    let p = names.len();
    let mut x = Vec::with_capacity(plan.keys.len() * p);
    for (key, flags) in plan.keys.iter().zip(&plan.flag_rows) {
        x.extend_from_slice(flags);
        for a in &algo_levels {
            x.push((key.algorithm_id == *a) as u8);
        }
    }
    (x, names)
}

/// Builds the binomial design for the chosen perspective.
///
/// Recall rows carry (successes = tp, trials = tp + fn); precision rows
/// carry (successes = tp, trials = tp + fp). Precision rows with zero
/// trials (the algorithm predicted nothing for the instance) are excluded
/// and reported, not imputed.
pub fn build_design(
    dataset: &ChallengeDataset,
    perspective: Perspective,
    spec: &EffectSpec,
) -> Result<DesignMatrices, DesignError> {
    let plan = plan_rows(dataset, spec);
    if plan.keys.is_empty() {
        return Err(DesignError::Empty);
    }
    let outcome_index = dataset.outcome_index();

    let mut keep = Vec::with_capacity(plan.keys.len());
    let mut excluded = Vec::new();
    let mut successes = Vec::new();
    let mut trials = Vec::new();
    for (i, key) in plan.keys.iter().enumerate() {
        let outcome = outcome_index
            .get(&(
                key.image_id.as_str(),
                key.instance_id,
                key.algorithm_id.as_str(),
            ))
            .ok_or_else(|| DesignError::MissingOutcome {
                image_id: key.image_id.clone(),
                instance_id: key.instance_id,
                algorithm_id: key.algorithm_id.clone(),
            })?;
        let (s, t) = match perspective {
            Perspective::Recall => (outcome.tp, outcome.tp + outcome.fn_),
            Perspective::Precision => (outcome.tp, outcome.tp + outcome.fp),
        };
        if t == 0 {
            match perspective {
                // validated datasets guarantee tp + fn > 0
                Perspective::Recall => {
                    return Err(DesignError::DegenerateOutcome {
                        image_id: key.image_id.clone(),
                        instance_id: key.instance_id,
                        algorithm_id: key.algorithm_id.clone(),
                    })
                }
                Perspective::Precision => {
                    excluded.push(key.clone());
                    continue;
                }
            }
        }
        keep.push(i);
        successes.push(s);
        trials.push(t);
    }

    let kept_plan = RowPlan {
        keys: keep.iter().map(|&i| plan.keys[i].clone()).collect(),
        flag_rows: keep.iter().map(|&i| plan.flag_rows[i].clone()).collect(),
        dataset,
    };
    let groups = group_specs(&kept_plan, spec);
    let (x, x_names) = fixed_matrix(&kept_plan, spec);

    let sizes = compute_sizes(dataset, &kept_plan, &x_names, &groups);
    debug_assert_eq!(
        kept_plan.keys.len() + excluded.len(),
        dataset.algorithms().len() * dataset.n_instances(),
        "row bookkeeping must account for every instance x algorithm pair"
    );

    Ok(DesignMatrices {
        outcome: Outcome::Binomial { successes, trials },
        x,
        x_names,
        groups,
        rows: kept_plan.keys,
        sizes,
        excluded,
    })
}

/// Builds the design backbone (rows, X, groups) without outcomes, e.g.
/// for simulated continuous responses that follow the same row order.
pub fn build_structure_design(
    dataset: &ChallengeDataset,
    spec: &EffectSpec,
) -> Result<DesignMatrices, DesignError> {
    let plan = plan_rows(dataset, spec);
    if plan.keys.is_empty() {
        return Err(DesignError::Empty);
    }
    let groups = group_specs(&plan, spec);
    let (x, x_names) = fixed_matrix(&plan, spec);
    let sizes = compute_sizes(dataset, &plan, &x_names, &groups);
    Ok(DesignMatrices {
        outcome: Outcome::None,
        x,
        x_names,
        groups,
        rows: plan.keys,
        sizes,
        excluded: Vec::new(),
    })
}

fn compute_sizes(
    dataset: &ChallengeDataset,
    plan: &RowPlan,
    x_names: &[String],
    groups: &[GroupSpec],
) -> DesignSizes {
    DesignSizes {
        n_algorithms: dataset.algorithms().len(),
        n_patients: dataset.patients().len(),
        n_images: dataset.n_images(),
        n_instances: dataset.n_instances(),
        n_rows: plan.keys.len(),
        p: x_names.len(),
        q: groups.iter().map(|g| g.n_groups).sum(),
    }
}

/// Partitions a dataset into single-instrument and multi-instrument
/// images (instance count >= 2 goes to the multi part, everything else —
/// including instrument-free images — stays in the single part, so the
/// two parts union back to the original). Outcomes follow their image.
pub fn split_by_instrument_count(
    dataset: &ChallengeDataset,
) -> Result<(ChallengeDataset, ChallengeDataset), DesignError> {
    let part = |multi: bool| -> Result<ChallengeDataset, DesignError> {
        let images: Vec<_> = dataset
            .images()
            .iter()
            .filter(|img| (img.instances.len() >= 2) == multi)
            .cloned()
            .collect();
        let image_ids: std::collections::BTreeSet<&str> =
            images.iter().map(|i| i.image_id.as_str()).collect();
        let patients: Vec<_> = dataset
            .patients()
            .iter()
            .filter(|p| images.iter().any(|i| i.patient_id == p.patient_id))
            .cloned()
            .collect();
        let outcomes: Vec<_> = dataset
            .outcomes()
            .iter()
            .filter(|o| image_ids.contains(o.image_id.as_str()))
            .cloned()
            .collect();
        Ok(ChallengeDataset::new(
            patients,
            dataset.algorithms().to_vec(),
            images,
            outcomes,
        )?)
    };
    Ok((part(false)?, part(true)?))
}

/// Removes constant (all-0 or all-1) fixed-effect columns, returning the
/// reduced design and the dropped column names. An all-0 column carries
/// no information; an all-1 column is collinear with the intercept.
pub fn drop_column_policy(design: &DesignMatrices) -> (DesignMatrices, Vec<String>) {
    let n = design.n_rows();
    let p = design.p();
    let mut keep_cols = Vec::new();
    let mut dropped = Vec::new();
    for c in 0..p {
        let ones = (0..n).filter(|&r| design.x[r * p + c] != 0).count();
        if ones == 0 || ones == n {
            dropped.push(design.x_names[c].clone());
        } else {
            keep_cols.push(c);
        }
    }
    if dropped.is_empty() {
        return (design.clone(), dropped);
    }
    let mut x = Vec::with_capacity(n * keep_cols.len());
    for r in 0..n {
        for &c in &keep_cols {
            x.push(design.x[r * p + c]);
        }
    }
    let x_names: Vec<String> = keep_cols
        .iter()
        .map(|&c| design.x_names[c].clone())
        .collect();
    let mut sizes = design.sizes;
    sizes.p = x_names.len();
    (
        DesignMatrices {
            outcome: design.outcome.clone(),
            x,
            x_names,
            groups: design.groups.clone(),
            rows: design.rows.clone(),
            sizes,
            excluded: design.excluded.clone(),
        },
        dropped,
    )
}
