//! Hierarchical challenge data model: patients, images, instrument
//! instances, per-algorithm outcomes and the semantic annotation flags.
//!
//! A [`ChallengeDataset`] is validated on construction and immutable
//! afterwards, so it can be shared freely across threads.

mod io;

pub use io::{load_dataset, outcomes_from_mask_layout, save_dataset, OutcomeSource};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instrument-instance annotation flags, in canonical column order.
pub const INSTRUMENT_FLAG_NAMES: [&str; 9] = [
    "in_blood",
    "in_smoke",
    "in_tissue",
    "in_motion",
    "in_reflections",
    "in_covered_by_instrument",
    "in_other_object",
    "in_too_bright",
    "in_too_dark",
];

/// Background annotation flags, in canonical column order.
pub const BACKGROUND_FLAG_NAMES: [&str; 5] = [
    "bg_blood",
    "bg_smoke",
    "bg_motion",
    "bg_reflections",
    "bg_other_object",
];

/// Whole-image annotation flags, in canonical column order.
pub const GLOBAL_FLAG_NAMES: [&str; 3] = ["img_too_bright", "img_too_dark", "img_dirty_lens"];

/// All 17 characteristics in the order used by design matrices and reports.
pub fn characteristic_names() -> Vec<String> {
    INSTRUMENT_FLAG_NAMES
        .iter()
        .chain(BACKGROUND_FLAG_NAMES.iter())
        .chain(GLOBAL_FLAG_NAMES.iter())
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: missing column `{column}`")]
    MissingColumn { file: String, column: String },
    #[error("{file} row {row}: {message}")]
    Schema {
        file: String,
        row: usize,
        message: String,
    },
    #[error("duplicate {kind} `{key}`")]
    DuplicateKey { kind: String, key: String },
    #[error("{kind} `{key}` references unknown {target}")]
    DanglingReference {
        kind: String,
        key: String,
        target: String,
    },
    #[error("image `{image_id}` instance {instance_id}: covered-by-instrument set but image has {n_instances} instance(s)")]
    CoveredButSingle {
        image_id: String,
        instance_id: u16,
        n_instances: usize,
    },
    #[error("outcome ({image_id}, {instance_id}, {algorithm_id}): {message}")]
    BadOutcome {
        image_id: String,
        instance_id: u16,
        algorithm_id: String,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mask(#[from] crate::mask::MaskError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GlobalFlags {
    pub too_bright: bool,
    pub too_dark: bool,
    pub dirty_lens: bool,
}

impl GlobalFlags {
    pub fn as_array(&self) -> [bool; 3] {
        [self.too_bright, self.too_dark, self.dirty_lens]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BackgroundFlags {
    pub blood: bool,
    pub smoke: bool,
    pub motion: bool,
    pub reflections: bool,
    pub other_object: bool,
}

impl BackgroundFlags {
    pub fn as_array(&self) -> [bool; 5] {
        [
            self.blood,
            self.smoke,
            self.motion,
            self.reflections,
            self.other_object,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstrumentFlags {
    pub blood: bool,
    pub smoke: bool,
    pub tissue: bool,
    pub motion: bool,
    pub reflections: bool,
    pub covered_by_instrument: bool,
    pub other_object: bool,
    pub too_bright: bool,
    pub too_dark: bool,
}

impl InstrumentFlags {
    pub fn as_array(&self) -> [bool; 9] {
        [
            self.blood,
            self.smoke,
            self.tissue,
            self.motion,
            self.reflections,
            self.covered_by_instrument,
            self.other_object,
            self.too_bright,
            self.too_dark,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub instance_id: u16,
    pub flags: InstrumentFlags,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub global_flags: GlobalFlags,
    pub background_flags: BackgroundFlags,
    pub instances: Vec<InstanceRecord>,
}

/// Pixel-level confusion counts for one (image, instance, algorithm) triple.
///
/// `tp + fn` is the reference-instance size (the recall trials),
/// `tp + fp` the predicted size (the precision trials).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub image_id: String,
    pub instance_id: u16,
    pub algorithm_id: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tn: Option<u64>,
}

/// Validated, immutable challenge dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeDataset {
    patients: Vec<PatientRecord>,
    algorithms: Vec<String>,
    images: Vec<ImageRecord>,
    outcomes: Vec<InstanceOutcome>,
}

impl ChallengeDataset {
    /// Builds a dataset, enforcing every structural invariant.
    pub fn new(
        patients: Vec<PatientRecord>,
        algorithms: Vec<String>,
        images: Vec<ImageRecord>,
        outcomes: Vec<InstanceOutcome>,
    ) -> Result<Self, DataError> {
        let mut patient_ids = BTreeSet::new();
        for p in &patients {
            if !patient_ids.insert(p.patient_id.clone()) {
                return Err(DataError::DuplicateKey {
                    kind: "patient".into(),
                    key: p.patient_id.clone(),
                });
            }
        }
        let mut algo_ids = BTreeSet::new();
        for a in &algorithms {
            if !algo_ids.insert(a.clone()) {
                return Err(DataError::DuplicateKey {
                    kind: "algorithm".into(),
                    key: a.clone(),
                });
            }
        }
        let mut image_instance_ids: BTreeMap<&str, BTreeSet<u16>> = BTreeMap::new();
        for img in &images {
            if !patient_ids.contains(&img.patient_id) {
                return Err(DataError::DanglingReference {
                    kind: "image".into(),
                    key: img.image_id.clone(),
                    target: format!("patient `{}`", img.patient_id),
                });
            }
            if image_instance_ids.contains_key(img.image_id.as_str()) {
                return Err(DataError::DuplicateKey {
                    kind: "image".into(),
                    key: img.image_id.clone(),
                });
            }
            let entry = image_instance_ids.entry(img.image_id.as_str()).or_default();
            for inst in &img.instances {
                if !entry.insert(inst.instance_id) {
                    return Err(DataError::DuplicateKey {
                        kind: "instance".into(),
                        key: format!("{}/{}", img.image_id, inst.instance_id),
                    });
                }
                if inst.flags.covered_by_instrument && img.instances.len() < 2 {
                    return Err(DataError::CoveredButSingle {
                        image_id: img.image_id.clone(),
                        instance_id: inst.instance_id,
                        n_instances: img.instances.len(),
                    });
                }
            }
        }
        for o in &outcomes {
            let known = image_instance_ids
                .get(o.image_id.as_str())
                .is_some_and(|set| set.contains(&o.instance_id));
            if !known {
                return Err(DataError::DanglingReference {
                    kind: "outcome".into(),
                    key: format!("({}, {}, {})", o.image_id, o.instance_id, o.algorithm_id),
                    target: "image/instance".into(),
                });
            }
            if !algo_ids.contains(&o.algorithm_id) {
                return Err(DataError::DanglingReference {
                    kind: "outcome".into(),
                    key: format!("({}, {}, {})", o.image_id, o.instance_id, o.algorithm_id),
                    target: format!("algorithm `{}`", o.algorithm_id),
                });
            }
            if o.tp + o.fn_ == 0 {
                return Err(DataError::BadOutcome {
                    image_id: o.image_id.clone(),
                    instance_id: o.instance_id,
                    algorithm_id: o.algorithm_id.clone(),
                    message: "tp + fn must be positive (reference instance is non-empty)".into(),
                });
            }
        }
        Ok(ChallengeDataset {
            patients,
            algorithms,
            images,
            outcomes,
        })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn algorithms(&self) -> &[String] {
        &self.algorithms
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn outcomes(&self) -> &[InstanceOutcome] {
        &self.outcomes
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn n_instances(&self) -> usize {
        self.images.iter().map(|i| i.instances.len()).sum()
    }

    /// Outcome lookup keyed by (image, instance, algorithm).
    pub fn outcome_index(&self) -> BTreeMap<(&str, u16, &str), &InstanceOutcome> {
        self.outcomes
            .iter()
            .map(|o| {
                (
                    (o.image_id.as_str(), o.instance_id, o.algorithm_id.as_str()),
                    o,
                )
            })
            .collect()
    }
}

/// Tally of annotation decisions implied by the schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    /// (5 background + 3 global) flags per image.
    pub image_related_count: u64,
    /// 9 flags per instrument instance.
    pub instance_count: u64,
    pub total: u64,
}

/// Counts the annotations a complete labelling of the dataset comprises.
pub fn audit_annotation_counts(dataset: &ChallengeDataset) -> AuditReport {
    let image_related = 8 * dataset.n_images() as u64;
    let instance = 9 * dataset.n_instances() as u64;
    AuditReport {
        image_related_count: image_related,
        instance_count: instance,
        total: image_related + instance,
    }
}

/// Per-characteristic prevalence plus the instrument-count histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// (characteristic name, proportion of carrying entities) in canonical order.
    pub characteristics: Vec<(String, f64)>,
    /// (instances per image, proportion of images).
    pub instrument_count_histogram: Vec<(usize, f64)>,
}

/// Proportion of entities on which each of the 17 characteristics holds.
///
/// Instrument flags are normalized by the instance count, background and
/// global flags by the image count. Empty denominators yield 0.
pub fn summarize_characteristics(dataset: &ChallengeDataset) -> FrequencyTable {
    let n_images = dataset.n_images() as f64;
    let n_instances = dataset.n_instances() as f64;
    let ratio = |count: usize, denom: f64| {
        if denom > 0.0 {
            count as f64 / denom
        } else {
            0.0
        }
    };

    let mut rows = Vec::with_capacity(17);
    for (i, name) in INSTRUMENT_FLAG_NAMES.iter().enumerate() {
        let count = dataset
            .images()
            .iter()
            .flat_map(|img| &img.instances)
            .filter(|inst| inst.flags.as_array()[i])
            .count();
        rows.push((name.to_string(), ratio(count, n_instances)));
    }
    for (i, name) in BACKGROUND_FLAG_NAMES.iter().enumerate() {
        let count = dataset
            .images()
            .iter()
            .filter(|img| img.background_flags.as_array()[i])
            .count();
        rows.push((name.to_string(), ratio(count, n_images)));
    }
    for (i, name) in GLOBAL_FLAG_NAMES.iter().enumerate() {
        let count = dataset
            .images()
            .iter()
            .filter(|img| img.global_flags.as_array()[i])
            .count();
        rows.push((name.to_string(), ratio(count, n_images)));
    }

    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for img in dataset.images() {
        *hist.entry(img.instances.len()).or_default() += 1;
    }
    let histogram = hist
        .into_iter()
        .map(|(k, c)| (k, ratio(c, n_images)))
        .collect();

    FrequencyTable {
        characteristics: rows,
        instrument_count_histogram: histogram,
    }
}
