//! CSV ingestion and serialization of challenge datasets.
//!
//! Files are UTF-8 CSV with a header row, comma separators and literal
//! `true`/`false` flags. Outcomes are either read from `outcomes.csv`
//! or computed from reference/prediction mask pairs laid out as
//! `ref/<image_id>.pgm` and `pred/<algorithm_id>/<image_id>.pgm`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use super::{
    BackgroundFlags, ChallengeDataset, DataError, GlobalFlags, ImageRecord, InstanceOutcome,
    InstanceRecord, InstrumentFlags, PatientRecord,
};
use crate::mask::LabelMask;
use crate::metrics;

/// Where per-(image, instance, algorithm) outcomes come from.
#[derive(Debug, Clone)]
pub enum OutcomeSource<'a> {
    /// Pre-computed confusion counts.
    OutcomesCsv(&'a Path),
    /// Reference and prediction mask directories; counts are computed by
    /// instance decomposition and matching.
    MaskDirs {
        reference: &'a Path,
        predictions: &'a Path,
    },
}

const IMAGES_COLUMNS: [&str; 10] = [
    "image_id",
    "patient_id",
    "img_too_bright",
    "img_too_dark",
    "img_dirty_lens",
    "bg_blood",
    "bg_smoke",
    "bg_motion",
    "bg_reflections",
    "bg_other_object",
];

const INSTANCES_COLUMNS: [&str; 11] = [
    "image_id",
    "instance_id",
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

const OUTCOMES_COLUMNS: [&str; 6] = ["image_id", "instance_id", "algorithm_id", "tp", "fp", "fn"];

struct Columns {
    file: String,
    index: Vec<usize>,
}

impl Columns {
    fn resolve(file: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<Self, DataError> {
        let file_name = file.display().to_string();
        let mut index = Vec::with_capacity(expected.len());
        for &col in expected {
            match headers.iter().position(|h| h == col) {
                Some(i) => index.push(i),
                None => {
                    return Err(DataError::MissingColumn {
                        file: file_name,
                        column: col.to_string(),
                    })
                }
            }
        }
        for h in headers.iter() {
            if !expected.contains(&h) {
                return Err(DataError::Schema {
                    file: file_name,
                    row: 1,
                    message: format!("unexpected column `{h}`"),
                });
            }
        }
        Ok(Columns {
            file: file_name,
            index,
        })
    }

    fn get<'r>(&self, record: &'r csv::StringRecord, row: usize, col: usize) -> Result<&'r str, DataError> {
        record.get(self.index[col]).ok_or_else(|| DataError::Schema {
            file: self.file.clone(),
            row,
            message: "short row".to_string(),
        })
    }

    fn get_bool(&self, record: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<bool, DataError> {
        match self.get(record, row, col)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(DataError::Schema {
                file: self.file.clone(),
                row,
                message: format!("column `{name}`: expected `true` or `false`, got `{other}`"),
            }),
        }
    }

    fn get_u64(&self, record: &csv::StringRecord, row: usize, col: usize, name: &str) -> Result<u64, DataError> {
        let raw = self.get(record, row, col)?;
        raw.parse().map_err(|_| DataError::Schema {
            file: self.file.clone(),
            row,
            message: format!("column `{name}`: expected a non-negative integer, got `{raw}`"),
        })
    }
}

fn open_reader(path: &Path) -> Result<csv::Reader<fs::File>, DataError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
}

/// Loads and validates a dataset from its CSV (and optionally mask) files.
///
/// `algorithms` fixes the algorithm id set explicitly; when `None` it is
/// derived from the outcome rows (sorted) or, for mask sources, from the
/// prediction subdirectory names (sorted).
pub fn load_dataset(
    images_csv: &Path,
    instances_csv: &Path,
    source: OutcomeSource,
    algorithms: Option<&[String]>,
) -> Result<ChallengeDataset, DataError> {
    let mut images = read_images(images_csv)?;
    attach_instances(instances_csv, &mut images)?;

    // patients in order of first appearance
    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for img in &images {
        if seen.insert(img.patient_id.clone()) {
            patients.push(PatientRecord {
                patient_id: img.patient_id.clone(),
            });
        }
    }

    let (outcomes, algorithms) = match source {
        OutcomeSource::OutcomesCsv(path) => {
            let outcomes = read_outcomes(path)?;
            let algorithms = match algorithms {
                Some(a) => a.to_vec(),
                None => {
                    let set: BTreeSet<String> =
                        outcomes.iter().map(|o| o.algorithm_id.clone()).collect();
                    set.into_iter().collect()
                }
            };
            (outcomes, algorithms)
        }
        OutcomeSource::MaskDirs {
            reference,
            predictions,
        } => {
            let algorithms = match algorithms {
                Some(a) => a.to_vec(),
                None => list_subdirectories(predictions)?,
            };
            let outcomes = outcomes_from_mask_layout(&images, reference, predictions, &algorithms)?;
            (outcomes, algorithms)
        }
    };

    ChallengeDataset::new(patients, algorithms, images, outcomes)
}

fn read_images(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols = Columns::resolve(path, &headers, &IMAGES_COLUMNS)?;

    let mut images = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is row 1
        let record = record.map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            row,
            message: e.to_string(),
        })?;
        let image_id = cols.get(&record, row, 0)?.to_string();
        let patient_id = cols.get(&record, row, 1)?.to_string();
        if image_id.is_empty() || patient_id.is_empty() {
            return Err(DataError::Schema {
                file: path.display().to_string(),
                row,
                message: "empty image_id or patient_id".to_string(),
            });
        }
        let g = |c: usize| cols.get_bool(&record, row, c, IMAGES_COLUMNS[c]);
        images.push(ImageRecord {
            image_id,
            patient_id,
            global_flags: GlobalFlags {
                too_bright: g(2)?,
                too_dark: g(3)?,
                dirty_lens: g(4)?,
            },
            background_flags: BackgroundFlags {
                blood: g(5)?,
                smoke: g(6)?,
                motion: g(7)?,
                reflections: g(8)?,
                other_object: g(9)?,
            },
            instances: Vec::new(),
        });
    }
    Ok(images)
}

fn attach_instances(path: &Path, images: &mut [ImageRecord]) -> Result<(), DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols = Columns::resolve(path, &headers, &INSTANCES_COLUMNS)?;

    let index: std::collections::BTreeMap<String, usize> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.clone(), i))
        .collect();

    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            row,
            message: e.to_string(),
        })?;
        let image_id = cols.get(&record, row, 0)?.to_string();
        let instance_raw = cols.get(&record, row, 1)?;
        let instance_id: u16 = instance_raw.parse().map_err(|_| DataError::Schema {
            file: path.display().to_string(),
            row,
            message: format!("column `instance_id`: expected an integer in [0, 65535], got `{instance_raw}`"),
        })?;
        let img_idx = *index
            .get(&image_id)
            .ok_or_else(|| DataError::DanglingReference {
                kind: "instance".to_string(),
                key: format!("{image_id}/{instance_id}"),
                target: format!("image `{image_id}`"),
            })?;
        let b = |c: usize| cols.get_bool(&record, row, c, INSTANCES_COLUMNS[c]);
        images[img_idx].instances.push(InstanceRecord {
            instance_id,
            flags: InstrumentFlags {
                blood: b(2)?,
                smoke: b(3)?,
                tissue: b(4)?,
                motion: b(5)?,
                reflections: b(6)?,
                covered_by_instrument: b(7)?,
                other_object: b(8)?,
                too_bright: b(9)?,
                too_dark: b(10)?,
            },
        });
    }
    Ok(())
}

fn read_outcomes(path: &Path) -> Result<Vec<InstanceOutcome>, DataError> {
    let mut reader = open_reader(path)?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let cols = Columns::resolve(path, &headers, &OUTCOMES_COLUMNS)?;

    let mut outcomes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| DataError::Schema {
            file: path.display().to_string(),
            row,
            message: e.to_string(),
        })?;
        let instance_raw = cols.get(&record, row, 1)?;
        let instance_id: u16 = instance_raw.parse().map_err(|_| DataError::Schema {
            file: path.display().to_string(),
            row,
            message: format!("column `instance_id`: expected an integer in [0, 65535], got `{instance_raw}`"),
        })?;
        outcomes.push(InstanceOutcome {
            image_id: cols.get(&record, row, 0)?.to_string(),
            instance_id,
            algorithm_id: cols.get(&record, row, 2)?.to_string(),
            tp: cols.get_u64(&record, row, 3, "tp")?,
            fp: cols.get_u64(&record, row, 4, "fp")?,
            fn_: cols.get_u64(&record, row, 5, "fn")?,
            tn: None,
        });
    }
    Ok(outcomes)
}

fn list_subdirectories(path: &Path) -> Result<Vec<String>, DataError> {
    let mut names = Vec::new();
    let entries = fs::read_dir(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    names.sort();
    Ok(names)
}

/// Computes outcome rows for every image and algorithm from the on-disk
/// mask layout. A missing prediction file counts as an empty prediction.
pub fn outcomes_from_mask_layout(
    images: &[ImageRecord],
    reference_dir: &Path,
    prediction_dir: &Path,
    algorithms: &[String],
) -> Result<Vec<InstanceOutcome>, DataError> {
    let mut outcomes = Vec::new();
    for img in images {
        let ref_path = reference_dir.join(format!("{}.pgm", img.image_id));
        let reference = LabelMask::read_pgm(&ref_path)?;

        let annotated: BTreeSet<u16> = img.instances.iter().map(|i| i.instance_id).collect();
        let mask_labels: BTreeSet<u16> = reference.distinct_labels().into_iter().collect();
        for label in &mask_labels {
            if !annotated.contains(label) {
                return Err(DataError::DanglingReference {
                    kind: "reference mask instance".to_string(),
                    key: format!("{}/{label}", img.image_id),
                    target: "instance annotation".to_string(),
                });
            }
        }
        for id in &annotated {
            if !mask_labels.contains(id) {
                return Err(DataError::BadOutcome {
                    image_id: img.image_id.clone(),
                    instance_id: *id,
                    algorithm_id: "-".to_string(),
                    message: "annotated instance has no pixels in the reference mask".to_string(),
                });
            }
        }

        for algorithm in algorithms {
            let pred_path = prediction_dir
                .join(algorithm)
                .join(format!("{}.pgm", img.image_id));
            let prediction = if pred_path.exists() {
                LabelMask::read_pgm(&pred_path)?
            } else {
                LabelMask::zeros(reference.width(), reference.height())?
            };
            let per_instance = metrics::outcomes_from_masks(&reference, &prediction)
                .map_err(|e| DataError::Schema {
                    file: pred_path.display().to_string(),
                    row: 0,
                    message: e.to_string(),
                })?;
            for (label, counts) in per_instance {
                outcomes.push(InstanceOutcome {
                    image_id: img.image_id.clone(),
                    instance_id: label,
                    algorithm_id: algorithm.clone(),
                    tp: counts.tp,
                    fp: counts.fp,
                    fn_: counts.fn_,
                    tn: None,
                });
            }
        }
    }
    Ok(outcomes)
}

/// Writes `images.csv`, `instances.csv` and `outcomes.csv` into `dir`.
///
/// `load_dataset` inverts this exactly provided every patient owns at
/// least one image and the optional `tn` counts are unset (the outcome
/// schema does not carry them).
pub fn save_dataset(dataset: &ChallengeDataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let io_err = |path: &Path, e: csv::Error| DataError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    };

    let images_path = dir.join("images.csv");
    let mut w = csv::Writer::from_path(&images_path).map_err(|e| io_err(&images_path, e))?;
    w.write_record(IMAGES_COLUMNS).map_err(|e| io_err(&images_path, e))?;
    for img in dataset.images() {
        let g = img.global_flags.as_array();
        let b = img.background_flags.as_array();
        let mut record = vec![img.image_id.clone(), img.patient_id.clone()];
        record.extend(g.iter().chain(b.iter()).map(|v| v.to_string()));
        w.write_record(&record).map_err(|e| io_err(&images_path, e))?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: images_path.display().to_string(),
        source,
    })?;

    let instances_path = dir.join("instances.csv");
    let mut w = csv::Writer::from_path(&instances_path).map_err(|e| io_err(&instances_path, e))?;
    w.write_record(INSTANCES_COLUMNS).map_err(|e| io_err(&instances_path, e))?;
    for img in dataset.images() {
        for inst in &img.instances {
            let mut record = vec![img.image_id.clone(), inst.instance_id.to_string()];
            record.extend(inst.flags.as_array().iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(|e| io_err(&instances_path, e))?;
        }
    }
    w.flush().map_err(|source| DataError::Io {
        path: instances_path.display().to_string(),
        source,
    })?;

    let outcomes_path = dir.join("outcomes.csv");
    let mut w = csv::Writer::from_path(&outcomes_path).map_err(|e| io_err(&outcomes_path, e))?;
    w.write_record(OUTCOMES_COLUMNS).map_err(|e| io_err(&outcomes_path, e))?;
    for o in dataset.outcomes() {
        w.write_record(&[
            o.image_id.clone(),
            o.instance_id.to_string(),
            o.algorithm_id.clone(),
            o.tp.to_string(),
            o.fp.to_string(),
            o.fn_.to_string(),
        ])
        .map_err(|e| io_err(&outcomes_path, e))?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: outcomes_path.display().to_string(),
        source,
    })?;
    Ok(())
}
