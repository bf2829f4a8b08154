//! Learning from benchmark challenge results.
//!
//! This crate ingests hierarchical per-case challenge outcomes together
//! with semantic image annotations, computes the segmentation metrics the
//! analysis rests on, and fits linear and generalized linear mixed models
//! to quantify which image characteristics drive algorithm failure. Fits
//! are turned into effect tables, significance buckets and forest plots.
//! A seeded simulator generates synthetic challenges with known ground
//! truth and doubles as the correctness oracle for the estimators.

pub mod data;
pub mod design;
pub mod diagnostics;
pub mod forest;
pub mod glm;
pub mod glmm;
pub mod lmm;
pub mod mask;
pub mod metrics;
pub mod mme;
pub mod optim;
pub mod postprocess;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod sparse;
pub mod stats;
pub mod transforms;
