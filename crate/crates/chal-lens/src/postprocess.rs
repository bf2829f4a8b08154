//! Deterministic mask post-processing: score gating, removal of highly
//! overlapping instance proposals, and reassignment of small orphaned
//! pixel regions to the neighbouring instance with the longest shared
//! border.

use crate::mask::{BitMask, LabelMask};
use crate::metrics::MetricError;

/// Instance proposal with its detector confidence.
#[derive(Debug, Clone)]
pub struct ScoredMask {
    pub mask: BitMask,
    pub score: f64,
}

/// Drops proposals with score <= `tau`, then repeatedly removes the
/// smaller of any pair with Dice >= `gamma` (ties remove the
/// later-indexed proposal). The result contains no pair with
/// Dice >= `gamma` and the operation is idempotent.
pub fn filter_overlapping_instances(
    candidates: &[ScoredMask],
    tau: f64,
    gamma: f64,
) -> Result<Vec<BitMask>, MetricError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(MetricError::BadGamma { gamma });
    }
    let mut kept: Vec<BitMask> = candidates
        .iter()
        .filter(|c| c.score > tau)
        .map(|c| c.mask.clone())
        .collect();

    loop {
        let mut removal: Option<usize> = None;
        'scan: for i in 0..kept.len() {
            for j in (i + 1)..kept.len() {
                let a = &kept[i];
                let b = &kept[j];
                let denom = a.count() + b.count();
                if denom == 0 {
                    continue;
                }
                let d = 2.0 * a.intersection_count(b) as f64 / denom as f64;
                if d >= gamma {
                    removal = Some(if a.count() < b.count() { i } else { j });
                    break 'scan;
                }
            }
        }
        match removal {
            Some(idx) => {
                kept.remove(idx);
            }
            None => break,
        }
    }
    Ok(kept)
}

/// One uncovered connected component that could not be merged.
#[derive(Debug, Clone)]
pub struct ResidualRegion {
    pub pixels: Vec<usize>,
}

impl ResidualRegion {
    pub fn size(&self) -> usize {
        self.pixels.len()
    }
}

/// Result of [`reassign_small_regions`].
#[derive(Debug, Clone)]
pub struct ReassignResult {
    pub labels: LabelMask,
    /// Components larger than delta, or without any adjacent instance.
    pub residuals: Vec<ResidualRegion>,
}

/// Assigns foreground pixels of `reference` that carry no instance label
/// to an adjacent instance.
///
/// Uncovered pixels are grouped by 4-connectivity. A component of size
/// <= `delta` is merged into the instance sharing the longest border
/// (ties: lowest instance id); larger components, and components touching
/// no instance at all, are returned as residuals.
pub fn reassign_small_regions(
    instance_labels: &LabelMask,
    reference: &BitMask,
    delta: usize,
) -> Result<ReassignResult, MetricError> {
    if instance_labels.width() != reference.width()
        || instance_labels.height() != reference.height()
    {
        return Err(MetricError::DimensionMismatch {
            w1: instance_labels.width(),
            h1: instance_labels.height(),
            w2: reference.width(),
            h2: reference.height(),
        });
    }
    let width = instance_labels.width();
    let height = instance_labels.height();
    let n = width * height;

    let mut uncovered = vec![false; n];
    for idx in reference.iter_foreground() {
        if instance_labels.labels()[idx] == 0 {
            uncovered[idx] = true;
        }
    }

    let mut labels = instance_labels.clone();
    let mut residuals = Vec::new();
    let mut visited = vec![false; n];
    let mut stack = Vec::new();

    for start in 0..n {
        if !uncovered[start] || visited[start] {
            continue;
        }
        // flood fill one 4-connected component
        let mut component = Vec::new();
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            component.push(idx);
            let x = idx % width;
            let y = idx / width;
            let mut push = |nx: usize, ny: usize, stack: &mut Vec<usize>| {
                let nidx = ny * width + nx;
                if uncovered[nidx] && !visited[nidx] {
                    visited[nidx] = true;
                    stack.push(nidx);
                }
            };
            if x > 0 {
                push(x - 1, y, &mut stack);
            }
            if x + 1 < width {
                push(x + 1, y, &mut stack);
            }
            if y > 0 {
                push(x, y - 1, &mut stack);
            }
            if y + 1 < height {
                push(x, y + 1, &mut stack);
            }
        }
        component.sort_unstable();

        if component.len() > delta {
            residuals.push(ResidualRegion { pixels: component });
            continue;
        }

        // border length against each adjacent instance
        let mut border: std::collections::BTreeMap<u16, usize> = std::collections::BTreeMap::new();
        for &idx in &component {
            let x = idx % width;
            let y = idx / width;
            let mut count = |nx: usize, ny: usize| {
                let l = instance_labels.get(nx, ny);
                if l != 0 {
                    *border.entry(l).or_default() += 1;
                }
            };
            if x > 0 {
                count(x - 1, y);
            }
            if x + 1 < width {
                count(x + 1, y);
            }
            if y > 0 {
                count(x, y - 1);
            }
            if y + 1 < height {
                count(x, y + 1);
            }
        }
        // longest border wins; BTreeMap iteration order makes the tie break
        // the lowest instance id
        let target = border
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&l, _)| l);
        match target {
            Some(label) => {
                for &idx in &component {
                    labels.set(idx % width, idx / width, label);
                }
            }
            None => residuals.push(ResidualRegion { pixels: component }),
        }
    }

    Ok(ReassignResult { labels, residuals })
}
