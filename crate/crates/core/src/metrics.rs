//! Evaluation metrics over primitive shape sets.
//!
//! A predicted shape and its ground truth are compared through the corner
//! sets of their primitives: `H(V1, V2)` is the directed max-min Euclidean
//! distance between two 8-point corner sets, `D(S1, S2)` averages the minimum
//! `H` from each primitive of S1 to S2, and the Hausdorff error symmetrizes
//! `D` over a test set. Thresholded accuracy counts predictions whose
//! diagonal-normalized distance to their nearest ground-truth primitive beats
//! a threshold; thresholded recall is the ground-truth-side counterpart under
//! a one-to-one greedy assignment. Voxel IoU compares occupancy rasters.

use crate::error::{Error, Result};
use crate::geometry::{corners, voxelize, CornerSet, GridSpec, Primitive, VoxelGrid};
use crate::matching::greedy_pairs_by_distance;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A set of primitives with optional per-primitive semantic labels.
#[derive(Debug, Clone, Default)]
pub struct ShapeSet {
    primitives: Vec<Primitive>,
    labels: Option<Vec<u32>>,
}

impl ShapeSet {
    pub fn new(primitives: Vec<Primitive>) -> Self {
        Self {
            primitives,
            labels: None,
        }
    }

    pub fn with_labels(primitives: Vec<Primitive>, labels: Vec<u32>) -> Result<Self> {
        if primitives.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for {} primitives",
                labels.len(),
                primitives.len()
            )));
        }
        Ok(Self {
            primitives,
            labels: Some(labels),
        })
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Labeled view; missing labels default to 1.
    pub fn labeled(&self) -> Vec<(u32, Primitive)> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let label = self.labels.as_ref().map(|l| l[i]).unwrap_or(1);
                (label, *p)
            })
            .collect()
    }
}

/// Aggregated evaluation quantities for a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub herr: f64,
    pub tacc: BTreeMap<String, f64>,
    pub trec: BTreeMap<String, f64>,
    pub iou_p: f64,
    pub iou_v: Option<f64>,
    pub sample_count: usize,
}

/// Directed Hausdorff distance between corner sets:
/// `max over q1 of min over q2 of ||q1 - q2||`.
pub fn hausdorff_vertex(a: &CornerSet, b: &CornerSet) -> f64 {
    let mut worst = 0.0_f64;
    for q1 in a.points() {
        let mut best = f64::INFINITY;
        for q2 in b.points() {
            let d = ((q1[0] - q2[0]).powi(2) + (q1[1] - q2[1]).powi(2) + (q1[2] - q2[2]).powi(2))
                .sqrt();
            if d < best {
                best = d;
            }
        }
        if best > worst {
            worst = best;
        }
    }
    worst
}

fn corner_sets(s: &ShapeSet) -> Vec<CornerSet> {
    s.primitives().iter().map(corners).collect()
}

/// Averaged minimum Hausdorff distance from primitives of `s1` to `s2`.
pub fn set_distance(s1: &ShapeSet, s2: &ShapeSet) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::UndefinedMetric(
            "set distance needs two non-empty shape sets".into(),
        ));
    }
    let cs2 = corner_sets(s2);
    let mut total = 0.0;
    for p in s1.primitives() {
        let c1 = corners(p);
        let best = cs2
            .iter()
            .map(|c2| hausdorff_vertex(&c1, c2))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / s1.len() as f64)
}

/// Hausdorff error over an index-aligned test set:
/// `(1/2T) * sum_i (D(S_i, S_i*) + D(S_i*, S_i))`.
pub fn herr(predictions: &[ShapeSet], ground_truths: &[ShapeSet]) -> Result<f64> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("herr needs at least one sample".into()));
    }
    let mut total = 0.0;
    for (p, g) in predictions.iter().zip(ground_truths) {
        total += set_distance(p, g)? + set_distance(g, p)?;
    }
    Ok(total / (2.0 * predictions.len() as f64))
}

/// Thresholded accuracy: the percentage of predicted primitives whose
/// directed Hausdorff distance to their nearest ground-truth primitive,
/// normalized by that primitive's diagonal, is strictly below `delta`.
pub fn tacc(predictions: &[ShapeSet], ground_truths: &[ShapeSet], delta: f64) -> Result<f64> {
    check_threshold_inputs(predictions, ground_truths, delta)?;
    let mut passed = 0usize;
    let mut total = 0usize;
    for (pred, gt) in predictions.iter().zip(ground_truths) {
        let gt_corners = corner_sets(gt);
        let gt_diags: Vec<f64> = gt
            .primitives()
            .iter()
            .map(|p| p.diagonal_length())
            .collect();
        for p in pred.primitives() {
            let c = corners(p);
            let mut best = f64::INFINITY;
            let mut best_j = 0;
            for (j, cg) in gt_corners.iter().enumerate() {
                let d = hausdorff_vertex(&c, cg);
                if d < best {
                    best = d;
                    best_j = j;
                }
            }
            total += 1;
            if best / gt_diags[best_j] < delta {
                passed += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "tacc needs at least one predicted primitive".into(),
        ));
    }
    Ok(100.0 * passed as f64 / total as f64)
}

/// Thresholded recall: greedily assigns predictions to ground-truth
/// primitives one-to-one by ascending directed Hausdorff distance; a ground
/// truth counts as recalled iff its assigned prediction passes the
/// diagonal-normalized ratio test.
pub fn trec(predictions: &[ShapeSet], ground_truths: &[ShapeSet], delta: f64) -> Result<f64> {
    check_threshold_inputs(predictions, ground_truths, delta)?;
    let mut recalled = 0usize;
    let mut total = 0usize;
    for (pred, gt) in predictions.iter().zip(ground_truths) {
        total += gt.len();
        if pred.is_empty() {
            continue;
        }
        let pc = corner_sets(pred);
        let gc = corner_sets(gt);
        let dist = |i: usize, j: usize| hausdorff_vertex(&pc[i], &gc[j]);
        let pairs = greedy_pairs_by_distance(pred.len(), gt.len(), dist);
        for (i, j) in pairs {
            let d = hausdorff_vertex(&pc[i], &gc[j]);
            if d / gt.primitives()[j].diagonal_length() < delta {
                recalled += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "trec needs at least one ground-truth primitive".into(),
        ));
    }
    Ok(100.0 * recalled as f64 / total as f64)
}

fn check_threshold_inputs(
    predictions: &[ShapeSet],
    ground_truths: &[ShapeSet],
    delta: f64,
) -> Result<()> {
    if delta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(format!(
            "threshold must be positive, got {delta}"
        )));
    }
    if predictions.len() != ground_truths.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    if ground_truths.iter().any(|g| g.is_empty()) {
        return Err(Error::EmptyInput("empty ground-truth shape".into()));
    }
    Ok(())
}

/// Voxel intersection-over-union in percent. Two empty grids score 100.
pub fn voxel_iou(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.resolution() != b.resolution() {
        return Err(Error::shape(format!(
            "voxel grids of resolution {} vs {}",
            a.resolution(),
            b.resolution()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.occupancy().iter().zip(b.occupancy()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Default thresholds for thresholded accuracy.
pub const TACC_THRESHOLDS: [f64; 3] = [0.1, 0.2, 0.3];
/// Default thresholds for thresholded recall.
pub const TREC_THRESHOLDS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

fn threshold_key(delta: f64) -> String {
    format!("{delta:.1}")
}

/// Computes the full metric report for an index-aligned test set.
///
/// Samples whose prediction is empty contribute zero IoU and leave their
/// ground-truth primitives unrecalled, but are excluded from the Hausdorff
/// error average (which is undefined for empty sets).
pub fn evaluate(
    predictions: &[ShapeSet],
    ground_truths: &[ShapeSet],
    grid: &GridSpec,
) -> Result<MetricReport> {
    if predictions.len() != ground_truths.len() || predictions.is_empty() {
        return Err(Error::shape(format!(
            "evaluate needs equal non-empty lists, got {} vs {}",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let non_empty: Vec<usize> = (0..predictions.len())
        .filter(|&i| !predictions[i].is_empty())
        .collect();
    if non_empty.len() < predictions.len() {
        log::warn!(
            "{} of {} samples have empty predictions; they are skipped in HErr",
            predictions.len() - non_empty.len(),
            predictions.len()
        );
    }
    if non_empty.is_empty() {
        return Err(Error::UndefinedMetric(
            "every prediction is empty; no metrics can be computed".into(),
        ));
    }
    let pred_sub: Vec<ShapeSet> = non_empty.iter().map(|&i| predictions[i].clone()).collect();
    let gt_sub: Vec<ShapeSet> = non_empty
        .iter()
        .map(|&i| ground_truths[i].clone())
        .collect();

    let herr_value = herr(&pred_sub, &gt_sub)?;
    let mut tacc_map = BTreeMap::new();
    for &d in &TACC_THRESHOLDS {
        tacc_map.insert(threshold_key(d), tacc(&pred_sub, &gt_sub, d)?);
    }
    let mut trec_map = BTreeMap::new();
    for &d in &TREC_THRESHOLDS {
        trec_map.insert(threshold_key(d), trec(predictions, ground_truths, d)?);
    }

    use rayon::prelude::*;
    let ious: Vec<f64> = predictions
        .par_iter()
        .zip(ground_truths.par_iter())
        .map(|(p, g)| {
            let gp = voxelize(p.primitives(), grid)?;
            let gg = voxelize(g.primitives(), grid)?;
            voxel_iou(&gp, &gg)
        })
        .collect::<Result<_>>()?;
    let iou_p = ious.iter().sum::<f64>() / ious.len() as f64;

    Ok(MetricReport {
        herr: herr_value,
        tacc: tacc_map,
        trec: trec_map,
        iou_p,
        iou_v: None,
        sample_count: predictions.len(),
    })
}
