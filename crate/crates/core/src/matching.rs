//! Assignment procedures: greedy prediction-to-ground-truth matching and
//! pairing-based non-maximum suppression.
//!
//! Both use the same greedy rule: repeatedly select the globally minimum
//! distance among unmatched items, breaking ties by the lowest (row, column)
//! index pair. Distances are L1 over lengths and translations; rotation is
//! excluded unless explicitly requested.

use crate::geometry::wrap_angle;

/// Flat primitive parameter vector
/// `[l_x, l_y, l_z, t_x, t_y, t_z, theta_x, theta_y, theta_z]`, usually in
/// the normalized training frame (where box lengths may be any real).
pub type Params9 = [f64; 9];

/// Result of matching predictions against ground-truth primitives.
///
/// Every prediction index appears exactly once across `pairs` and
/// `background`; every ground-truth index appears at most once in `pairs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub background: Vec<usize>,
}

/// L1 distance over the 9 box parameters; rotation terms (as wrapped angle
/// differences) enter only when `include_rotation` is set.
pub fn primitive_l1(a: &Params9, b: &Params9, include_rotation: bool) -> f64 {
    let mut d = 0.0;
    for i in 0..6 {
        d += (a[i] - b[i]).abs();
    }
    if include_rotation {
        for i in 6..9 {
            d += wrap_angle(a[i] - b[i]).abs();
        }
    }
    d
}

/// Greedy one-to-one pairing over an `n x m` distance matrix.
///
/// Selecting the next pair in ascending `(distance, row, column)` order over
/// unused rows and columns is equivalent to rescanning the remaining matrix
/// for its minimum each round, and costs one sort instead. Pairs are
/// returned in selection order, so their distances are non-decreasing.
pub fn greedy_pairs_by_distance<F>(n: usize, m: usize, dist: F) -> Vec<(usize, usize)>
where
    F: Fn(usize, usize) -> f64,
{
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            edges.push((dist(i, j), i, j));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_row = vec![false; n];
    let mut used_col = vec![false; m];
    let mut pairs = Vec::with_capacity(n.min(m));
    for (_, i, j) in edges {
        if !used_row[i] && !used_col[j] {
            used_row[i] = true;
            used_col[j] = true;
            pairs.push((i, j));
            if pairs.len() == n.min(m) {
                break;
            }
        }
    }
    pairs
}

/// Greedy matching of predictions against the doubled ground-truth list.
///
/// Rotation is excluded from the distance. Predictions left over once the
/// ground truths are exhausted are assigned to the background class.
pub fn greedy_match(predictions: &[Params9], gt_doubled: &[Params9]) -> Assignment {
    let pairs = greedy_pairs_by_distance(predictions.len(), gt_doubled.len(), |i, j| {
        primitive_l1(&predictions[i], &gt_doubled[j], false)
    });
    let mut matched = vec![false; predictions.len()];
    for &(i, _) in &pairs {
        matched[i] = true;
    }
    let background = (0..predictions.len()).filter(|&i| !matched[i]).collect();
    Assignment { pairs, background }
}

/// Pairing-based NMS over final primitive predictions.
///
/// Greedily pairs the two unpaired primitives with minimum L1 distance
/// (rotation excluded) and keeps the member with the higher confidence; a
/// confidence tie keeps the lower index. An odd survivor is kept as-is.
/// Outputs preserve the input order of the kept elements.
pub fn pairing_nms(finals: &[(Params9, u32, f64)]) -> Vec<(Params9, u32, f64)> {
    let n = finals.len();
    if n <= 1 {
        return finals.to_vec();
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((primitive_l1(&finals[i].0, &finals[j].0, false), i, j));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut paired = vec![false; n];
    let mut keep = Vec::new();
    let mut remaining = n;
    for (_, i, j) in edges {
        if remaining < 2 {
            break;
        }
        if paired[i] || paired[j] {
            continue;
        }
        paired[i] = true;
        paired[j] = true;
        remaining -= 2;
        keep.push(if finals[j].2 > finals[i].2 { j } else { i });
    }
    for (i, &p) in paired.iter().enumerate() {
        if !p {
            keep.push(i); // odd leftover
        }
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| finals[i]).collect()
}
