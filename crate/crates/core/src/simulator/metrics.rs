//! Run-level quality metrics: boundary gap, ranking correlation.

use super::SimulatorError;
use crate::assigner::AssignmentTable;
use crate::geometry::BBox;
use crate::inference::Detection;

/// Mean absolute mismatch between the target step and the prediction step
/// across positive/negative boundaries.
///
/// For every 4-neighbour pair of grid locations whose matched ground truth
/// differs (matched vs. unmatched, or two different boxes), the metric
/// accumulates `|(t_a - t_b) - (p_a - p_b)|`. Hard labels put a full-height
/// step into the targets at object boundaries; a predictor that cannot
/// reproduce that step (because adjacent locations share features) scores
/// close to 1 there, while smooth targets let it score near 0. Returns 0
/// when no qualifying pair exists.
pub fn boundary_gap_metric(table: &AssignmentTable, targets: &[f64], predictions: &[f64]) -> f64 {
    assert_eq!(table.len(), targets.len(), "one target per grid location");
    assert_eq!(
        table.len(),
        predictions.len(),
        "one prediction per grid location"
    );
    let status: Vec<Option<usize>> = table
        .locations()
        .map(|t| t.matched.as_ref().map(|m| m.gt_index))
        .collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in table.adjacent_pairs() {
        if status[a] != status[b] {
            sum += ((targets[a] - targets[b]) - (predictions[a] - predictions[b])).abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean gradient conflict across adjacent same-level location pairs.
///
/// A pair conflicts when its classification G-parts (per-logit gradients)
/// pull in opposite directions; the pair then contributes the smaller
/// magnitude — the amount of gradient that two locations with nearly
/// identical features spend cancelling each other. Averaged over *all*
/// pairs so runs with different conflict frequency stay comparable.
pub fn gradient_conflict(pairs: &[(usize, usize)], gparts: &[f64]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &(a, b) in pairs {
        let (ga, gb) = (gparts[a], gparts[b]);
        if ga * gb < 0.0 {
            sum += ga.abs().min(gb.abs());
        }
    }
    sum / pairs.len() as f64
}

/// Assigns fractional ranks (1-based), averaging over ties.
fn mean_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("finite metric inputs")
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the same value: average their 1-based ranks
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with mean ranks for ties. Returns 0 when either
/// input has no rank variance (a flat sequence carries no ordering signal).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "paired observations");
    let (ra, rb) = (mean_ranks(a), mean_ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let (da, db) = (ra[i] - mean, rb[i] - mean);
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a == 0.0 || var_b == 0.0 {
        0.0
    } else {
        cov / (var_a.sqrt() * var_b.sqrt())
    }
}

/// Spearman correlation between detection ranking scores and the IoU each
/// detection achieves against its best-overlapping ground truth. Detections
/// that overlap nothing are dropped; at least two matches are required for a
/// correlation to mean anything.
pub fn ranking_correlation_metric(
    detections: &[Detection],
    gt_boxes: &[(BBox, u32)],
) -> Result<f64, SimulatorError> {
    let mut scores = Vec::new();
    let mut ious = Vec::new();
    for det in detections {
        if !det.score.is_finite() {
            continue;
        }
        let best = gt_boxes
            .iter()
            .map(|(gt, _)| det.bbox.iou(gt))
            .fold(0.0f64, f64::max);
        if best > 0.0 && best.is_finite() {
            scores.push(det.score);
            ious.push(best);
        }
    }
    if scores.len() < 2 {
        return Err(SimulatorError::NotEnoughMatches {
            found: scores.len(),
        });
    }
    Ok(spearman(&scores, &ious))
}
