//! Detection decoding and non-maximum suppression.
//!
//! The interesting knob here is the ranking score. With IoU-coupled training
//! the classification score already encodes localization quality, so
//! detections are ranked by it directly ([`RankMode::Dsla`]). The baseline
//! convention multiplies the classification score by a separate predicted
//! quality (centerness), which can demote an accurately localized box below a
//! more "central" but sloppier one — NMS then suppresses the better box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Ltrb, Point};
use crate::parallel;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("negative side distance {value}; decoded boxes would be flipped")]
    NegativeDistance { value: f64 },
    #[error("rank mode `fcos` needs a quality score, none was provided")]
    MissingQuality,
    #[error("invalid NMS config `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

/// How candidate detections are ordered before suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Rank by the classification score alone.
    Dsla,
    /// Rank by classification score times predicted quality (centerness).
    Fcos,
}

/// One decoded detection. `level`, `row`, `col` identify the grid location
/// it was decoded from and double as the deterministic tie-breaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
    /// Separate quality estimate; needed only for [`RankMode::Fcos`].
    pub quality: Option<f64>,
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Decodes the box described by four side distances around a grid location.
/// Distances must be non-negative; all-zero distances give a degenerate
/// point box, which is valid (it simply never overlaps anything).
pub fn decode_box(location: Point, d: Ltrb) -> Result<BBox, InferenceError> {
    let min = d.min();
    if min < 0.0 {
        return Err(InferenceError::NegativeDistance { value: min });
    }
    Ok(BBox {
        x1: location.x - d.l,
        y1: location.y - d.t,
        x2: location.x + d.r,
        y2: location.y + d.b,
    })
}

/// Ranking score of a detection under the given mode.
pub fn rank_score(
    cls_score: f64,
    quality: Option<f64>,
    mode: RankMode,
) -> Result<f64, InferenceError> {
    match mode {
        RankMode::Dsla => Ok(cls_score),
        RankMode::Fcos => match quality {
            Some(q) => Ok(cls_score * q),
            None => Err(InferenceError::MissingQuality),
        },
    }
}

/// Greedy NMS parameters. Fields omitted from a JSON config fall back to
/// their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsConfig {
    /// Candidates overlapping a kept detection of the same class by more
    /// than this IoU are dropped.
    pub iou_threshold: f64,
    /// Candidates scoring below this floor never enter suppression.
    pub score_threshold: f64,
    /// At most this many candidates (best-first) enter suppression.
    pub max_pre: usize,
    /// At most this many detections survive.
    pub max_post: usize,
    /// Suppress across classes as if everything were one class.
    pub class_agnostic: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.6,
            score_threshold: 0.05,
            max_pre: 1000,
            max_post: 100,
            class_agnostic: false,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        let bad =
            |field: &'static str, reason: String| InferenceError::InvalidConfig { field, reason };
        if !(0.0..=1.0).contains(&self.iou_threshold) || self.iou_threshold.is_nan() {
            return Err(bad(
                "iou_threshold",
                format!("must lie in [0, 1], got {}", self.iou_threshold),
            ));
        }
        if self.score_threshold.is_nan() {
            return Err(bad("score_threshold", "must not be NaN".into()));
        }
        Ok(())
    }
}

/// Deterministic candidate order: score descending, then grid location
/// `(level, row, col)` ascending, then input position.
fn candidate_order(detections: &[Detection], a: usize, b: usize) -> std::cmp::Ordering {
    let (da, db) = (&detections[a], &detections[b]);
    db.score
        .partial_cmp(&da.score)
        .expect("scores are validated finite")
        .then_with(|| (da.level, da.row, da.col, a).cmp(&(db.level, db.row, db.col, b)))
}

/// Greedy per-class non-maximum suppression. Returns the indices of kept
/// detections, best-first in the same deterministic order used for
/// suppression.
pub fn greedy_nms_indices(
    detections: &[Detection],
    config: &NmsConfig,
) -> Result<Vec<usize>, InferenceError> {
    config.validate()?;
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= config.score_threshold)
        .collect();
    order.sort_unstable_by(|&a, &b| candidate_order(detections, a, b));
    order.truncate(config.max_pre);

    // group candidates by class, preserving rank order within each group
    let group_key = |i: usize| {
        if config.class_agnostic {
            0
        } else {
            detections[i].class_id
        }
    };
    let mut classes: Vec<u32> = order.iter().map(|&i| group_key(i)).collect();
    classes.sort_unstable();
    classes.dedup();
    let groups: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| {
            order
                .iter()
                .copied()
                .filter(|&i| group_key(i) == c)
                .collect()
        })
        .collect();

    let kept_per_class: Vec<Vec<usize>> = parallel::map_slice(&groups, |group| {
        let mut kept: Vec<usize> = Vec::new();
        for &i in group {
            let suppressed = kept
                .iter()
                .any(|&k| detections[k].bbox.iou(&detections[i].bbox) > config.iou_threshold);
            if !suppressed {
                kept.push(i);
            }
        }
        kept
    });

    let mut kept: Vec<usize> = kept_per_class.into_iter().flatten().collect();
    kept.sort_unstable_by(|&a, &b| candidate_order(detections, a, b));
    kept.truncate(config.max_post);
    Ok(kept)
}

/// [`greedy_nms_indices`], returning owned detections instead of indices.
pub fn greedy_nms(
    detections: &[Detection],
    config: &NmsConfig,
) -> Result<Vec<Detection>, InferenceError> {
    Ok(greedy_nms_indices(detections, config)?
        .into_iter()
        .map(|i| detections[i].clone())
        .collect())
}
