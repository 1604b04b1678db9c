//! Multi-level label assignment for anchor-free detection grids.
//!
//! Every pyramid level covers a regression-size interval `(m_i, m_{i+1}]`:
//! a grid location is responsible for a ground-truth box when the largest of
//! its four side distances falls into the level's interval. The classic hard
//! rule ([`LevelSpec::hard_head_score`]) makes that a 0/1 decision and takes
//! plain centerness as the quality target. The smooth rule relaxes each
//! interval boundary by a factor `kappa` and ramps the head score linearly
//! across the relaxed band, multiplies in a core-zone-boosted centerness, and
//! optionally couples the result with the IoU of the current box prediction
//! ([`dynamic_label`]). The result is a soft classification target in
//! `[0, 1]` per location instead of a binary one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Ltrb, Point};
use crate::parallel;

#[derive(Debug, Error, PartialEq)]
pub enum AssignError {
    #[error("invalid assigner config `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("location lies on or outside the box (min side distance {min})")]
    LocationNotInside { min: f64 },
    #[error("cannot resolve ambiguity over an empty candidate list")]
    NoCandidates,
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
}

/// How locations are matched to ground-truth boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssignMode {
    /// Hard 0/1 interval assignment with raw centerness targets.
    FcosHard,
    /// Relaxed intervals, ramped head scores, core-zone centerness.
    DslaSmooth,
}

/// Orientation of the linear ramps over the relaxed interval bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampStyle {
    /// Ramps rise from 0 at the relaxed bound to 1 at the interval boundary,
    /// meeting the plateau continuously. This is the default.
    Continuous,
    /// Ramps run the other way (1 at the relaxed bound, 0 at the interval
    /// boundary), which leaves jumps at both ends of each band. Kept only for
    /// side-by-side comparison against the continuous form.
    Reversed,
}

/// Configuration for [`assign_all`]. Fields omitted from a JSON config fall
/// back to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignerConfig {
    /// Grid stride per pyramid level, finest first, strictly increasing.
    pub strides: Vec<u32>,
    /// Interval boundaries `m_0 < m_1 < ... < m_n` (one more entry than
    /// strides). The last entry may be `f64::INFINITY`, which JSON configs
    /// spell as `null` (the same encoding serde_json emits for it).
    #[serde(deserialize_with = "bounds_from_nullable")]
    pub range_bounds: Vec<f64>,
    /// Relaxation factor in `[0, 1)`. Zero disables relaxation entirely.
    pub kappa: f64,
    pub mode: AssignMode,
    pub ramp: RampStyle,
    /// When false, smooth centerness never gets the core-zone boost and falls
    /// back to plain centerness everywhere. Mostly useful for ablations.
    pub core_zones: bool,
}

/// Accepts `null` entries in a JSON bounds array as `f64::INFINITY`.
fn bounds_from_nullable<'de, D>(deserializer: D) -> Result<Vec<f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let raw: Vec<Option<f64>> = Vec::deserialize(deserializer)?;
    Ok(raw
        .into_iter()
        .map(|v| v.unwrap_or(f64::INFINITY))
        .collect())
}

impl Default for AssignerConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 16, 32, 64, 128],
            range_bounds: vec![0.0, 64.0, 128.0, 256.0, 512.0, f64::INFINITY],
            kappa: 0.2,
            mode: AssignMode::DslaSmooth,
            ramp: RampStyle::Continuous,
            core_zones: true,
        }
    }
}

impl AssignerConfig {
    pub fn validate(&self) -> Result<(), AssignError> {
        let bad =
            |field: &'static str, reason: String| AssignError::InvalidConfig { field, reason };
        if self.strides.is_empty() {
            return Err(bad("strides", "at least one level is required".into()));
        }
        if self.strides[0] == 0 {
            return Err(bad("strides", "strides must be positive".into()));
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad(
                "strides",
                format!("must be strictly increasing, got {:?}", self.strides),
            ));
        }
        if self.range_bounds.len() != self.strides.len() + 1 {
            return Err(bad(
                "range_bounds",
                format!(
                    "need exactly {} boundaries for {} levels, got {}",
                    self.strides.len() + 1,
                    self.strides.len(),
                    self.range_bounds.len()
                ),
            ));
        }
        let m = &self.range_bounds;
        if m[0].is_nan() || m[0] < 0.0 || m[0].is_infinite() {
            return Err(bad(
                "range_bounds",
                format!("first boundary must be finite and >= 0, got {}", m[0]),
            ));
        }
        if m.windows(2).any(|w| w[0] >= w[1] || w[1].is_nan()) {
            return Err(bad(
                "range_bounds",
                format!("must be strictly increasing, got {:?}", m),
            ));
        }
        if m[..m.len() - 1].iter().any(|v| !v.is_finite()) {
            return Err(bad(
                "range_bounds",
                "only the last boundary may be infinite".into(),
            ));
        }
        if !(self.kappa >= 0.0 && self.kappa < 1.0) {
            return Err(bad(
                "kappa",
                format!("must lie in [0, 1), got {}", self.kappa),
            ));
        }
        Ok(())
    }

    /// Expands the boundary list into one [`LevelSpec`] per level, applying
    /// the `kappa` relaxation. The outermost bounds are never relaxed: the
    /// finest level keeps its exact lower bound and the coarsest keeps its
    /// exact upper bound, so relaxation never extends the overall range.
    pub fn level_specs(&self) -> Result<Vec<LevelSpec>, AssignError> {
        self.validate()?;
        let n = self.strides.len();
        let m = &self.range_bounds;
        Ok((0..n)
            .map(|i| {
                let lower = m[i];
                let upper = m[i + 1];
                let relaxed_lower = if i == 0 {
                    lower
                } else {
                    lower * (1.0 - self.kappa)
                };
                let relaxed_upper = if i == n - 1 {
                    upper
                } else {
                    upper * (1.0 + self.kappa)
                };
                LevelSpec {
                    index: i,
                    stride: self.strides[i],
                    lower,
                    upper,
                    relaxed_lower,
                    relaxed_upper,
                }
            })
            .collect())
    }
}

/// One pyramid level with its exact and relaxed regression-size interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSpec {
    pub index: usize,
    pub stride: u32,
    pub lower: f64,
    pub upper: f64,
    pub relaxed_lower: f64,
    pub relaxed_upper: f64,
}

impl LevelSpec {
    /// Smooth head score for a location whose largest side distance is
    /// `max_dist`: 1 on the exact interval `(lower, upper]`, a linear ramp on
    /// each relaxed band, 0 elsewhere. Zero-width bands (outermost levels, or
    /// `kappa == 0`) simply have no ramp.
    pub fn head_score(&self, max_dist: f64, ramp: RampStyle) -> f64 {
        if max_dist > self.lower && max_dist <= self.upper {
            1.0
        } else if max_dist > self.relaxed_lower && max_dist <= self.lower {
            let span = self.lower - self.relaxed_lower;
            match ramp {
                RampStyle::Continuous => (max_dist - self.relaxed_lower) / span,
                RampStyle::Reversed => (self.lower - max_dist) / span,
            }
        } else if max_dist > self.upper && max_dist <= self.relaxed_upper {
            let span = self.relaxed_upper - self.upper;
            match ramp {
                RampStyle::Continuous => (self.relaxed_upper - max_dist) / span,
                RampStyle::Reversed => (max_dist - self.upper) / span,
            }
        } else {
            0.0
        }
    }

    /// Hard 0/1 head score: 1 exactly when the location is strictly inside
    /// the box (`min_dist > 0`) and `max_dist` falls in the exact interval.
    pub fn hard_head_score(&self, max_dist: f64, min_dist: f64) -> f64 {
        if min_dist > 0.0 && max_dist > self.lower && max_dist <= self.upper {
            1.0
        } else {
            0.0
        }
    }
}

/// Plain centerness of a strictly interior location:
/// `sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b)))`.
pub fn centerness(d: Ltrb) -> Result<f64, AssignError> {
    if !d.all_positive() {
        return Err(AssignError::LocationNotInside { min: d.min() });
    }
    let lr = d.l.min(d.r) / d.l.max(d.r);
    let tb = d.t.min(d.b) / d.t.max(d.b);
    Ok((lr * tb).sqrt())
}

/// The stride-sized square around the box center, clipped to the box. Every
/// location inside it counts as "central" regardless of exact centerness, so
/// small boxes keep at least one full-quality location per covering level.
pub fn core_zone(bbox: &BBox, stride: u32) -> BBox {
    let c = bbox.center();
    let half = 0.5 * stride as f64;
    BBox {
        x1: (c.x - half).max(bbox.x1),
        y1: (c.y - half).max(bbox.y1),
        x2: (c.x + half).min(bbox.x2),
        y2: (c.y + half).min(bbox.y2),
    }
}

/// Centerness with the core-zone boost: 1 inside the (closed) core zone,
/// plain [`centerness`] elsewhere. The location must be strictly inside the
/// box.
pub fn smooth_centerness(p: Point, bbox: &BBox, stride: u32) -> Result<f64, AssignError> {
    let d = bbox.ltrb(p);
    if !d.all_positive() {
        return Err(AssignError::LocationNotInside { min: d.min() });
    }
    if core_zone(bbox, stride).contains_closed(p) {
        Ok(1.0)
    } else {
        centerness(d)
    }
}

/// Smooth label of a location for one box on one level: core-zone centerness
/// times the ramped head score. Locations not strictly inside the box get 0
/// rather than an error, since "no responsibility" is a perfectly ordinary
/// outcome in a full-grid sweep.
pub fn smooth_label(p: Point, bbox: &BBox, level: &LevelSpec, ramp: RampStyle) -> f64 {
    let d = bbox.ltrb(p);
    if !d.all_positive() {
        return 0.0;
    }
    let cent = smooth_centerness(p, bbox, level.stride).expect("interior location");
    cent * level.head_score(d.max(), ramp)
}

/// Couples a smooth label with the IoU of the current box prediction against
/// the ground truth. Zero labels stay exactly zero: the coupling is only
/// active for locations that carry a positive smooth label.
pub fn dynamic_label(label_s: f64, predicted: &BBox, gt: &BBox) -> f64 {
    if label_s <= 0.0 {
        0.0
    } else {
        label_s * predicted.iou(gt)
    }
}

/// One ground-truth candidate competing for a location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignmentCandidate {
    pub gt_index: usize,
    pub label_s: f64,
    pub area: f64,
}

/// Picks the winning candidate for a location claimed by several boxes:
/// highest label first, then smaller area, then lower ground-truth index.
/// Returns the winner's `gt_index`.
pub fn resolve_ambiguity(candidates: &[AssignmentCandidate]) -> Result<usize, AssignError> {
    let mut best = candidates.first().ok_or(AssignError::NoCandidates)?;
    for c in &candidates[1..] {
        let better = c.label_s > best.label_s
            || (c.label_s == best.label_s
                && (c.area < best.area || (c.area == best.area && c.gt_index < best.gt_index)));
        if better {
            best = c;
        }
    }
    Ok(best.gt_index)
}

/// The ground truth a location was matched to, with its regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedGt {
    pub gt_index: usize,
    pub class_id: u32,
    /// Side distances from the location to the matched (clipped) box.
    pub regression: Ltrb,
}

/// Assignment result for a single grid location.
///
/// Unmatched locations carry all-zero scores and no regression target. For
/// matched locations `label_s = centerness_s * head_s` in smooth mode, and
/// `label_d` starts out equal to `label_s`: the IoU coupling factor is 1
/// until a training loop recomputes it from live predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTarget {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub location: Point,
    pub matched: Option<MatchedGt>,
    pub head_s: f64,
    pub centerness_s: f64,
    pub label_s: f64,
    pub label_d: f64,
}

impl LocationTarget {
    fn unmatched(level: usize, row: usize, col: usize, location: Point) -> Self {
        Self {
            level,
            row,
            col,
            location,
            matched: None,
            head_s: 0.0,
            centerness_s: 0.0,
            label_s: 0.0,
            label_d: 0.0,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.label_s > 0.0
    }
}

/// Dense assignment for one pyramid level; `targets` is row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAssignment {
    pub level: usize,
    pub stride: u32,
    pub ncols: usize,
    pub nrows: usize,
    pub targets: Vec<LocationTarget>,
}

/// Dense assignment over all levels of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssignmentTable {
    pub levels: Vec<LevelAssignment>,
}

impl AssignmentTable {
    /// All locations, levels in order and row-major within each level. This
    /// is the canonical flattening used by the CSV writer and the simulator.
    pub fn locations(&self) -> impl Iterator<Item = &LocationTarget> {
        self.levels.iter().flat_map(|l| l.targets.iter())
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.targets.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positives(&self) -> usize {
        self.locations().filter(|t| t.is_positive()).count()
    }

    /// 4-neighborhood pairs within each level, as indices into the canonical
    /// flattening. Used for boundary and gradient-conflict metrics.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        let mut base = 0;
        for level in &self.levels {
            for row in 0..level.nrows {
                for col in 0..level.ncols {
                    let idx = base + row * level.ncols + col;
                    if col + 1 < level.ncols {
                        pairs.push((idx, idx + 1));
                    }
                    if row + 1 < level.nrows {
                        pairs.push((idx, idx + level.ncols));
                    }
                }
            }
            base += level.targets.len();
        }
        pairs
    }
}

/// Assigns every grid location of every level against every ground-truth
/// box. Boxes are clipped to the image first; cell `(col, row)` of a level
/// with stride `s` sits at image point `(s/2 + col*s, s/2 + row*s)` and the
/// grid spans `ceil(width/s) x ceil(height/s)` cells.
pub fn assign_all(
    gt_boxes: &[(BBox, u32)],
    image_size: (u32, u32),
    config: &AssignerConfig,
) -> Result<AssignmentTable, AssignError> {
    let (width, height) = image_size;
    if width == 0 || height == 0 {
        return Err(AssignError::EmptyImage { width, height });
    }
    let specs = config.level_specs()?;
    let clipped: Vec<(BBox, u32)> = gt_boxes
        .iter()
        .map(|(b, c)| (b.clip_to(width as f64, height as f64), *c))
        .collect();
    let levels = specs
        .iter()
        .map(|spec| assign_level(&clipped, image_size, spec, config))
        .collect();
    Ok(AssignmentTable { levels })
}

/// Per-box core-zone bookkeeping for one level.
struct ZonePlan {
    zone: BBox,
    /// Fallback cell whose centerness is boosted to 1 when no grid point
    /// lands in the (clipped) zone: the strictly interior cell nearest the
    /// box center (ties go to the first cell in row-major order). `None` when
    /// the zone is hit naturally or when no cell is strictly inside the box
    /// at all. With closed containment the clipped zone provably catches a
    /// grid point whenever the box has a strictly interior one, so this is
    /// defensive; it pins the intended rule should the containment test ever
    /// tighten.
    synthetic: Option<(usize, usize)>,
}

fn assign_level(
    gts: &[(BBox, u32)],
    (width, height): (u32, u32),
    spec: &LevelSpec,
    config: &AssignerConfig,
) -> LevelAssignment {
    let stride = spec.stride;
    let s = stride as f64;
    let half = 0.5 * s;
    let ncols = width.div_ceil(stride) as usize;
    let nrows = height.div_ceil(stride) as usize;
    let cell_point =
        |row: usize, col: usize| Point::new(half + col as f64 * s, half + row as f64 * s);

    let use_zones = config.mode == AssignMode::DslaSmooth && config.core_zones;
    let zone_plans: Vec<ZonePlan> = if use_zones {
        gts.iter()
            .map(|(bx, _)| {
                let zone = core_zone(bx, stride);
                let mut zone_hit = false;
                let mut nearest: Option<((usize, usize), f64)> = None;
                let center = bx.center();
                for row in 0..nrows {
                    for col in 0..ncols {
                        let p = cell_point(row, col);
                        if !bx.strictly_contains(p) {
                            continue;
                        }
                        if zone.contains_closed(p) {
                            zone_hit = true;
                        }
                        let d2 = (p.x - center.x).powi(2) + (p.y - center.y).powi(2);
                        if nearest.is_none_or(|(_, best)| d2 < best) {
                            nearest = Some(((row, col), d2));
                        }
                    }
                }
                ZonePlan {
                    zone,
                    synthetic: if zone_hit {
                        None
                    } else {
                        nearest.map(|(cell, _)| cell)
                    },
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let targets = parallel::map_indexed(nrows * ncols, |idx| {
        let row = idx / ncols;
        let col = idx % ncols;
        let p = cell_point(row, col);

        // (candidate, head, centerness) per competing box
        let mut cands: Vec<(AssignmentCandidate, f64, f64)> = Vec::new();
        for (gi, (bx, _)) in gts.iter().enumerate() {
            if !bx.strictly_contains(p) {
                continue;
            }
            let d = bx.ltrb(p);
            let (head, cent) = match config.mode {
                AssignMode::FcosHard => {
                    let head = spec.hard_head_score(d.max(), d.min());
                    if head == 0.0 {
                        continue;
                    }
                    (head, centerness(d).expect("interior location"))
                }
                AssignMode::DslaSmooth => {
                    let boosted = use_zones
                        && (zone_plans[gi].zone.contains_closed(p)
                            || zone_plans[gi].synthetic == Some((row, col)));
                    let cent = if boosted {
                        1.0
                    } else {
                        centerness(d).expect("interior location")
                    };
                    let head = spec.head_score(d.max(), config.ramp);
                    if cent * head == 0.0 {
                        continue;
                    }
                    (head, cent)
                }
            };
            let label_s = match config.mode {
                // the hard label is the binary head score itself
                AssignMode::FcosHard => head,
                AssignMode::DslaSmooth => cent * head,
            };
            cands.push((
                AssignmentCandidate {
                    gt_index: gi,
                    label_s,
                    area: bx.area(),
                },
                head,
                cent,
            ));
        }

        if cands.is_empty() {
            return LocationTarget::unmatched(spec.index, row, col, p);
        }
        let flat: Vec<AssignmentCandidate> = cands.iter().map(|(c, _, _)| *c).collect();
        let winner = resolve_ambiguity(&flat).expect("non-empty candidates");
        let (cand, head, cent) = cands
            .iter()
            .find(|(c, _, _)| c.gt_index == winner)
            .expect("winner comes from the candidate list");
        let (bx, class_id) = gts[cand.gt_index];
        LocationTarget {
            level: spec.index,
            row,
            col,
            location: p,
            matched: Some(MatchedGt {
                gt_index: cand.gt_index,
                class_id,
                regression: bx.ltrb(p),
            }),
            head_s: *head,
            centerness_s: *cent,
            label_s: cand.label_s,
            label_d: cand.label_s,
        }
    });

    LevelAssignment {
        level: spec.index,
        stride,
        ncols,
        nrows,
        targets,
    }
}
