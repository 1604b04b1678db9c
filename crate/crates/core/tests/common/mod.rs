//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is transcribed directly from the assignment and
//! suppression rules in the plainest possible style — nested loops, no
//! shared helpers with the library — so that agreement between the two
//! implementations is meaningful evidence rather than a tautology.

use dsla_core::assigner::{AssignMode, AssignerConfig, RampStyle};
use dsla_core::geometry::BBox;
use dsla_core::inference::{Detection, NmsConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What the brute-force assigner says about one grid location.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTarget {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub gt_index: Option<usize>,
    pub head: f64,
    pub centerness: f64,
    pub label: f64,
    /// `(l, t, r, b)` to the matched (clipped) box.
    pub regression: Option<[f64; 4]>,
}

/// Brute-force reference assignment: every level, every cell, every box,
/// straight from the rules. Returns targets in canonical order (levels in
/// order, row-major within each level).
pub fn oracle_assign(
    gt_boxes: &[(BBox, u32)],
    (width, height): (u32, u32),
    config: &AssignerConfig,
) -> Vec<OracleTarget> {
    // clip boxes to the image, coordinate by coordinate
    let clipped: Vec<BBox> = gt_boxes
        .iter()
        .map(|(b, _)| BBox {
            x1: b.x1.clamp(0.0, width as f64),
            y1: b.y1.clamp(0.0, height as f64),
            x2: b.x2.clamp(0.0, width as f64),
            y2: b.y2.clamp(0.0, height as f64),
        })
        .collect();

    let nlevels = config.strides.len();
    let mut out = Vec::new();
    for level in 0..nlevels {
        let s = config.strides[level] as f64;
        let lower = config.range_bounds[level];
        let upper = config.range_bounds[level + 1];
        let relaxed_lower = if level == 0 {
            lower
        } else {
            lower * (1.0 - config.kappa)
        };
        let relaxed_upper = if level == nlevels - 1 {
            upper
        } else {
            upper * (1.0 + config.kappa)
        };
        let ncols = (width as f64 / s).ceil() as usize;
        let nrows = (height as f64 / s).ceil() as usize;

        for row in 0..nrows {
            for col in 0..ncols {
                let px = s / 2.0 + col as f64 * s;
                let py = s / 2.0 + row as f64 * s;

                // score every box this location lies strictly inside
                let mut candidates: Vec<(usize, f64, f64, f64, f64)> = Vec::new(); // (gi, head, cent, label, area)
                for (gi, bx) in clipped.iter().enumerate() {
                    let l = px - bx.x1;
                    let t = py - bx.y1;
                    let r = bx.x2 - px;
                    let b = bx.y2 - py;
                    if !(l > 0.0 && t > 0.0 && r > 0.0 && b > 0.0) {
                        continue;
                    }
                    let max_d = l.max(t).max(r).max(b);
                    let plain = ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt();

                    let (head, cent) = match config.mode {
                        AssignMode::FcosHard => {
                            let head = if max_d > lower && max_d <= upper {
                                1.0
                            } else {
                                0.0
                            };
                            (head, plain)
                        }
                        AssignMode::DslaSmooth => {
                            let head = if max_d > lower && max_d <= upper {
                                1.0
                            } else if max_d > relaxed_lower && max_d <= lower {
                                match config.ramp {
                                    RampStyle::Continuous => {
                                        (max_d - relaxed_lower) / (lower - relaxed_lower)
                                    }
                                    RampStyle::Reversed => {
                                        (lower - max_d) / (lower - relaxed_lower)
                                    }
                                }
                            } else if max_d > upper && max_d <= relaxed_upper {
                                match config.ramp {
                                    RampStyle::Continuous => {
                                        (relaxed_upper - max_d) / (relaxed_upper - upper)
                                    }
                                    RampStyle::Reversed => {
                                        (max_d - upper) / (relaxed_upper - upper)
                                    }
                                }
                            } else {
                                0.0
                            };
                            let cent = if config.core_zones {
                                // stride-sized square at the center, clipped to the box
                                let cx = (bx.x1 + bx.x2) / 2.0;
                                let cy = (bx.y1 + bx.y2) / 2.0;
                                let zx1 = (cx - s / 2.0).max(bx.x1);
                                let zy1 = (cy - s / 2.0).max(bx.y1);
                                let zx2 = (cx + s / 2.0).min(bx.x2);
                                let zy2 = (cy + s / 2.0).min(bx.y2);
                                if px >= zx1 && px <= zx2 && py >= zy1 && py <= zy2 {
                                    1.0
                                } else {
                                    plain
                                }
                            } else {
                                plain
                            };
                            (head, cent)
                        }
                    };

                    let label = match config.mode {
                        AssignMode::FcosHard => head,
                        AssignMode::DslaSmooth => cent * head,
                    };
                    if label <= 0.0 {
                        continue;
                    }
                    let area = (bx.x2 - bx.x1) * (bx.y2 - bx.y1);
                    candidates.push((gi, head, cent, label, area));
                }

                // highest label, then smallest area, then lowest index
                candidates.sort_by(|a, b| {
                    b.3.partial_cmp(&a.3)
                        .unwrap()
                        .then(a.4.partial_cmp(&b.4).unwrap())
                        .then(a.0.cmp(&b.0))
                });
                let target = match candidates.first() {
                    None => OracleTarget {
                        level,
                        row,
                        col,
                        gt_index: None,
                        head: 0.0,
                        centerness: 0.0,
                        label: 0.0,
                        regression: None,
                    },
                    Some(&(gi, head, cent, label, _)) => {
                        let bx = &clipped[gi];
                        OracleTarget {
                            level,
                            row,
                            col,
                            gt_index: Some(gi),
                            head,
                            centerness: cent,
                            label,
                            regression: Some([px - bx.x1, py - bx.y1, bx.x2 - px, bx.y2 - py]),
                        }
                    }
                };
                out.push(target);
            }
        }
    }
    out
}

/// Plain O(n^2) greedy NMS over the same deterministic candidate order as
/// the library: score descending, then `(level, row, col, input index)`.
/// Returns kept indices, best first.
pub fn oracle_nms(detections: &[Detection], config: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= config.score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&detections[a], &detections[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then_with(|| (da.level, da.row, da.col, a).cmp(&(db.level, db.row, db.col, b)))
    });
    order.truncate(config.max_pre);

    let iou = |a: &BBox, b: &BBox| -> f64 {
        let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
        let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
        let inter = iw * ih;
        let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    };

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let mut survives = true;
        for &k in &kept {
            let same_group =
                config.class_agnostic || detections[k].class_id == detections[i].class_id;
            if same_group && iou(&detections[k].bbox, &detections[i].bbox) > config.iou_threshold {
                survives = false;
                break;
            }
        }
        if survives {
            kept.push(i);
        }
    }
    kept.truncate(config.max_post);
    kept
}

/// A random scene for the assignment oracle: image up to `max_extent`
/// pixels, up to `max_boxes` boxes that may stick out of the image so the
/// clipping path gets exercised.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    max_extent: u32,
    max_boxes: usize,
) -> (Vec<(BBox, u32)>, (u32, u32)) {
    let width = rng.random_range(16..=max_extent);
    let height = rng.random_range(16..=max_extent);
    let n = rng.random_range(0..=max_boxes);
    let boxes = (0..n)
        .map(|_| {
            let w = rng.random_range(2.0..=0.9 * width as f64);
            let h = rng.random_range(2.0..=0.9 * height as f64);
            let x1 = rng.random_range(-8.0..width as f64 - 2.0);
            let y1 = rng.random_range(-8.0..height as f64 - 2.0);
            (
                BBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                rng.random_range(1..5u32),
            )
        })
        .collect();
    (boxes, (width, height))
}

/// A random configuration that keeps the oracle honest: varying relaxation,
/// ramp style, and core-zone usage over a three-level pyramid.
pub fn random_config(rng: &mut ChaCha8Rng, mode: AssignMode) -> AssignerConfig {
    let kappa = [0.0, 0.1, 0.2, 0.35][rng.random_range(0..4)];
    let ramp = if rng.random_bool(0.5) {
        RampStyle::Continuous
    } else {
        RampStyle::Reversed
    };
    AssignerConfig {
        strides: vec![8, 16, 32],
        range_bounds: vec![0.0, 16.0, 32.0, f64::INFINITY],
        kappa,
        mode,
        ramp,
        core_zones: rng.random_bool(0.8),
    }
}

/// Random detections for the NMS oracle, including deliberate score ties
/// and duplicate boxes.
pub fn random_detections(rng: &mut ChaCha8Rng, max_n: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max_n);
    let mut dets: Vec<Detection> = (0..n)
        .map(|i| {
            let x1 = rng.random_range(0.0..90.0);
            let y1 = rng.random_range(0.0..90.0);
            let w = rng.random_range(4.0..40.0);
            let h = rng.random_range(4.0..40.0);
            // quantized scores so exact ties are common
            let score = rng.random_range(1..=20) as f64 / 20.0;
            Detection {
                bbox: BBox::new(x1, y1, x1 + w, y1 + h).unwrap(),
                class_id: rng.random_range(0..3),
                score,
                quality: None,
                level: rng.random_range(0..3),
                row: i / 8,
                col: i % 8,
            }
        })
        .collect();
    // duplicate a few boxes verbatim to stress the tie-breaking rules
    if dets.len() > 2 {
        for _ in 0..rng.random_range(0..3) {
            let src = rng.random_range(0..dets.len());
            let mut copy = dets[src].clone();
            copy.col += 1;
            dets.push(copy);
        }
    }
    dets
}
