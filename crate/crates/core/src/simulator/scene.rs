//! Seeded synthetic scenes: bright rectangles on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimulatorError;
use crate::geometry::{BBox, Point};

/// Recipe for a synthetic scene. Equal specs produce bit-identical scenes;
/// fields omitted from a JSON config fall back to their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub num_rects: usize,
    /// Rectangle side lengths are drawn uniformly from this range (pixels).
    pub size_range: (f64, f64),
    /// Rectangle fill intensities are drawn uniformly from this range.
    pub intensity_range: (f64, f64),
    /// Background pixels are uniform noise in `[0, noise_level]`.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            num_rects: 3,
            size_range: (16.0, 48.0),
            intensity_range: (0.6, 1.0),
            noise_level: 0.15,
            seed: 42,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad =
            |field: &'static str, reason: String| SimulatorError::InvalidSpec { field, reason };
        if self.width == 0 || self.height == 0 {
            return Err(bad(
                "width",
                format!(
                    "image must be non-empty, got {}x{}",
                    self.width, self.height
                ),
            ));
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi) || !hi.is_finite() {
            return Err(bad(
                "size_range",
                format!("need 0 < min <= max, got ({lo}, {hi})"),
            ));
        }
        if hi > self.width.min(self.height) as f64 {
            return Err(bad(
                "size_range",
                format!(
                    "rectangles up to {hi} px cannot fit into {}x{}",
                    self.width, self.height
                ),
            ));
        }
        let (ilo, ihi) = self.intensity_range;
        if !(ilo >= 0.0 && ilo <= ihi) || !ihi.is_finite() {
            return Err(bad(
                "intensity_range",
                format!("need 0 <= min <= max, got ({ilo}, {ihi})"),
            ));
        }
        if self.noise_level < 0.0 || !self.noise_level.is_finite() {
            return Err(bad(
                "noise_level",
                format!("must be finite and >= 0, got {}", self.noise_level),
            ));
        }
        Ok(())
    }
}

/// A rendered scene: a row-major pixel grid plus the ground-truth boxes that
/// were drawn into it (all class 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub gt_boxes: Vec<(BBox, u32)>,
}

impl Scene {
    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

/// Renders a scene from a spec: uniform background noise first, then each
/// rectangle in draw order (overlaps keep the brighter value). All randomness
/// comes from one ChaCha stream seeded by `spec.seed`, so the draw order is
/// part of the contract.
pub fn make_scene(spec: &SceneSpec) -> Result<Scene, SimulatorError> {
    spec.validate()?;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels: Vec<f64> = (0..w * h)
        .map(|_| {
            if spec.noise_level > 0.0 {
                rng.random_range(0.0..spec.noise_level)
            } else {
                0.0
            }
        })
        .collect();

    let mut gt_boxes = Vec::with_capacity(spec.num_rects);
    for _ in 0..spec.num_rects {
        let (lo, hi) = spec.size_range;
        let rw = rng.random_range(lo..=hi);
        let rh = rng.random_range(lo..=hi);
        let x1 = rng.random_range(0.0..=(spec.width as f64 - rw));
        let y1 = rng.random_range(0.0..=(spec.height as f64 - rh));
        let (ilo, ihi) = spec.intensity_range;
        let intensity = rng.random_range(ilo..=ihi);
        let bbox = BBox::new(x1, y1, x1 + rw, y1 + rh).expect("sampled corners are ordered");
        for py in 0..h {
            for px in 0..w {
                // a pixel belongs to the rectangle when its center does
                let c = Point::new(px as f64 + 0.5, py as f64 + 0.5);
                if bbox.contains_closed(c) {
                    let v = &mut pixels[py * w + px];
                    *v = v.max(intensity);
                }
            }
        }
        gt_boxes.push((bbox, 1));
    }

    Ok(Scene {
        width: w,
        height: h,
        pixels,
        gt_boxes,
    })
}

/// The flattened `(2r+1) x (2r+1)` pixel patch centred on `center`, row-major,
/// zero-padded outside the image. Adjacent grid locations at stride `s` share
/// `(2r+1-s)` of the `2r+1` columns, which is what makes their features — and
/// therefore their gradients through shared weights — nearly collinear.
pub fn patch_features(scene: &Scene, center: Point, radius: usize) -> Vec<f64> {
    let side = 2 * radius as i64 + 1;
    let cx = center.x.floor() as i64;
    let cy = center.y.floor() as i64;
    let mut out = Vec::with_capacity((side * side) as usize);
    for dy in -(radius as i64)..=(radius as i64) {
        for dx in -(radius as i64)..=(radius as i64) {
            let (px, py) = (cx + dx, cy + dy);
            let inside =
                px >= 0 && py >= 0 && (px as usize) < scene.width && (py as usize) < scene.height;
            out.push(if inside {
                scene.pixel(px as usize, py as usize)
            } else {
                0.0
            });
        }
    }
    out
}
