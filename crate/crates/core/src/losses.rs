//! Classification and regression losses with analytic logit-space gradients.
//!
//! The classification side works on probabilities `p = sigmoid(z)` but every
//! gradient here is reported with respect to the logit `z` — the "G-part"
//! `d(loss)/dz` — because that is the quantity that actually flows into
//! shared backbone weights and therefore the quantity whose sign conflicts
//! between neighbouring locations matter. Focal loss covers the hard-label
//! baseline; a quality-focal variant (`|y - p|^beta` times binary
//! cross-entropy) covers soft targets `y` in `[0, 1]`. Box regression uses
//! the IoU log-loss over side distances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assigner::LocationTarget;
use crate::geometry::Ltrb;
use crate::parallel;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any
/// logarithm so losses stay finite all the way to saturated predictions.
pub const PROB_EPS: f64 = 1e-12;

/// Floor inside the IoU logarithm.
pub const IOU_EPS: f64 = 1e-12;

/// Soft-target values used for gradient curve dumps when the caller does not
/// ask for specific ones.
pub const DEFAULT_GFL_TARGETS: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid loss parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("probability {value} outside the open interval (0, 1)")]
    ProbabilityOutOfRange { value: f64 },
    #[error("soft target {value} outside [0, 1]")]
    TargetOutOfRange { value: f64 },
    #[error("side distances must all be positive, got min {min}")]
    NonPositiveDistances { min: f64 },
    #[error("got {predictions} predictions for {targets} locations")]
    LengthMismatch { targets: usize, predictions: usize },
}

/// Shared loss hyper-parameters. Fields omitted from a JSON config fall
/// back to their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    /// Focal-loss class balance in (0, 1); weights positives by `alpha`.
    pub alpha: f64,
    /// Focal-loss focusing exponent, >= 0.
    pub gamma: f64,
    /// Quality-focal modulation exponent `|y - p|^beta`, >= 0.
    pub beta: f64,
    /// Weight of the classification term in the total loss.
    pub lambda_cls: f64,
    /// Weight of the regression term in the total loss.
    pub lambda_reg: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            beta: 2.0,
            lambda_cls: 1.0,
            lambda_reg: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |field: &'static str, reason: String| LossError::InvalidParams { field, reason };
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad(
                "alpha",
                format!("must lie in (0, 1), got {}", self.alpha),
            ));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(bad(
                "gamma",
                format!("must be finite and >= 0, got {}", self.gamma),
            ));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(bad(
                "beta",
                format!("must be finite and >= 0, got {}", self.beta),
            ));
        }
        if self.lambda_cls <= 0.0 || !self.lambda_cls.is_finite() {
            return Err(bad(
                "lambda_cls",
                format!("must be finite and > 0, got {}", self.lambda_cls),
            ));
        }
        if self.lambda_reg <= 0.0 || !self.lambda_reg.is_finite() {
            return Err(bad(
                "lambda_reg",
                format!("must be finite and > 0, got {}", self.lambda_reg),
            ));
        }
        Ok(())
    }
}

fn checked_prob(p: f64) -> Result<f64, LossError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LossError::ProbabilityOutOfRange { value: p });
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

fn checked_target(y: f64) -> Result<f64, LossError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(LossError::TargetOutOfRange { value: y });
    }
    Ok(y)
}

/// Focal loss of a single prediction against a hard binary label:
/// `-alpha (1-p)^gamma ln p` for positives, `-(1-alpha) p^gamma ln(1-p)` for
/// negatives.
pub fn focal_loss(p: f64, positive: bool, params: &LossParams) -> Result<f64, LossError> {
    params.validate()?;
    let p = checked_prob(p)?;
    Ok(if positive {
        -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
    } else {
        -(1.0 - params.alpha) * p.powf(params.gamma) * (1.0 - p).ln()
    })
}

/// Logit-space gradient of [`focal_loss`]: `d(loss)/dz` at `p = sigmoid(z)`.
/// Negative for positives (the logit is pushed up), positive for negatives.
pub fn focal_gpart(p: f64, positive: bool, params: &LossParams) -> Result<f64, LossError> {
    params.validate()?;
    let p = checked_prob(p)?;
    let (alpha, gamma) = (params.alpha, params.gamma);
    let logistic = p * (1.0 - p);
    Ok(if positive {
        let focus = alpha * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln();
        let ce = alpha * (1.0 - p).powf(gamma) / p;
        (focus - ce) * logistic
    } else {
        let focus = -(1.0 - alpha) * gamma * p.powf(gamma - 1.0) * (1.0 - p).ln();
        let ce = (1.0 - alpha) * p.powf(gamma) / (1.0 - p);
        (focus + ce) * logistic
    })
}

/// Quality-focal loss against a soft target `y` in `[0, 1]`:
/// `|y - p|^beta * BCE(p, y)`.
pub fn gfl_loss(p: f64, y: f64, params: &LossParams) -> Result<f64, LossError> {
    params.validate()?;
    let p = checked_prob(p)?;
    let y = checked_target(y)?;
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    Ok((y - p).abs().powf(params.beta) * bce)
}

/// Logit-space gradient of [`gfl_loss`]. At `y == p` both factors of the
/// product rule carry a `(y - p)` power (for `beta >= 1`), so the gradient is
/// exactly zero there.
pub fn gfl_gpart(p: f64, y: f64, params: &LossParams) -> Result<f64, LossError> {
    params.validate()?;
    let p = checked_prob(p)?;
    let y = checked_target(y)?;
    let diff = p - y;
    if diff == 0.0 {
        return Ok(0.0);
    }
    let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    let bce_dp = (1.0 - y) / (1.0 - p) - y / p;
    let beta = params.beta;
    let modulation =
        beta * diff.abs().powf(beta - 1.0) * diff.signum() * bce + diff.abs().powf(beta) * bce_dp;
    Ok(modulation * p * (1.0 - p))
}

/// IoU log-loss between predicted and target side distances, both measured
/// from the same location: `-ln(IoU)` of the two decoded boxes. All eight
/// distances must be positive so both boxes contain the location and the IoU
/// is bounded away from zero.
pub fn iou_loss(pred: Ltrb, target: Ltrb) -> Result<f64, LossError> {
    Ok(iou_loss_with_grad(pred, target)?.0)
}

/// [`iou_loss`] plus its gradient with respect to the four predicted
/// distances `(l, t, r, b)`.
pub fn iou_loss_with_grad(pred: Ltrb, target: Ltrb) -> Result<(f64, [f64; 4]), LossError> {
    if !pred.all_positive() {
        return Err(LossError::NonPositiveDistances { min: pred.min() });
    }
    if !target.all_positive() {
        return Err(LossError::NonPositiveDistances { min: target.min() });
    }
    // decode both boxes around the origin; the common location cancels
    let wi = pred.l.min(target.l) + pred.r.min(target.r);
    let hi = pred.t.min(target.t) + pred.b.min(target.b);
    let inter = wi * hi;
    let area_p = (pred.l + pred.r) * (pred.t + pred.b);
    let area_t = (target.l + target.r) * (target.t + target.b);
    let union = area_p + area_t - inter;
    let iou = (inter / union).max(IOU_EPS);
    let loss = -iou.ln();

    // d(-ln(I/U))/dx = dU/dx / U - dI/dx / I, with dI picking up the min()
    // switches and dU = d(area_p) - dI
    let grad = {
        let sl = if pred.l < target.l { 1.0 } else { 0.0 };
        let st = if pred.t < target.t { 1.0 } else { 0.0 };
        let sr = if pred.r < target.r { 1.0 } else { 0.0 };
        let sb = if pred.b < target.b { 1.0 } else { 0.0 };
        let dap_dw = pred.t + pred.b; // d(area_p)/dl = d(area_p)/dr
        let dap_dh = pred.l + pred.r;
        let gl = (dap_dw - hi * sl) / union - hi * sl / inter;
        let gr = (dap_dw - hi * sr) / union - hi * sr / inter;
        let gt = (dap_dh - wi * st) / union - wi * st / inter;
        let gb = (dap_dh - wi * sb) / union - wi * sb / inter;
        [gl, gt, gr, gb]
    };
    Ok((loss, grad))
}

/// Result of [`total_loss`] with the pieces callers need for reporting and
/// gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// `lambda_cls/N_pos * sum(cls) + lambda_reg/N_pos * sum(reg)`.
    pub total: f64,
    /// Unweighted classification sum over all locations.
    pub cls_sum: f64,
    /// Unweighted regression sum over positive locations.
    pub reg_sum: f64,
    /// Number of positive locations, clamped to at least 1 for normalization.
    pub n_pos: usize,
    /// Per-location quality-focal G-parts (`d cls-loss / d logit`, unscaled),
    /// in the same order as the inputs.
    pub cls_gparts: Vec<f64>,
}

/// Batch objective over one image: quality-focal classification against
/// `label_d` at every location plus IoU regression at positive locations,
/// both normalized by the positive count (clamped to >= 1 so an all-negative
/// batch still has a well-defined loss).
pub fn total_loss(
    targets: &[LocationTarget],
    predictions: &[(f64, Ltrb)],
    params: &LossParams,
) -> Result<BatchLoss, LossError> {
    params.validate()?;
    if targets.len() != predictions.len() {
        return Err(LossError::LengthMismatch {
            targets: targets.len(),
            predictions: predictions.len(),
        });
    }
    let per_loc = parallel::map_indexed(targets.len(), |i| {
        let t = &targets[i];
        let (p, pred_box) = predictions[i];
        let cls = gfl_loss(p, t.label_d, params)?;
        let gpart = gfl_gpart(p, t.label_d, params)?;
        let reg = match (&t.matched, t.is_positive()) {
            (Some(m), true) => iou_loss(pred_box, m.regression)?,
            _ => 0.0,
        };
        Ok::<(f64, f64, f64), LossError>((cls, reg, gpart))
    });
    let mut cls_terms = Vec::with_capacity(targets.len());
    let mut reg_terms = Vec::with_capacity(targets.len());
    let mut cls_gparts = Vec::with_capacity(targets.len());
    for item in per_loc {
        let (cls, reg, gpart) = item?;
        cls_terms.push(cls);
        reg_terms.push(reg);
        cls_gparts.push(gpart);
    }
    let n_pos = targets.iter().filter(|t| t.is_positive()).count().max(1);
    let cls_sum = parallel::pairwise_sum(&cls_terms);
    let reg_sum = parallel::pairwise_sum(&reg_terms);
    let total =
        params.lambda_cls / n_pos as f64 * cls_sum + params.lambda_reg / n_pos as f64 * reg_sum;
    Ok(BatchLoss {
        total,
        cls_sum,
        reg_sum,
        n_pos,
        cls_gparts,
    })
}

/// One row of a gradient curve dump: both focal G-parts and one quality-focal
/// G-part per requested target.
#[derive(Debug, Clone, PartialEq)]
pub struct GPoint {
    pub p: f64,
    /// Positive-sample focal G-part at this `p` (always <= 0).
    pub g_a: f64,
    /// Negative-sample focal G-part at this `p` (always >= 0).
    pub g_b: f64,
    /// Quality-focal G-parts, aligned with the `y_values` of the curve set.
    pub g_gfl: Vec<f64>,
}

/// Gradient curves over a probability grid, ready for serialization.
#[derive(Debug, Clone, PartialEq)]
pub struct GPartCurves {
    pub y_values: Vec<f64>,
    pub points: Vec<GPoint>,
}

/// The standard dump grid: p = 0.01, 0.02, ..., 0.99.
pub fn default_probability_grid() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

/// Evaluates focal and quality-focal G-parts over a probability grid, one
/// quality-focal column per entry of `y_values`.
pub fn gpart_curves(
    grid: &[f64],
    y_values: &[f64],
    params: &LossParams,
) -> Result<GPartCurves, LossError> {
    params.validate()?;
    for &y in y_values {
        checked_target(y)?;
    }
    let points = grid
        .iter()
        .map(|&p| {
            let g_gfl = y_values
                .iter()
                .map(|&y| gfl_gpart(p, y, params))
                .collect::<Result<Vec<f64>, LossError>>()?;
            Ok(GPoint {
                p,
                g_a: focal_gpart(p, true, params)?,
                g_b: focal_gpart(p, false, params)?,
                g_gfl,
            })
        })
        .collect::<Result<Vec<GPoint>, LossError>>()?;
    Ok(GPartCurves {
        y_values: y_values.to_vec(),
        points,
    })
}
