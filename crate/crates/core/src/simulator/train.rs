//! The gradient-descent training loop of the testbed.
//!
//! The model is deliberately tiny: one linear map shared by every grid
//! location, from the local pixel patch (plus a bias input) to five heads —
//! a classification logit squashed through a sigmoid and four side distances
//! through an exponential link, which keeps predicted boxes valid by
//! construction. What changes between runs is only the classification
//! target, so any difference in the traces is attributable to the label
//! scheme.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{boundary_gap_metric, gradient_conflict, ranking_correlation_metric};
use super::scene::{patch_features, Scene};
use super::SimulatorError;
use crate::assigner::{assign_all, dynamic_label, AssignMode, AssignerConfig, LocationTarget};
use crate::geometry::Ltrb;
use crate::inference::{decode_box, Detection};
use crate::losses::{
    focal_gpart, focal_loss, gfl_gpart, gfl_loss, iou_loss_with_grad, LossParams, PROB_EPS,
};
use crate::parallel;

/// Classification score below which a location does not count as a
/// detection when the run computes its ranking correlation.
pub const DETECTION_SCORE_FLOOR: f64 = 0.05;

/// Locations per gradient-accumulation chunk. Chunks are reduced in index
/// order, so the result is bit-identical with and without the `parallel`
/// feature.
const GRAD_CHUNK: usize = 64;

/// Number of model heads: classification logit plus four side distances.
const HEADS: usize = 5;

/// Which label scheme drives the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Focal loss against hard 0/1 interval labels.
    FlHard,
    /// Quality-focal loss against the static smooth labels.
    GflSmoothStatic,
    /// Quality-focal loss against smooth labels re-coupled with the live
    /// box IoU every iteration.
    GflDslaDynamic,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [
        TrainMode::FlHard,
        TrainMode::GflSmoothStatic,
        TrainMode::GflDslaDynamic,
    ];

    /// The assignment rule this label scheme is built on.
    pub fn assign_mode(self) -> AssignMode {
        match self {
            TrainMode::FlHard => AssignMode::FcosHard,
            TrainMode::GflSmoothStatic | TrainMode::GflDslaDynamic => AssignMode::DslaSmooth,
        }
    }

    /// Stable kebab-case name, also used in report file names.
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::FlHard => "fl-hard",
            TrainMode::GflSmoothStatic => "gfl-smooth-static",
            TrainMode::GflDslaDynamic => "gfl-dsla-dynamic",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown mode `{s}` (expected fl-hard, gfl-smooth-static or gfl-dsla-dynamic)"
                )
            })
    }
}

/// Everything a training run depends on besides the scene itself.
///
/// The `assigner.mode` field is overridden by [`TrainConfig::mode`]; the
/// label scheme decides which assignment rule applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Pixel radius of the square patch each location sees; the feature
    /// vector is the `(2r+1)^2` patch plus one constant bias input.
    pub patch_radius: usize,
    /// Seeds the weight initialization (uniform in `[-1e-3, 1e-3)`).
    pub seed: u64,
    pub loss: LossParams,
    pub assigner: AssignerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::GflDslaDynamic,
            learning_rate: 0.1,
            iterations: 2000,
            patch_radius: 12,
            seed: 42,
            loss: LossParams::default(),
            assigner: AssignerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |field: &'static str, reason: String| SimulatorError::InvalidTrainConfig {
            field,
            reason,
        };
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(bad(
                "learning_rate",
                format!("must be finite and > 0, got {}", self.learning_rate),
            ));
        }
        if self.patch_radius > 256 {
            return Err(bad(
                "patch_radius",
                format!("must be <= 256, got {}", self.patch_radius),
            ));
        }
        self.loss.validate()?;
        self.assigner.validate()?;
        Ok(())
    }
}

/// Outcome of one training run. Equal scenes and configs produce equal
/// reports, bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: TrainMode,
    pub iterations: usize,
    /// Total loss of a final forward pass after the last update.
    pub final_loss: f64,
    /// Mean prediction/target step mismatch across assignment boundaries at
    /// the final state; see [`boundary_gap_metric`].
    pub boundary_gap: f64,
    /// Spearman correlation between final detection scores and achieved IoU,
    /// or `None` when fewer than two detections overlap any ground truth.
    pub ranking_correlation: Option<f64>,
    /// Locations with a positive static label.
    pub positives: usize,
    /// Total loss per iteration, evaluated before that iteration's update.
    pub loss_trace: Vec<f64>,
    /// Mean adjacent-pair gradient conflict per iteration; see
    /// [`gradient_conflict`].
    pub conflict_trace: Vec<f64>,
    /// Mean classification target over positive locations per iteration.
    /// Static for the hard and smooth schemes; for the dynamic scheme it
    /// rises as predicted boxes improve.
    pub positive_target_trace: Vec<f64>,
}

/// Per-location model outputs for one forward pass.
struct Forward {
    prob: Vec<f64>,
    dist: Vec<Ltrb>,
}

/// Loss and gradient of one forward pass against fixed classification
/// targets.
struct Evaluation {
    loss: f64,
    /// Unscaled per-location classification G-parts.
    cls_gparts: Vec<f64>,
    /// `d loss / d weights`, present only when requested.
    grad: Option<Vec<f64>>,
}

struct Model {
    /// Features per head, including the bias input.
    dim: usize,
    /// Head-major layout: `[cls | l | t | r | b]`, each `dim` wide.
    weights: Vec<f64>,
}

impl Model {
    fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..HEADS * dim)
            .map(|_| rng.random_range(-1e-3..1e-3))
            .collect();
        Self { dim, weights }
    }

    fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.dim..(h + 1) * self.dim]
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), x.len());
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Per-location model inputs: the centred pixel patch mapped through the
/// fixed affine transform `(v - 0.5) / side`, plus a constant bias input.
/// The transform recentres intensities and bounds the patch norm roughly
/// independently of the patch size; without it the shared-weight kernel is
/// so ill-conditioned that plain gradient descent oscillates at any usable
/// learning rate.
fn build_features(scene: &Scene, targets: &[LocationTarget], radius: usize) -> Vec<Vec<f64>> {
    let side = (2 * radius + 1) as f64;
    parallel::map_slice(targets, |t| {
        let mut x = patch_features(scene, t.location, radius);
        for v in &mut x {
            *v = (*v - 0.5) / side;
        }
        x.push(1.0);
        x
    })
}

/// Runs the model over every location. Fails with a human-readable reason
/// when any head output is non-finite, which the caller reports as
/// divergence.
fn forward(model: &Model, features: &[Vec<f64>]) -> Result<Forward, String> {
    let outputs = parallel::map_slice(features, |x| {
        let z0 = dot(model.head(0), x);
        let d = Ltrb {
            l: dot(model.head(1), x).exp(),
            t: dot(model.head(2), x).exp(),
            r: dot(model.head(3), x).exp(),
            b: dot(model.head(4), x).exp(),
        };
        let prob = (1.0 / (1.0 + (-z0).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS);
        (prob, d)
    });
    let mut prob = Vec::with_capacity(outputs.len());
    let mut dist = Vec::with_capacity(outputs.len());
    for (p, d) in outputs {
        if !p.is_finite() {
            return Err("classification logit is non-finite".into());
        }
        if !(d.l.is_finite() && d.t.is_finite() && d.r.is_finite() && d.b.is_finite()) {
            return Err("regression head overflowed".into());
        }
        prob.push(p);
        dist.push(d);
    }
    Ok(Forward { prob, dist })
}

/// Classification target per location for the given scheme. Hard and smooth
/// schemes read the static label; the dynamic scheme re-couples it with the
/// IoU of the current box prediction. Targets are treated as constants by
/// the gradient (they are detached, as in real training).
fn class_targets(mode: TrainMode, targets: &[LocationTarget], fwd: &Forward) -> Vec<f64> {
    match mode {
        TrainMode::FlHard | TrainMode::GflSmoothStatic => {
            targets.iter().map(|t| t.label_s).collect()
        }
        TrainMode::GflDslaDynamic => parallel::map_indexed(targets.len(), |i| {
            let t = &targets[i];
            match &t.matched {
                Some(m) if t.is_positive() => {
                    // both boxes decode around the same location, so the
                    // distances carry the full geometry
                    let pred = decode_box(t.location, fwd.dist[i]).expect("positive distances");
                    let gt = decode_box(t.location, m.regression).expect("positive distances");
                    dynamic_label(t.label_s, &pred, &gt)
                }
                _ => 0.0,
            }
        }),
    }
}

/// Total loss (and optionally its weight gradient) of one forward pass
/// against fixed classification targets `y`. The objective matches
/// [`crate::losses::total_loss`]: `lambda_cls/N_pos * sum(cls) +
/// lambda_reg/N_pos * sum(reg over positives)`.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    mode: TrainMode,
    model: &Model,
    features: &[Vec<f64>],
    targets: &[LocationTarget],
    y: &[f64],
    fwd: &Forward,
    params: &LossParams,
    n_pos: usize,
    with_grad: bool,
) -> Result<Evaluation, String> {
    // cls loss, reg loss, cls G-part, reg gradient already chained through
    // the exponential link (d = exp(z) so dL/dz = dL/dd * d)
    let per_loc = parallel::map_indexed(targets.len(), |i| {
        let t = &targets[i];
        let p = fwd.prob[i];
        let cls = match mode {
            TrainMode::FlHard => focal_loss(p, t.is_positive(), params),
            _ => gfl_loss(p, y[i], params),
        }
        .map_err(|e| e.to_string())?;
        let gpart = match mode {
            TrainMode::FlHard => focal_gpart(p, t.is_positive(), params),
            _ => gfl_gpart(p, y[i], params),
        }
        .map_err(|e| e.to_string())?;
        let (reg, reg_grad) = match (&t.matched, t.is_positive()) {
            (Some(m), true) => {
                let d = fwd.dist[i];
                let (loss, g) = iou_loss_with_grad(d, m.regression).map_err(|e| e.to_string())?;
                (loss, [g[0] * d.l, g[1] * d.t, g[2] * d.r, g[3] * d.b])
            }
            _ => (0.0, [0.0; 4]),
        };
        Ok::<_, String>((cls, reg, gpart, reg_grad))
    });

    let n = targets.len();
    let mut cls_terms = Vec::with_capacity(n);
    let mut reg_terms = Vec::with_capacity(n);
    let mut cls_gparts = Vec::with_capacity(n);
    let mut coeffs: Vec<[f64; HEADS]> = Vec::with_capacity(n);
    let cls_scale = params.lambda_cls / n_pos as f64;
    let reg_scale = params.lambda_reg / n_pos as f64;
    for item in per_loc {
        let (cls, reg, gpart, rg) = item?;
        cls_terms.push(cls);
        reg_terms.push(reg);
        cls_gparts.push(gpart);
        coeffs.push([
            cls_scale * gpart,
            reg_scale * rg[0],
            reg_scale * rg[1],
            reg_scale * rg[2],
            reg_scale * rg[3],
        ]);
    }
    let loss = cls_scale * parallel::pairwise_sum(&cls_terms)
        + reg_scale * parallel::pairwise_sum(&reg_terms);
    if !loss.is_finite() {
        return Err("total loss is non-finite".into());
    }

    let grad = with_grad.then(|| {
        let dim = model.dim;
        let chunks = n.div_ceil(GRAD_CHUNK).max(1);
        let partials = parallel::map_indexed(chunks, |c| {
            let lo = c * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(n);
            let mut part = vec![0.0; HEADS * dim];
            for i in lo..hi {
                for (h, &coeff) in coeffs[i].iter().enumerate() {
                    if coeff != 0.0 {
                        let row = &mut part[h * dim..(h + 1) * dim];
                        for (pj, xj) in row.iter_mut().zip(&features[i]) {
                            *pj += coeff * xj;
                        }
                    }
                }
            }
            part
        });
        // reduce in chunk order: the sum structure never depends on threads
        let mut grad = vec![0.0; HEADS * dim];
        for part in partials {
            for (g, p) in grad.iter_mut().zip(&part) {
                *g += p;
            }
        }
        grad
    });

    Ok(Evaluation {
        loss,
        cls_gparts,
        grad,
    })
}

/// Mean classification target over positive locations (0 when there are no
/// positives).
fn mean_positive_target(targets: &[LocationTarget], y: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, &v) in targets.iter().zip(y) {
        if t.is_positive() {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Trains the per-patch linear model on one scene and reports traces plus
/// final-state metrics. Fully deterministic: equal inputs give bit-identical
/// reports (independently of the `parallel` feature).
///
/// With `iterations == 0` the report describes the untrained model, which
/// is a useful baseline.
pub fn train(scene: &Scene, config: &TrainConfig) -> Result<RunReport, SimulatorError> {
    config.validate()?;
    let mut assigner = config.assigner.clone();
    assigner.mode = config.mode.assign_mode();
    let table = assign_all(
        &scene.gt_boxes,
        (scene.width as u32, scene.height as u32),
        &assigner,
    )?;
    let targets: Vec<LocationTarget> = table.locations().cloned().collect();
    let pairs = table.adjacent_pairs();
    let positives = table.positives();
    let n_pos = positives.max(1);

    let features = build_features(scene, &targets, config.patch_radius);
    let dim = features.first().map_or(1, Vec::len);
    let mut model = Model::init(dim, config.seed);

    let diverged =
        |iteration: usize, reason: String| SimulatorError::Diverged { iteration, reason };
    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut conflict_trace = Vec::with_capacity(config.iterations);
    let mut positive_target_trace = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let fwd = forward(&model, &features).map_err(|r| diverged(iteration, r))?;
        let y = class_targets(config.mode, &targets, &fwd);
        let eval = evaluate(
            config.mode,
            &model,
            &features,
            &targets,
            &y,
            &fwd,
            &config.loss,
            n_pos,
            true,
        )
        .map_err(|r| diverged(iteration, r))?;

        loss_trace.push(eval.loss);
        conflict_trace.push(gradient_conflict(&pairs, &eval.cls_gparts));
        positive_target_trace.push(mean_positive_target(&targets, &y));

        let grad = eval.grad.expect("gradient was requested");
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }

    // one extra forward pass at the final weights for the report metrics
    let fwd = forward(&model, &features).map_err(|r| diverged(config.iterations, r))?;
    let y = class_targets(config.mode, &targets, &fwd);
    let eval = evaluate(
        config.mode,
        &model,
        &features,
        &targets,
        &y,
        &fwd,
        &config.loss,
        n_pos,
        false,
    )
    .map_err(|r| diverged(config.iterations, r))?;
    let boundary_gap = boundary_gap_metric(&table, &y, &fwd.prob);

    let mut detections = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if fwd.prob[i] >= DETECTION_SCORE_FLOOR {
            let bbox = decode_box(t.location, fwd.dist[i])
                .map_err(|e| diverged(config.iterations, e.to_string()))?;
            detections.push(Detection {
                bbox,
                class_id: 1,
                score: fwd.prob[i],
                quality: None,
                level: t.level,
                row: t.row,
                col: t.col,
            });
        }
    }
    let ranking_correlation = match ranking_correlation_metric(&detections, &scene.gt_boxes) {
        Ok(v) => Some(v),
        Err(SimulatorError::NotEnoughMatches { .. }) => None,
        Err(e) => return Err(e),
    };

    Ok(RunReport {
        mode: config.mode,
        iterations: config.iterations,
        final_loss: eval.loss,
        boundary_gap,
        ranking_correlation,
        positives,
        loss_trace,
        conflict_trace,
        positive_target_trace,
    })
}
