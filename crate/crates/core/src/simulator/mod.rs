//! A small, fully deterministic training testbed.
//!
//! Real detectors hide assignment effects behind millions of weights; this
//! simulator strips everything else away. Scenes are bright axis-aligned
//! rectangles on a noisy background, the "network" is one shared linear map
//! over a local pixel patch per grid location (a classification logit plus
//! four side distances through an exponential link), and training is plain
//! gradient descent. That is enough for the phenomena of interest to show
//! up: neighbouring locations see almost the same patch, so hard 0/1 labels
//! force opposing gradients through shared weights, while smooth and
//! IoU-coupled targets do not.
//!
//! Everything is seeded and single-precision-free: the same spec and config
//! reproduce bit-identical scenes, traces, and reports.

mod metrics;
mod scene;
mod train;

pub use metrics::{boundary_gap_metric, gradient_conflict, ranking_correlation_metric, spearman};
pub use scene::{make_scene, patch_features, Scene, SceneSpec};
pub use train::{train, RunReport, TrainConfig, TrainMode};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimulatorError {
    #[error("invalid scene spec `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("invalid train config `{field}`: {reason}")]
    InvalidTrainConfig { field: &'static str, reason: String },
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error("ranking correlation needs at least 2 matched detections, found {found}")]
    NotEnoughMatches { found: usize },
    #[error(transparent)]
    Assign(#[from] crate::assigner::AssignError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}
