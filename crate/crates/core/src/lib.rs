//! Dynamic smooth label assignment for anchor-free object detection.
//!
//! Anchor-free detectors score every grid location of a feature pyramid and
//! regress four side distances to the nearest object box. The classic
//! assignment gives each location a hard 0/1 classification label, which
//! creates two well-known problems: neighbouring locations with nearly
//! identical features receive opposite labels (so their gradients fight
//! through shared weights), and the classification score says nothing about
//! how good the regressed box actually is (so ranking at inference time is
//! miscalibrated).
//!
//! This crate implements a soft alternative and the machinery to study it:
//!
//! - [`geometry`]: boxes, side-distance vectors, IoU.
//! - [`assigner`]: hard and smooth label assignment over a feature pyramid —
//!   relaxed level intervals with linear ramps, core-zone centerness, and
//!   IoU-coupled dynamic labels.
//! - [`losses`]: focal and quality-focal classification losses, the IoU
//!   regression loss, their logit-space gradients ("G-parts"), and the
//!   combined batch objective.
//! - [`inference`]: box decoding, ranking modes, deterministic greedy NMS.
//! - [`simulator`]: a tiny, fully deterministic training testbed that makes
//!   the gradient-conflict and ranking effects measurable end to end.
//! - [`dataio`]: dataset JSON, CSV/PGM writers and readers, tool config.
//!
//! Everything numeric is `f64` and bit-reproducible: with the default
//! `parallel` feature the hot loops fan out via rayon, but all reductions
//! run over canonically ordered values, so outputs are identical with and
//! without it.

pub mod assigner;
pub mod dataio;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod parallel;
pub mod simulator;

pub use assigner::{
    assign_all, dynamic_label, smooth_label, AssignError, AssignMode, AssignerConfig,
    AssignmentTable, LocationTarget, RampStyle,
};
pub use geometry::{BBox, GeometryError, Ltrb, Point};
pub use inference::{decode_box, greedy_nms, Detection, InferenceError, NmsConfig, RankMode};
pub use losses::{total_loss, BatchLoss, LossError, LossParams};
pub use simulator::{train, RunReport, SceneSpec, SimulatorError, TrainConfig, TrainMode};
