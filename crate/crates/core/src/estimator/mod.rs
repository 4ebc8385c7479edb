//! Coarse-to-fine inference: pose grid, template cache, coarse search, 6D NMS,
//! gradient refinement and multi-object occlusion reasoning.

mod grid;
mod nms;
mod occlusion;
mod pipeline;
mod refine;
mod search;
mod templates;

use serde::{Deserialize, Serialize};

use crate::geometry::Pose6D;

pub use grid::{build_pose_grid, AxisSpec, GridConfig, GridCounts, PoseGrid, DEFAULT_DISTANCE_RANGE};
pub use nms::{nms_6d, NmsRadii};
pub use occlusion::resolve_occlusion;
pub use pipeline::{estimate_scene, EstimatorOptions, PoseEstimator, DEFAULT_THRESHOLD};
pub use refine::{refine, refine_excluding, RefineOptions};
pub use search::{score_all, search_proposals};
pub use templates::{precompute_templates, Template, TemplateCache, TemplatePoint};

/// A coarse pose hypothesis. Lower score is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub pose: Pose6D,
    pub score: f64,
    pub template: Option<usize>,
}

/// A refined pose with its loss and optimizer diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub pose: Pose6D,
    /// Foreground-masked NLL of the returned pose.
    pub loss: f64,
    /// Mean change over the background-only NLL per covered pixel.
    pub pixel_loss: f64,
    /// Ranking score, `-pixel_loss`.
    pub score: f64,
    /// Ownership layer.
    pub layer: usize,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}
