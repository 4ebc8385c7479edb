//! Synthetic scenes, metrics, landscapes and file formats.

pub mod io;
mod landscape;
mod metrics;
mod synth;

pub use landscape::{export_landscape, read_landscape_csv, sweep_offsets, write_landscape_csv, LandscapeRow};
pub use metrics::{
    add_metric, evaluate, map_at, median, pose_error, EvalThresholds, MatchRecord, MetricsReport,
    ScoredPose,
};
pub use synth::{
    generate_scene, random_spec, reference_model, GroundTruth, OcclusionLevel, PoseSampler,
    ReferenceConfig, ReferenceModel, SceneSpec, SyntheticScene,
};
