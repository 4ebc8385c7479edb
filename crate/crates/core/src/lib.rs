//! Category-level 6D object pose estimation by render-and-compare over neural
//! feature maps.
//!
//! A cuboid neural mesh carries a unit feature vector per vertex. Rendering it at a
//! pose gives a feature map; a Gaussian model over foreground and background
//! features scores how well a pose explains an observed map. Inference searches a
//! sparse pose grid with cached templates, refines the best proposals by gradient
//! descent, and resolves mutual occlusion between objects pixel by pixel.
//!
//! - [`geometry`]: poses, camera, cuboid mesh, projection and visibility
//! - [`render`]: differentiable vertex splatting
//! - [`likelihood`]: neural mesh, background model, NLL and ownership maps
//! - [`learning`]: moving-average fitting of vertex features and background
//! - [`estimator`]: coarse search, NMS, refinement and multi-object reasoning
//! - [`harness`]: synthetic scenes, metrics, landscapes and file formats

pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod likelihood;
mod par;
pub mod render;

pub use error::{Error, Result};
pub use geometry::{
    build_cuboid_mesh, project_vertices, rotation_from_pose, visible_vertices, CameraIntrinsics,
    CuboidMesh, Pose6D, RotationMatrix,
};
pub use likelihood::{BackgroundModel, NeuralMesh, OwnershipMap};
pub use render::{render, render_pose_jacobian, FeatureMap, RenderOptions, RenderedScene};
