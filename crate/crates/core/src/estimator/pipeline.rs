use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::geometry::{CameraIntrinsics, Pose6D};
use crate::likelihood::{BackgroundModel, NeuralMesh};
use crate::render::FeatureMap;

use super::grid::{build_pose_grid, GridConfig, GridCounts};
use super::nms::{greedy_keep, NmsRadii};
use super::occlusion::resolve_occlusion;
use super::refine::{refine_excluding, RefineOptions};
use super::search::search_proposals;
use super::templates::{precompute_templates, TemplateCache};
use super::{Detection, Proposal};

/// Default acceptance threshold on the per-pixel foreground loss.
pub const DEFAULT_THRESHOLD: f64 = -0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub grid: GridConfig,
    pub top_k: usize,
    /// Suppression between coarse proposals and between refined hypotheses.
    pub nms: NmsRadii,
    /// Suppression of refined detections of the same object.
    pub dedup: NmsRadii,
    pub refine: RefineOptions,
    /// Iterations of the first refinement round over all proposals.
    pub warmup_iters: usize,
    pub occlusion_reasoning: bool,
    /// Detections need a per-pixel loss below this.
    pub threshold: f64,
}

impl EstimatorOptions {
    pub fn for_camera(cam: &CameraIntrinsics) -> Self {
        Self::with_grid(cam, GridCounts::default())
    }

    pub fn with_grid(cam: &CameraIntrinsics, counts: GridCounts) -> Self {
        Self {
            grid: GridConfig::for_camera(cam, counts),
            top_k: 10,
            nms: NmsRadii::for_camera(cam),
            dedup: NmsRadii {
                rotation: std::f64::consts::PI + 1.0,
                center: 6.0,
                distance_ratio: 1.25,
            },
            refine: RefineOptions::default(),
            warmup_iters: 20,
            occlusion_reasoning: true,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.nms.validate()?;
        self.dedup.validate()?;
        self.refine.validate()?;
        if self.top_k == 0 {
            return Err(param("top_k must be >= 1"));
        }
        if self.threshold.is_nan() {
            return Err(param("threshold must be a number"));
        }
        Ok(())
    }
}

/// Fitted model plus cached templates, reusable across scenes.
#[derive(Debug, Clone)]
pub struct PoseEstimator {
    mesh: NeuralMesh,
    bg: BackgroundModel,
    cam: CameraIntrinsics,
    opts: EstimatorOptions,
    cache: TemplateCache,
}

impl PoseEstimator {
    pub fn new(
        mesh: NeuralMesh,
        bg: BackgroundModel,
        cam: CameraIntrinsics,
        opts: EstimatorOptions,
    ) -> Result<Self> {
        opts.validate()?;
        cam.validate()?;
        if bg.channels() != mesh.channels() {
            return Err(param("background and mesh channels differ"));
        }
        let grid = build_pose_grid(&opts.grid)?;
        let cache = precompute_templates(&mesh, &grid, &cam)?;
        Ok(Self {
            mesh,
            bg,
            cam,
            opts,
            cache,
        })
    }

    pub fn mesh(&self) -> &NeuralMesh {
        &self.mesh
    }

    pub fn background(&self) -> &BackgroundModel {
        &self.bg
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.cam
    }

    pub fn options(&self) -> &EstimatorOptions {
        &self.opts
    }

    pub fn cache(&self) -> &TemplateCache {
        &self.cache
    }

    /// Changes options that do not affect the template cache.
    pub fn set_reasoning(&mut self, on: bool) {
        self.opts.occlusion_reasoning = on;
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.opts.threshold = threshold;
    }

    pub fn proposals(&self, features: &FeatureMap) -> Result<Vec<Proposal>> {
        search_proposals(features, &self.cache, &self.mesh, &self.bg, self.opts.top_k, &self.opts.nms)
    }

    fn refine_all(
        &self,
        features: &FeatureMap,
        inits: &[Pose6D],
        iters: usize,
        excludes: Option<&[Vec<bool>]>,
    ) -> Result<Vec<Detection>> {
        let mut ropts = self.opts.refine;
        ropts.max_iters = iters;
        crate::par::map_indexed(inits.len(), |i| {
            let ex = excludes.map(|e| e[i].as_slice());
            refine_excluding(features, &self.mesh, &inits[i], &self.cam, &self.bg, &ropts, ex, i)
        })
        .into_iter()
        .collect()
    }

    /// Refined hypotheses before thresholding, best first, one per object.
    pub fn candidates(&self, features: &FeatureMap) -> Result<Vec<Detection>> {
        let proposals = self.proposals(features)?;
        let inits: Vec<Pose6D> = proposals.iter().map(|p| p.pose).collect();
        let warm = self.refine_all(features, &inits, self.opts.warmup_iters, None)?;
        let warm = suppress(warm, &self.opts.nms);
        let inits: Vec<Pose6D> = warm.iter().map(|d| d.pose).collect();
        let full = self.refine_all(features, &inits, self.opts.refine.max_iters, None)?;
        Ok(suppress(full, &self.opts.dedup))
    }

    /// Full pipeline: search, refine, occlusion reasoning, re-refinement, threshold.
    pub fn estimate(&self, features: &FeatureMap) -> Result<Vec<Detection>> {
        let mut dets: Vec<Detection> = self
            .candidates(features)?
            .into_iter()
            .filter(|d| d.pixel_loss < self.opts.threshold)
            .collect();
        if self.opts.occlusion_reasoning && dets.len() >= 2 {
            let z = resolve_occlusion(features, &[&self.mesh], &dets, &self.cam, &self.bg)?;
            let excludes: Vec<Vec<bool>> = (0..dets.len())
                .map(|k| {
                    (0..features.num_pixels())
                        .map(|i| z.owner(i).is_some_and(|o| o != k))
                        .collect()
                })
                .collect();
            let inits: Vec<Pose6D> = dets.iter().map(|d| d.pose).collect();
            dets = self.refine_all(features, &inits, self.opts.refine.max_iters, Some(&excludes))?;
            dets.retain(|d| d.pixel_loss < self.opts.threshold);
        }
        dets.sort_by(|a, b| a.loss.total_cmp(&b.loss));
        Ok(dets)
    }
}

fn suppress(mut dets: Vec<Detection>, radii: &NmsRadii) -> Vec<Detection> {
    dets.sort_by(|a, b| a.loss.total_cmp(&b.loss));
    let poses: Vec<Pose6D> = dets.iter().map(|d| d.pose).collect();
    let keep = greedy_keep(&poses, radii, usize::MAX);
    keep.into_iter().map(|i| dets[i]).collect()
}

/// One-shot pipeline; builds the template cache on every call.
pub fn estimate_scene(
    features: &FeatureMap,
    mesh: &NeuralMesh,
    cam: &CameraIntrinsics,
    bg: &BackgroundModel,
    opts: &EstimatorOptions,
) -> Result<Vec<Detection>> {
    PoseEstimator::new(mesh.clone(), bg.clone(), *cam, *opts)?.estimate(features)
}
