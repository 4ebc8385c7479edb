//! Browser demo. Renders the reference model at a chosen pose, generates a
//! synthetic scene and runs the estimator on it, and sweeps the loss through the
//! ground-truth pose.
//!
//! [`Demo`] is plain Rust so it can be tested natively; the `wasm` module wraps it
//! with `wasm-bindgen` when compiled for `wasm32`.

use meshpose::estimator::{EstimatorOptions, GridCounts, PoseEstimator};
use meshpose::harness::{
    add_metric, export_landscape, generate_scene, pose_error, random_spec, reference_model, OcclusionLevel,
    PoseSampler, ReferenceConfig, ReferenceModel, SyntheticScene,
};
use meshpose::{render, CameraIntrinsics, FeatureMap, Pose6D, RenderOptions, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const WIDTH: usize = 64;
pub const HEIGHT: usize = 64;
pub const FOCAL_LENGTH: f64 = 100.0;
const NOISE: f64 = 0.1;

/// One detection with its errors against the closest ground-truth object.
#[derive(Debug, Clone, Serialize)]
pub struct DetectionView {
    pub pose: Pose6D,
    pub score: f64,
    pub pose_error: Option<f64>,
    pub add: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sweep {
    pub dimension: String,
    pub offsets: Vec<f64>,
    pub nll: Vec<f64>,
}

pub struct Demo {
    model: ReferenceModel,
    cam: CameraIntrinsics,
    estimator: PoseEstimator,
    palette: [Vec<f64>; 3],
    scene: Option<SyntheticScene>,
}

impl Demo {
    pub fn new(seed: u64, grid: &str) -> Result<Self> {
        let model = reference_model(&ReferenceConfig::default(), seed)?;
        let cam = CameraIntrinsics::new(FOCAL_LENGTH, WIDTH, HEIGHT)?;
        let counts: GridCounts = grid.parse()?;
        let mut opts = EstimatorOptions::with_grid(&cam, counts);
        opts.top_k = 5;
        let estimator = PoseEstimator::new(model.mesh.clone(), model.background.clone(), cam, opts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let c = model.mesh.channels();
        let palette = std::array::from_fn(|_| {
            let v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        });
        Ok(Self {
            model,
            cam,
            estimator,
            palette,
            scene: None,
        })
    }

    /// RGBA image of the model rendered over a black background.
    pub fn render_rgba(&self, pose: Pose6D) -> Result<Vec<u8>> {
        let r = render(&self.model.mesh, &pose, &self.cam, &RenderOptions::default())?;
        Ok(self.to_rgba(r.features(), Some(r.mask())))
    }

    /// Generates a new scene and returns its RGBA image.
    pub fn new_scene(&mut self, seed: u64, level: u8, objects: usize) -> Result<Vec<u8>> {
        let level = OcclusionLevel::from_index(level)?;
        let sampler = PoseSampler::for_camera(&self.cam);
        let mut last = None;
        for attempt in 0..10u64 {
            let s = seed.wrapping_add(attempt << 32);
            let spec = random_spec(&sampler, objects, level, NOISE, s)?;
            match generate_scene(&spec, &self.model.mesh, &self.model.background, &self.cam, s) {
                Ok(scene) => {
                    let rgba = self.to_rgba(&scene.features, None);
                    self.scene = Some(scene);
                    return Ok(rgba);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    pub fn ground_truth(&self) -> Vec<Pose6D> {
        self.scene
            .iter()
            .flat_map(|s| s.ground_truth.iter().map(|g| g.pose))
            .collect()
    }

    /// Runs the estimator on the current scene. Best score first.
    pub fn estimate(&self) -> Result<Vec<DetectionView>> {
        let Some(scene) = &self.scene else {
            return Ok(Vec::new());
        };
        let mut dets = self.estimator.estimate(&scene.features)?;
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let geometry = self.model.mesh.geometry();
        dets.into_iter()
            .map(|d| {
                let mut best: Option<(f64, f64)> = None;
                for gt in &scene.ground_truth {
                    let e = pose_error(d.pose.rotation().matrix(), gt.pose.rotation().matrix())?;
                    if best.is_none_or(|(b, _)| e < b) {
                        best = Some((e, add_metric(geometry, &d.pose, &gt.pose, &self.cam)));
                    }
                }
                Ok(DetectionView {
                    pose: d.pose,
                    score: d.score,
                    pose_error: best.map(|b| b.0),
                    add: best.map(|b| b.1),
                })
            })
            .collect()
    }

    /// Loss sweeps through the first ground-truth pose, one per pose dimension.
    pub fn sweep(&self, steps: usize) -> Result<Vec<Sweep>> {
        let (Some(scene), Some(center)) = (&self.scene, self.ground_truth().first().copied()) else {
            return Ok(Vec::new());
        };
        let rows = export_landscape(
            &scene.features,
            &self.model.mesh,
            &self.model.background,
            &self.cam,
            &center,
            [1.5, 1.5, 1.5, 15.0, 15.0, 1.0],
            steps,
        )?;
        let mut out: Vec<Sweep> = Vec::new();
        for row in rows {
            match out.last_mut() {
                Some(s) if s.dimension == row.dimension => {
                    s.offsets.push(row.offset);
                    s.nll.push(row.nll);
                }
                _ => out.push(Sweep {
                    dimension: row.dimension,
                    offsets: vec![row.offset],
                    nll: vec![row.nll],
                }),
            }
        }
        Ok(out)
    }

    /// Projects each feature onto three fixed directions to get a color.
    fn to_rgba(&self, features: &FeatureMap, mask: Option<&[bool]>) -> Vec<u8> {
        let mut out = Vec::with_capacity(features.num_pixels() * 4);
        for (i, f) in features.pixels().enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                out.extend_from_slice(&[0, 0, 0, 255]);
                continue;
            }
            for p in &self.palette {
                let dot: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
                out.push(((0.5 + 2.5 * dot).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    use super::Pose6D;

    fn js(e: meshpose::Error) -> JsError {
        JsError::new(&e.to_string())
    }

    #[wasm_bindgen]
    pub struct Demo(super::Demo);

    #[wasm_bindgen]
    impl Demo {
        #[wasm_bindgen(constructor)]
        pub fn new(seed: u32, grid: &str) -> Result<Demo, JsError> {
            super::Demo::new(seed as u64, grid).map(Demo).map_err(js)
        }

        pub fn width(&self) -> usize {
            super::WIDTH
        }

        pub fn height(&self) -> usize {
            super::HEIGHT
        }

        #[allow(clippy::too_many_arguments)]
        pub fn render(&self, azimuth: f64, elevation: f64, theta: f64, u: f64, v: f64, d: f64) -> Result<Vec<u8>, JsError> {
            self.0
                .render_rgba(Pose6D::new(azimuth, elevation, theta, u, v, d))
                .map_err(js)
        }

        pub fn new_scene(&mut self, seed: u32, level: u8, objects: usize) -> Result<Vec<u8>, JsError> {
            self.0.new_scene(seed as u64, level, objects).map_err(js)
        }

        /// Ground-truth poses as JSON.
        pub fn ground_truth(&self) -> String {
            serde_json::to_string(&self.0.ground_truth()).unwrap_or_default()
        }

        /// Detections as JSON.
        pub fn estimate(&self) -> Result<String, JsError> {
            let dets = self.0.estimate().map_err(js)?;
            Ok(serde_json::to_string(&dets).unwrap_or_default())
        }

        /// Loss sweeps as JSON.
        pub fn sweep(&self, steps: usize) -> Result<String, JsError> {
            let sweeps = self.0.sweep(steps).map_err(js)?;
            Ok(serde_json::to_string(&sweeps).unwrap_or_default())
        }
    }
}
