use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6D, POSE_DIMS};
use crate::likelihood::{sq_dist, BackgroundModel, NeuralMesh};
use crate::render::{
    accumulate_pixel_grad, render, render_pose_jacobian, FeatureMap, RenderOptions, RenderedScene,
};

use super::{Detection, Proposal};

/// Gradient-descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub max_iters: usize,
    /// Iterations between foreground map updates.
    pub z_period: usize,
    /// Step scale per dimension; the distance entry is relative to the current distance.
    pub step_scales: [f64; POSE_DIMS],
    /// Stop when the scaled gradient norm falls below this.
    pub grad_tol: f64,
    pub initial_step: f64,
    pub max_step: f64,
    /// Stop when backtracking shrinks the step below this.
    pub min_step: f64,
    /// Weight of the previous direction in the heavy-ball update; 0 is plain descent.
    pub momentum: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            z_period: 10,
            step_scales: [0.05, 0.05, 0.05, 0.5, 0.5, 0.02],
            grad_tol: 1e-8,
            initial_step: 1.0,
            max_step: 4.0,
            min_step: 1e-3,
            momentum: 0.9,
        }
    }
}

impl RefineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.z_period == 0 {
            return Err(param("z_period must be >= 1"));
        }
        if self.step_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(param("step scales must be positive"));
        }
        if !(self.min_step > 0.0 && self.initial_step >= self.min_step && self.max_step >= self.initial_step)
        {
            return Err(param("need 0 < min_step <= initial_step <= max_step"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param("momentum must lie in [0, 1)"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(param("grad_tol must be >= 0"));
        }
        Ok(())
    }

    fn scales(&self, pose: &Pose6D) -> [f64; POSE_DIMS] {
        let mut s = self.step_scales;
        s[5] *= pose.distance;
        s
    }
}

/// Foreground objective of one object with an optional set of pixels owned by other
/// objects, which drop out of every term.
pub(crate) struct Objective<'a> {
    features: &'a FeatureMap,
    mesh: &'a NeuralMesh,
    cam: &'a CameraIntrinsics,
    beta: Vec<f64>,
    beta_total: f64,
    exclude: Option<&'a [bool]>,
}

pub(crate) struct Evaluation {
    scene: RenderedScene,
    /// Per covered pixel: `0.5 |f - F|^2 - 0.5 |f - b|^2`, or `None` if excluded.
    delta: Vec<Option<f64>>,
}

impl Evaluation {
    /// Loss with foreground membership from `z`; this is what descent minimizes.
    fn frozen(&self, obj: &Objective, z: &[bool]) -> f64 {
        let mut total = obj.beta_total;
        for (px, d) in self.scene.pixels().iter().zip(&self.delta) {
            if let Some(d) = d {
                if z[px.index] {
                    total += d;
                }
            }
        }
        total
    }

    /// Masked NLL with a fresh foreground map, and the number of counted covered pixels.
    fn fresh(&self, obj: &Objective) -> (f64, usize) {
        let mut total = obj.beta_total;
        let mut n = 0;
        for d in self.delta.iter().flatten() {
            n += 1;
            if *d <= 0.0 {
                total += d;
            }
        }
        (total, n)
    }

    fn zmap(&self, len: usize) -> Vec<bool> {
        let mut z = vec![false; len];
        for (px, d) in self.scene.pixels().iter().zip(&self.delta) {
            if matches!(d, Some(d) if *d <= 0.0) {
                z[px.index] = true;
            }
        }
        z
    }
}

impl<'a> Objective<'a> {
    pub fn new(
        features: &'a FeatureMap,
        mesh: &'a NeuralMesh,
        cam: &'a CameraIntrinsics,
        bg: &BackgroundModel,
        exclude: Option<&'a [bool]>,
    ) -> Result<Self> {
        features.check_camera(cam)?;
        if features.channels() != mesh.channels() || bg.channels() != mesh.channels() {
            return Err(param("feature, mesh and background channels differ"));
        }
        if let Some(ex) = exclude {
            if ex.len() != features.num_pixels() {
                return Err(param("exclusion mask does not match the feature map"));
            }
        }
        let beta: Vec<f64> = features
            .pixels()
            .map(|f| 0.5 * sq_dist(f, bg.mean()))
            .collect();
        let beta_total = beta
            .iter()
            .enumerate()
            .filter(|(i, _)| !exclude.is_some_and(|ex| ex[*i]))
            .map(|(_, b)| b)
            .sum();
        Ok(Self {
            features,
            mesh,
            cam,
            beta,
            beta_total,
            exclude,
        })
    }

    pub fn evaluate(&self, pose: &Pose6D) -> Result<Evaluation> {
        let scene = render(self.mesh, pose, self.cam, &RenderOptions::default())?;
        let delta = scene
            .pixels()
            .iter()
            .map(|px| {
                if self.exclude.is_some_and(|ex| ex[px.index]) {
                    None
                } else {
                    let f = self.features.pixel(px.index);
                    Some(0.5 * sq_dist(f, scene.feature(px)) - self.beta[px.index])
                }
            })
            .collect();
        Ok(Evaluation { scene, delta })
    }

    fn gradient(&self, eval: &Evaluation, z: &[bool]) -> Result<[f64; POSE_DIMS]> {
        let c = self.mesh.channels();
        let jac = render_pose_jacobian(self.mesh, eval.scene.pose(), self.cam, &eval.scene)?;
        let mut grad = [0.0; POSE_DIMS];
        let mut dl = vec![0.0; c];
        for (k, (px, d)) in eval.scene.pixels().iter().zip(&eval.delta).enumerate() {
            if d.is_none() || !z[px.index] {
                continue;
            }
            let f = self.features.pixel(px.index);
            let rendered = eval.scene.feature(px);
            for ((g, r), o) in dl.iter_mut().zip(rendered).zip(f) {
                *g = r - o;
            }
            let records = jac.pixel_records(k);
            accumulate_pixel_grad(rendered, px.weight_sum, &dl, records, self.mesh, &mut grad);
        }
        Ok(grad)
    }
}

/// Refines `init` by gradient descent on the foreground-masked NLL.
pub fn refine(
    features: &FeatureMap,
    mesh: &NeuralMesh,
    init: &Proposal,
    cam: &CameraIntrinsics,
    bg: &BackgroundModel,
    opts: &RefineOptions,
) -> Result<Detection> {
    refine_excluding(features, mesh, &init.pose, cam, bg, opts, None, 0)
}

/// [`refine`] with pixels owned by other objects left out of the objective.
#[allow(clippy::too_many_arguments)]
pub fn refine_excluding(
    features: &FeatureMap,
    mesh: &NeuralMesh,
    init: &Pose6D,
    cam: &CameraIntrinsics,
    bg: &BackgroundModel,
    opts: &RefineOptions,
    exclude: Option<&[bool]>,
    layer: usize,
) -> Result<Detection> {
    opts.validate()?;
    init.validate()?;
    let obj = Objective::new(features, mesh, cam, bg, exclude)?;
    let npix = features.num_pixels();

    let mut pose = *init;
    let mut eval = obj.evaluate(&pose)?;
    if eval.scene.pixels().is_empty() {
        return Err(param("initial pose renders no visible vertex"));
    }
    let mut z = eval.zmap(npix);
    let mut loss = eval.frozen(&obj, &z);
    let mut best_loss = eval.fresh(&obj).0;
    let mut best_pose = pose;
    let mut grad = obj.gradient(&eval, &z)?;
    let mut alpha = opts.initial_step;
    let mut grad_norm = f64::NAN;
    let mut converged = false;
    let mut iterations = 0;
    let mut z_age = 0;
    let mut velocity = [0.0; POSE_DIMS];

    while iterations < opts.max_iters {
        if z_age >= opts.z_period {
            z = eval.zmap(npix);
            loss = eval.frozen(&obj, &z);
            grad = obj.gradient(&eval, &z)?;
            z_age = 0;
        }
        iterations += 1;
        z_age += 1;
        let scales = opts.scales(&pose);
        let scaled: [f64; POSE_DIMS] = std::array::from_fn(|k| grad[k] * scales[k]);
        grad_norm = scaled.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() || !loss.is_finite() {
            return Err(Error::Optimization {
                reason: "loss or gradient is not finite".into(),
                iterations,
                last_loss: loss,
            });
        }
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }
        let mut dir: [f64; POSE_DIMS] =
            std::array::from_fn(|k| opts.momentum * velocity[k] + scaled[k] / grad_norm);
        if dir.iter().zip(&scaled).map(|(d, g)| d * g).sum::<f64>() <= 0.0 {
            dir = std::array::from_fn(|k| scaled[k] / grad_norm);
        }
        let dir_norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let mut accepted = None;
        while alpha >= opts.min_step {
            let mut m = pose.to_array();
            for k in 0..POSE_DIMS {
                m[k] -= alpha * scales[k] * dir[k] / dir_norm;
            }
            let cand = Pose6D::from_array(m);
            if cand.distance > 0.0 {
                // A candidate pushing vertices behind the camera is just a failed step.
                if let Ok(e) = obj.evaluate(&cand) {
                    let l = e.frozen(&obj, &z);
                    if l.is_nan() {
                        return Err(Error::Optimization {
                            reason: "loss became NaN".into(),
                            iterations,
                            last_loss: loss,
                        });
                    }
                    if l < loss {
                        accepted = Some((cand, e, l));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((cand, e, l)) = accepted else {
            if z_age == 1 {
                converged = true;
                break;
            }
            // Stalled on a stale foreground map: refresh it before giving up.
            velocity = [0.0; POSE_DIMS];
            z_age = opts.z_period;
            alpha = opts.initial_step;
            continue;
        };
        alpha = (alpha * 1.2).min(opts.max_step);
        velocity = dir.map(|d| d / dir_norm);
        pose = cand;
        eval = e;
        loss = l;
        let fresh = eval.fresh(&obj).0;
        if fresh < best_loss {
            best_loss = fresh;
            best_pose = pose;
        }
        if z_age < opts.z_period {
            grad = obj.gradient(&eval, &z)?;
        }
    }

    if pose != best_pose {
        eval = obj.evaluate(&best_pose)?;
    }
    let (best_loss, best_n) = eval.fresh(&obj);
    let per_pixel = (best_loss - obj.beta_total) / best_n.max(1) as f64;
    Ok(Detection {
        pose: best_pose.normalized(),
        loss: best_loss,
        pixel_loss: per_pixel,
        score: -per_pixel,
        layer,
        iterations,
        grad_norm,
        converged,
    })
}
