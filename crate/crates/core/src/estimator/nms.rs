use std::f64::consts::FRAC_PI_6;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::geometry::{CameraIntrinsics, Pose6D, RotationMatrix};

use super::Proposal;

/// Suppression radii: geodesic rotation distance (radians), centroid distance
/// (pixels) and distance ratio `max(d1/d2, d2/d1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsRadii {
    pub rotation: f64,
    pub center: f64,
    pub distance_ratio: f64,
}

impl NmsRadii {
    pub fn for_camera(cam: &CameraIntrinsics) -> Self {
        Self {
            rotation: FRAC_PI_6,
            center: 0.25 * cam.width.min(cam.height) as f64,
            distance_ratio: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation > 0.0 && self.center > 0.0 && self.distance_ratio > 1.0;
        if !ok || ![self.rotation, self.center, self.distance_ratio].iter().all(|x| x.is_finite()) {
            return Err(param(format!(
                "NMS radii must be positive (distance ratio > 1), got {self:?}"
            )));
        }
        Ok(())
    }
}

struct Keyed {
    rotation: RotationMatrix,
    u: f64,
    v: f64,
    d: f64,
}

impl Keyed {
    fn new(p: &Pose6D) -> Self {
        Self {
            rotation: p.rotation(),
            u: p.u,
            v: p.v,
            d: p.distance,
        }
    }

    fn within(&self, other: &Keyed, radii: &NmsRadii) -> bool {
        let ratio = (self.d / other.d).max(other.d / self.d);
        if ratio >= radii.distance_ratio {
            return false;
        }
        if (self.u - other.u).hypot(self.v - other.v) >= radii.center {
            return false;
        }
        self.rotation.angle_to(&other.rotation) < radii.rotation
    }
}

/// Greedy suppression over candidates already sorted best-first. Returns the kept
/// indices, at most `limit` of them.
pub(crate) fn greedy_keep(poses: &[Pose6D], radii: &NmsRadii, limit: usize) -> Vec<usize> {
    let mut kept: Vec<(usize, Keyed)> = Vec::new();
    for (i, p) in poses.iter().enumerate() {
        if kept.len() >= limit {
            break;
        }
        let k = Keyed::new(p);
        if kept.iter().all(|(_, other)| !k.within(other, radii)) {
            kept.push((i, k));
        }
    }
    kept.into_iter().map(|(i, _)| i).collect()
}

/// Greedy 6D non-maximum suppression by ascending score (lower is better). Equal
/// scores keep their input order.
pub fn nms_6d(scored: &[(Pose6D, f64)], radii: &NmsRadii) -> Result<Vec<Proposal>> {
    radii.validate()?;
    if scored.iter().any(|(_, s)| s.is_nan()) {
        return Err(param("NMS scores must not be NaN"));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].1.total_cmp(&scored[b].1));
    let poses: Vec<Pose6D> = order.iter().map(|&i| scored[i].0).collect();
    Ok(greedy_keep(&poses, radii, usize::MAX)
        .into_iter()
        .map(|k| {
            let (pose, score) = scored[order[k]];
            Proposal {
                pose,
                score,
                template: None,
            }
        })
        .collect())
}
