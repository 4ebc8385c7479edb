use std::f64::consts::PI;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::geometry::{CameraIntrinsics, CuboidMesh, Pose6D, RotationMatrix};

/// Geodesic angle `|logm(R_pred^T R_gt)|_F / sqrt(2)` between two rotations.
pub fn pose_error(r_pred: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> Result<f64> {
    let a = RotationMatrix::new(*r_pred)?;
    let b = RotationMatrix::new(*r_gt)?;
    Ok(a.angle_to(&b))
}

/// Mean vertex displacement between the two rigid transforms, in object units.
pub fn add_metric(mesh: &CuboidMesh, pred: &Pose6D, gt: &Pose6D, cam: &CameraIntrinsics) -> f64 {
    let (rp, rg) = (pred.rotation(), gt.rotation());
    let (tp, tg) = (cam.translation(pred), cam.translation(gt));
    let n = mesh.len().max(1) as f64;
    mesh.vertices()
        .iter()
        .map(|x| ((rp.matrix() * x + tp) - (rg.matrix() * x + tg)).norm())
        .sum::<f64>()
        / n
}

/// A pose with its ranking score; higher is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPose {
    pub pose: Pose6D,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    pub coarse: f64,
    pub fine: f64,
    pub map_pose: f64,
    pub map_add: f64,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        Self {
            coarse: PI / 6.0,
            fine: PI / 18.0,
            map_pose: PI / 3.0,
            map_add: 5.0,
        }
    }
}

/// Outcome for one ground-truth object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub scene: usize,
    pub object: usize,
    /// Index of the matched detection within its scene.
    pub detection: Option<usize>,
    pub pose_error: Option<f64>,
    pub add: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_coarse: f64,
    pub acc_fine: f64,
    /// Over matched objects; infinite when nothing matched.
    pub median_pose_error: f64,
    pub median_add: f64,
    pub map: f64,
    pub records: Vec<MatchRecord>,
}

impl MetricsReport {
    /// `(name, value)` summary rows.
    pub fn summary(&self) -> [(&'static str, f64); 5] {
        [
            ("acc_pi_6", self.acc_coarse),
            ("acc_pi_18", self.acc_fine),
            ("median_pose_error", self.median_pose_error),
            ("median_add", self.median_add),
            ("map", self.map),
        ]
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn check_alignment(detections: usize, gts: usize) -> Result<()> {
    if detections != gts {
        return Err(param(format!(
            "detections cover {detections} scenes but ground truth covers {gts}"
        )));
    }
    Ok(())
}

/// Pose accuracy, medians and mAP over scenes. `detections[s]` and `gts[s]` belong
/// to the same scene. Within a scene, (object, detection) pairs are matched greedily
/// by ascending pose error; an unmatched object fails at every threshold.
pub fn evaluate(
    detections: &[Vec<ScoredPose>],
    gts: &[Vec<Pose6D>],
    mesh: &CuboidMesh,
    cam: &CameraIntrinsics,
    thresholds: &EvalThresholds,
) -> Result<MetricsReport> {
    check_alignment(detections.len(), gts.len())?;
    let mut records = Vec::new();
    for (s, (dets, objs)) in detections.iter().zip(gts).enumerate() {
        let mut pairs = Vec::with_capacity(dets.len() * objs.len());
        for (o, gt) in objs.iter().enumerate() {
            for (d, det) in dets.iter().enumerate() {
                pairs.push((gt.rotation().angle_to(&det.pose.rotation()), o, d));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut obj_match = vec![None; objs.len()];
        let mut det_used = vec![false; dets.len()];
        for (err, o, d) in pairs {
            if obj_match[o].is_none() && !det_used[d] {
                obj_match[o] = Some((d, err));
                det_used[d] = true;
            }
        }
        for (o, m) in obj_match.into_iter().enumerate() {
            records.push(MatchRecord {
                scene: s,
                object: o,
                detection: m.map(|(d, _)| d),
                pose_error: m.map(|(_, e)| e),
                add: m.map(|(d, _)| add_metric(mesh, &dets[d].pose, &objs[o], cam)),
            });
        }
    }
    let total = records.len();
    let acc = |t: f64| {
        if total == 0 {
            return 0.0;
        }
        records.iter().filter(|r| r.pose_error.is_some_and(|e| e < t)).count() as f64 / total as f64
    };
    let errors: Vec<f64> = records.iter().filter_map(|r| r.pose_error).collect();
    let adds: Vec<f64> = records.iter().filter_map(|r| r.add).collect();
    Ok(MetricsReport {
        acc_coarse: acc(thresholds.coarse),
        acc_fine: acc(thresholds.fine),
        median_pose_error: median(&errors),
        median_add: median(&adds),
        map: map_at(detections, gts, mesh, cam, thresholds.map_pose, thresholds.map_add)?,
        records,
    })
}

/// Average precision over all scenes. Detections are visited by descending score
/// (ties by scene, then index); each claims the unclaimed object of its scene with
/// the smallest pose error among those within both thresholds. AP is the area under
/// the precision envelope of the precision-recall curve.
pub fn map_at(
    detections: &[Vec<ScoredPose>],
    gts: &[Vec<Pose6D>],
    mesh: &CuboidMesh,
    cam: &CameraIntrinsics,
    pose_thresh: f64,
    add_thresh: f64,
) -> Result<f64> {
    check_alignment(detections.len(), gts.len())?;
    let total_gt: usize = gts.iter().map(Vec::len).sum();
    let mut order: Vec<(usize, usize)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, d)| (0..d.len()).map(move |i| (s, i)))
        .collect();
    if total_gt == 0 || order.is_empty() {
        return Ok(0.0);
    }
    order.sort_by(|a, b| {
        detections[b.0][b.1]
            .score
            .total_cmp(&detections[a.0][a.1].score)
            .then(a.cmp(b))
    });
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (k, &(s, i)) in order.iter().enumerate() {
        let det = &detections[s][i];
        let mut best: Option<(f64, usize)> = None;
        for (o, gt) in gts[s].iter().enumerate() {
            if claimed[s][o] {
                continue;
            }
            let err = gt.rotation().angle_to(&det.pose.rotation());
            if err < pose_thresh
                && add_metric(mesh, &det.pose, gt, cam) < add_thresh
                && best.is_none_or(|(e, _)| err < e)
            {
                best = Some((err, o));
            }
        }
        if let Some((_, o)) = best {
            claimed[s][o] = true;
            tp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(average_precision(&curve))
}

/// All-points interpolated AP from `(recall, precision)` points in rank order.
fn average_precision(curve: &[(f64, f64)]) -> f64 {
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), p) in curve.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}
