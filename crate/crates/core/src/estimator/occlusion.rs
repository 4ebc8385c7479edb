use crate::error::{param, Result};
use crate::geometry::CameraIntrinsics;
use crate::likelihood::{sq_dist, BackgroundModel, NeuralMesh, OwnershipMap};
use crate::render::{render, FeatureMap, RenderOptions};

use super::Detection;

/// Pixel-level competition between detected objects.
///
/// Each covered pixel goes to the object whose rendered feature is closest to the
/// observation (lowest index on ties), provided that beats the background mean.
/// `meshes` holds one mesh per detection, or a single mesh shared by all.
pub fn resolve_occlusion(
    features: &FeatureMap,
    meshes: &[&NeuralMesh],
    detections: &[Detection],
    cam: &CameraIntrinsics,
    bg: &BackgroundModel,
) -> Result<OwnershipMap> {
    features.check_camera(cam)?;
    if meshes.is_empty() || (meshes.len() != 1 && meshes.len() != detections.len()) {
        return Err(param(format!(
            "need one mesh or one per detection, got {} for {}",
            meshes.len(),
            detections.len()
        )));
    }
    if bg.channels() != features.channels() {
        return Err(param("background and feature channels differ"));
    }
    let npix = features.num_pixels();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; npix];
    for (k, det) in detections.iter().enumerate() {
        let mesh = meshes[if meshes.len() == 1 { 0 } else { k }];
        if mesh.channels() != features.channels() {
            return Err(param("mesh and feature channels differ"));
        }
        let scene = render(mesh, &det.pose, cam, &RenderOptions::default())?;
        for px in scene.pixels() {
            let cost = sq_dist(features.pixel(px.index), scene.feature(px));
            let slot = &mut best[px.index];
            if slot.is_none_or(|(_, c)| cost < c) {
                *slot = Some((k, cost));
            }
        }
    }
    let mut z = OwnershipMap::new(features.height(), features.width(), detections.len());
    for (i, b) in best.iter().enumerate() {
        if let Some((k, cost)) = b {
            if *cost <= sq_dist(features.pixel(i), bg.mean()) {
                z.assign(i, Some(*k));
            }
        }
    }
    Ok(z)
}
