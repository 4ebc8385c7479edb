use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6D, POSE_DIMS, POSE_DIM_NAMES};
use crate::likelihood::{nll, BackgroundModel, NeuralMesh};
use crate::render::{render, FeatureMap, RenderOptions};

/// One sample of a 1D sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub dimension: String,
    pub offset: f64,
    pub nll: f64,
}

/// `steps` evenly spaced offsets over `[-range, range]`; a single step is offset 0.
pub fn sweep_offsets(range: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n)
            .map(|i| -range + 2.0 * range * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Six 1D sweeps of the unit-variance NLL through `center`, one pose dimension at a
/// time. Poses that put the object behind the camera score `+inf`.
pub fn export_landscape(
    features: &FeatureMap,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
    cam: &CameraIntrinsics,
    center: &Pose6D,
    ranges: [f64; POSE_DIMS],
    steps: usize,
) -> Result<Vec<LandscapeRow>> {
    center.validate()?;
    if steps == 0 {
        return Err(param("a sweep needs at least one step"));
    }
    if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(param("sweep ranges must be finite and >= 0"));
    }
    let mut rows = Vec::with_capacity(POSE_DIMS * steps);
    for (k, name) in POSE_DIM_NAMES.iter().enumerate() {
        for offset in sweep_offsets(ranges[k], steps) {
            let mut m = center.to_array();
            m[k] += offset;
            let pose = Pose6D::from_array(m);
            let value = if pose.distance <= 0.0 {
                f64::INFINITY
            } else {
                match render(mesh, &pose, cam, &RenderOptions::default()) {
                    Ok(scene) => nll(features, &scene, mesh, bg, true)?,
                    Err(Error::BehindCamera { .. }) => f64::INFINITY,
                    Err(e) => return Err(e),
                }
            };
            rows.push(LandscapeRow {
                dimension: name.to_string(),
                offset,
                nll: value,
            });
        }
    }
    Ok(rows)
}

pub fn write_landscape_csv(rows: &[LandscapeRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_landscape_csv(input: impl Read) -> Result<Vec<LandscapeRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}
