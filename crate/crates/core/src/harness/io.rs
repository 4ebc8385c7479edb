use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Detection;
use crate::geometry::{CameraIntrinsics, CuboidMesh, Pose6D};
use crate::likelihood::{BackgroundModel, NeuralMesh};
use crate::render::FeatureMap;

use super::GroundTruth;

pub const NFM_MAGIC: &[u8; 4] = b"NFM1";

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Writes `map` in the NFM1 container. Values are stored as `f32`.
pub fn encode_feature_map(map: &FeatureMap, mut out: impl Write) -> Result<()> {
    let dims = [map.height(), map.width(), map.channels()];
    let mut buf = Vec::with_capacity(16 + 4 * map.data().len());
    buf.extend_from_slice(NFM_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| format_err("dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &x in map.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn decode_feature_map(mut input: impl Read) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != NFM_MAGIC {
        return Err(format_err("missing NFM1 header"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| format_err("NFM1 dimensions overflow"))?;
    if bytes.len() - 16 != count * 4 {
        return Err(format_err(format!(
            "NFM1 {h}x{w}x{c} needs {} payload bytes, found {}",
            count * 4,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::from_vec(h, w, c, data).map_err(|e| format_err(e.to_string()))
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut buf = Vec::new();
    encode_feature_map(map, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(fs::File::open(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRecord {
    pub b: Vec<f64>,
    pub sigma: f64,
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub extents: [f64; 3],
    pub verts_per_side: usize,
    pub sigma_r: Vec<f64>,
    pub background: BackgroundRecord,
}

/// Sidecar path of a checkpoint: the feature file with a `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the vertex features as an `N x 1 x c` NFM1 file at `path` and the
/// geometry, spreads and background to its sidecar.
pub fn write_checkpoint(path: &Path, mesh: &NeuralMesh, bg: &BackgroundModel) -> Result<()> {
    let features = FeatureMap::from_vec(mesh.len(), 1, mesh.channels(), mesh.features().to_vec())?;
    write_feature_map(path, &features)?;
    let meta = CheckpointMeta {
        extents: mesh.geometry().extents(),
        verts_per_side: mesh.geometry().verts_per_side(),
        sigma_r: mesh.sigma().to_vec(),
        background: BackgroundRecord {
            b: bg.mean().to_vec(),
            sigma: bg.sigma(),
        },
    };
    write_json(&sidecar_path(path), &meta)
}

pub fn read_checkpoint(path: &Path) -> Result<(NeuralMesh, BackgroundModel)> {
    let features = read_feature_map(path)?;
    let meta: CheckpointMeta = read_json(&sidecar_path(path))?;
    let geometry = CuboidMesh::new(meta.extents, meta.verts_per_side)
        .map_err(|e| format_err(format!("checkpoint geometry: {e}")))?;
    if features.width() != 1 || features.height() != geometry.len() {
        return Err(format_err(format!(
            "checkpoint holds {}x{} features for a {}-vertex mesh",
            features.height(),
            features.width(),
            geometry.len()
        )));
    }
    let c = features.channels();
    let mesh = NeuralMesh::new(geometry, c, features.into_data(), meta.sigma_r)
        .map_err(|e| format_err(format!("checkpoint features: {e}")))?;
    let bg = BackgroundModel::new(meta.background.b, meta.background.sigma)
        .map_err(|e| format_err(format!("checkpoint background: {e}")))?;
    if bg.channels() != c {
        return Err(format_err("checkpoint background has the wrong channel count"));
    }
    Ok((mesh, bg))
}

/// Scene description; the feature map lives in an NFM1 file next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub id: String,
    pub seed: u64,
    pub occlusion_level: u8,
    pub noise_sigma: f64,
    pub camera: CameraIntrinsics,
    /// Feature file, relative to the scene file's directory.
    pub features: String,
    pub objects: Vec<GroundTruth>,
    pub occluded_fractions: Vec<f64>,
}

impl SceneFile {
    pub fn features_path(&self, scene_path: &Path) -> PathBuf {
        scene_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.features)
    }

    pub fn load_features(&self, scene_path: &Path) -> Result<FeatureMap> {
        let f = read_feature_map(&self.features_path(scene_path))?;
        if f.width() != self.camera.width || f.height() != self.camera.height {
            return Err(format_err(format!(
                "scene {} features are {}x{}, camera is {}x{}",
                self.id,
                f.height(),
                f.width(),
                self.camera.height,
                self.camera.width
            )));
        }
        Ok(f)
    }
}

/// Ground truth of one scene. The camera is kept so that ADD can be computed
/// without the scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGroundTruth {
    pub scene: String,
    pub camera: CameraIntrinsics,
    pub objects: Vec<GroundTruth>,
}

/// A detection as stored on disk: the pose fields plus score and loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(flatten)]
    pub pose: Pose6D,
    pub score: f64,
    pub loss: f64,
    pub pixel_loss: f64,
    pub layer: usize,
    pub iterations: usize,
    pub grad_norm: Option<f64>,
    pub converged: bool,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            pose: d.pose,
            score: d.score,
            loss: d.loss,
            pixel_loss: d.pixel_loss,
            layer: d.layer,
            iterations: d.iterations,
            grad_norm: d.grad_norm.is_finite().then_some(d.grad_norm),
            converged: d.converged,
        }
    }
}

/// Detections of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene: String,
    pub detections: Vec<DetectionRecord>,
}
