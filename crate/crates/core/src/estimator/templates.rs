use crate::error::Result;
use crate::geometry::{face_facing, CameraIntrinsics, Pose6D, PoseKinematics};
use crate::render::vertex_fade;
use crate::likelihood::NeuralMesh;

use super::grid::PoseGrid;

/// A visible vertex of a template, relative to the projected centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplatePoint {
    pub vertex: u32,
    pub dx: f64,
    pub dy: f64,
    pub depth: f64,
    /// Face fade of the vertex.
    pub scale: f64,
}

/// Projection of the mesh at one (rotation, distance) sample with the centroid on
/// the image center.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub rotation: usize,
    pub distance: usize,
    /// Pose at the image center.
    pub pose: Pose6D,
    /// Per-vertex visibility.
    pub visible: Vec<bool>,
    pub points: Vec<TemplatePoint>,
    /// False when some vertex falls behind the camera; such templates are never scored.
    pub valid: bool,
}

/// Templates for every (rotation, distance) pair of a grid.
#[derive(Debug, Clone)]
pub struct TemplateCache {
    grid: PoseGrid,
    camera: CameraIntrinsics,
    mesh_len: usize,
    entries: Vec<Template>,
}

impl TemplateCache {
    pub fn grid(&self) -> &PoseGrid {
        &self.grid
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.camera
    }

    pub fn mesh_len(&self) -> usize {
        self.mesh_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Template] {
        &self.entries
    }

    /// Id of the entry for `(rotation, distance)`; distance varies fastest.
    pub fn template_id(&self, rotation: usize, distance: usize) -> usize {
        rotation * self.grid.distances().len() + distance
    }

    /// Entry serving `pose`'s rotation and distance sample, if both are grid samples.
    pub fn lookup(&self, rotation: usize, distance: usize) -> Option<&Template> {
        if rotation < self.grid.num_rotations() && distance < self.grid.distances().len() {
            self.entries.get(self.template_id(rotation, distance))
        } else {
            None
        }
    }
}

pub fn precompute_templates(
    mesh: &NeuralMesh,
    grid: &PoseGrid,
    cam: &CameraIntrinsics,
) -> Result<TemplateCache> {
    cam.validate()?;
    let geometry = mesh.geometry();
    let (cx, cy) = (cam.cx(), cam.cy());
    let nd = grid.distances().len();
    let entries = crate::par::map_indexed(grid.num_rotations() * nd, |id| {
        let (r, k) = (id / nd, id % nd);
        let [a, e, t] = grid.rotations()[r];
        let pose = Pose6D::new(a, e, t, cx, cy, grid.distances()[k]);
        let kin = PoseKinematics::new(&pose, cam);
        let facing = face_facing(geometry, &kin);
        let mut visible = vec![false; geometry.len()];
        let mut points = Vec::new();
        let mut valid = true;
        for (i, vtx) in geometry.vertices().iter().enumerate() {
            let p = kin.project(vtx);
            if p.depth <= 0.0 {
                valid = false;
            }
            let (scale, _) = vertex_fade(geometry.face_mask(i), &facing);
            if scale > 0.0 {
                visible[i] = true;
                points.push(TemplatePoint {
                    vertex: i as u32,
                    dx: p.x - cx,
                    dy: p.y - cy,
                    depth: p.depth,
                    scale,
                });
            }
        }
        if !valid {
            points.clear();
        }
        Template {
            rotation: r,
            distance: k,
            pose,
            visible,
            points,
            valid,
        }
    });
    Ok(TemplateCache {
        grid: grid.clone(),
        camera: *cam,
        mesh_len: geometry.len(),
        entries,
    })
}
