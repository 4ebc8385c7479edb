//! Pose parameterization, pinhole camera, cuboid mesh construction, projection
//! and backface visibility.
//!
//! Image coordinates are continuous: pixel `(col, row)` covers
//! `[col, col + 1) x [row, row + 1)` and its center sits at `(col + 0.5, row + 0.5)`.
//! The principal point is the lattice center `(W/2, H/2)`.
//!
//! Rotations follow `R = Rz(theta) * Rx(elevation) * Ry(azimuth)`: azimuth turns the
//! object about its up axis (y), elevation tilts about the camera x axis and the
//! in-plane angle spins about the optical axis (z). The camera looks down +z.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Number of pose parameters.
pub const POSE_DIMS: usize = 6;

/// Names of the pose parameters, in [`Pose6D::to_array`] order.
pub const POSE_DIM_NAMES: [&str; POSE_DIMS] = ["azimuth", "elevation", "theta", "u", "v", "d"];

/// Object pose: three rotation angles, projected centroid and camera distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub azimuth: f64,
    pub elevation: f64,
    pub theta: f64,
    pub u: f64,
    pub v: f64,
    #[serde(rename = "d")]
    pub distance: f64,
}

impl Pose6D {
    pub fn new(azimuth: f64, elevation: f64, theta: f64, u: f64, v: f64, distance: f64) -> Self {
        Self {
            azimuth,
            elevation,
            theta,
            u,
            v,
            distance,
        }
    }

    pub fn from_array(m: [f64; POSE_DIMS]) -> Self {
        Self::new(m[0], m[1], m[2], m[3], m[4], m[5])
    }

    pub fn to_array(&self) -> [f64; POSE_DIMS] {
        [
            self.azimuth,
            self.elevation,
            self.theta,
            self.u,
            self.v,
            self.distance,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|x| !x.is_finite()) {
            return Err(param("pose has non-finite fields"));
        }
        if self.distance <= 0.0 {
            return Err(param(format!("pose distance must be > 0, got {}", self.distance)));
        }
        Ok(())
    }

    /// Maps the angles into their canonical ranges without changing the rotation:
    /// azimuth in `[0, 2pi)`, elevation in `[-pi/2, pi/2]`, in-plane in `(-pi, pi]`.
    pub fn normalized(&self) -> Self {
        let mut a = self.azimuth;
        let mut e = wrap_pi(self.elevation);
        let mut t = self.theta;
        // (a, e, t) and (a + pi, pi - e, t + pi) describe the same rotation.
        if e > PI / 2.0 {
            e = PI - e;
            a += PI;
            t += PI;
        } else if e < -PI / 2.0 {
            e = -PI - e;
            a += PI;
            t += PI;
        }
        Self {
            azimuth: wrap_two_pi(a),
            elevation: e,
            theta: wrap_pi(t),
            ..*self
        }
    }

    pub fn rotation(&self) -> RotationMatrix {
        rotation_from_pose(self)
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_two_pi(x: f64) -> f64 {
    let r = x.rem_euclid(TAU);
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_pi(x: f64) -> f64 {
    let r = PI - (PI - x).rem_euclid(TAU);
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}

/// Pinhole intrinsics on the feature lattice. The principal point is the lattice center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_length: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(focal_length: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            focal_length,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return Err(param("focal length must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(param("image dimensions must be positive"));
        }
        Ok(())
    }

    pub fn cx(&self) -> f64 {
        self.width as f64 / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.height as f64 / 2.0
    }

    /// Camera-frame translation of the object center implied by `(u, v, d)`.
    pub fn translation(&self, pose: &Pose6D) -> Vector3<f64> {
        let d = pose.distance;
        Vector3::new(
            (pose.u - self.cx()) * d / self.focal_length,
            (pose.v - self.cy()) * d / self.focal_length,
            d,
        )
    }
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    /// Wraps `m` after checking orthonormality and a positive determinant.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if !err.is_finite() || err > Self::ORTHONORMAL_TOL {
            return Err(param(format!("matrix is not orthonormal (error {err:.3e})")));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(param(format!("rotation determinant is {det}, expected 1")));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    /// Rotation vector (axis times angle, angle in `[0, pi]`) of the matrix logarithm,
    /// computed through the unit quaternion.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let tr = m.trace();
        // Shepperd: pick the largest quaternion component for the division.
        let (w, x, y, z) = if tr > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
            let s = (1.0 + tr).sqrt() * 2.0;
            (
                s / 4.0,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                s / 4.0,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] >= m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                s / 4.0,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                s / 4.0,
            )
        };
        let (w, v) = if w < 0.0 {
            (-w, Vector3::new(-x, -y, -z))
        } else {
            (w, Vector3::new(x, y, z))
        };
        let sin_half = v.norm();
        if sin_half < 1e-300 {
            return Vector3::zeros();
        }
        let angle = 2.0 * sin_half.atan2(w);
        v * (angle / sin_half)
    }

    /// Matrix logarithm as a skew-symmetric matrix.
    pub fn log_matrix(&self) -> Matrix3<f64> {
        let w = self.log();
        Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
    }

    /// Geodesic angle to `other`: `|logm(self^T other)|_F / sqrt(2)`.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = RotationMatrix(self.0.transpose() * other.0);
        rel.log_matrix().norm() / std::f64::consts::SQRT_2
    }
}

pub(crate) fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub(crate) fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub(crate) fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_x_prime(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn rot_y_prime(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn rot_z_prime(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `R = Rz(theta) * Rx(elevation) * Ry(azimuth)`.
pub fn rotation_from_pose(pose: &Pose6D) -> RotationMatrix {
    RotationMatrix(rot_z(pose.theta) * rot_x(pose.elevation) * rot_y(pose.azimuth))
}

/// Rigid transform of a pose together with its derivatives in all six pose parameters.
#[derive(Debug, Clone)]
pub struct PoseKinematics {
    pub rotation: Matrix3<f64>,
    /// dR/d(azimuth, elevation, theta).
    pub rotation_grad: [Matrix3<f64>; 3],
    pub translation: Vector3<f64>,
    /// dt/d(u, v, d).
    pub translation_grad: [Vector3<f64>; 3],
    focal: f64,
    cx: f64,
    cy: f64,
}

impl PoseKinematics {
    pub fn new(pose: &Pose6D, cam: &CameraIntrinsics) -> Self {
        let (ry, rx, rz) = (rot_y(pose.azimuth), rot_x(pose.elevation), rot_z(pose.theta));
        let f = cam.focal_length;
        let d = pose.distance;
        Self {
            rotation: rz * rx * ry,
            rotation_grad: [
                rz * rx * rot_y_prime(pose.azimuth),
                rz * rot_x_prime(pose.elevation) * ry,
                rot_z_prime(pose.theta) * rx * ry,
            ],
            translation: cam.translation(pose),
            translation_grad: [
                Vector3::new(d / f, 0.0, 0.0),
                Vector3::new(0.0, d / f, 0.0),
                Vector3::new((pose.u - cam.cx()) / f, (pose.v - cam.cy()) / f, 1.0),
            ],
            focal: f,
            cx: cam.cx(),
            cy: cam.cy(),
        }
    }

    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        let x = self.to_camera(point);
        Projection {
            x: self.focal * x[0] / x[2] + self.cx,
            y: self.focal * x[1] / x[2] + self.cy,
            depth: x[2],
        }
    }

    /// Projects `point` and returns d(x, y)/d(pose) alongside.
    pub fn project_with_grad(&self, point: &Vector3<f64>) -> (Projection, ProjectionGrad) {
        let x = self.to_camera(point);
        let inv_z = 1.0 / x[2];
        let proj = Projection {
            x: self.focal * x[0] * inv_z + self.cx,
            y: self.focal * x[1] * inv_z + self.cy,
            depth: x[2],
        };
        let mut grad = ProjectionGrad::default();
        let mut chain = |k: usize, dx: Vector3<f64>| {
            grad.dx[k] = self.focal * inv_z * (dx[0] - x[0] * inv_z * dx[2]);
            grad.dy[k] = self.focal * inv_z * (dx[1] - x[1] * inv_z * dx[2]);
        };
        for k in 0..3 {
            chain(k, self.rotation_grad[k] * point);
            chain(k + 3, self.translation_grad[k]);
        }
        (proj, grad)
    }
}

/// Image position and camera depth of a projected point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

/// Derivatives of a projected position with respect to the six pose parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ProjectionGrad {
    pub dx: [f64; POSE_DIMS],
    pub dy: [f64; POSE_DIMS],
}

/// One of the six cuboid faces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuboidFace {
    /// Coordinate axis the face is perpendicular to.
    pub axis: usize,
    /// +1 or -1.
    pub sign: f64,
    pub normal: Vector3<f64>,
    pub center: Vector3<f64>,
    /// Half extents of the face along its two in-plane axes, in axis order.
    pub half_extents: [f64; 2],
}

impl CuboidFace {
    /// Axes spanning the face plane.
    pub fn tangent_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }
}

/// Cuboid surface sampled by a uniform grid on each face.
///
/// Vertices on edges and corners are stored once and carry every face they lie on.
#[derive(Debug, Clone, PartialEq)]
pub struct CuboidMesh {
    extents: [f64; 3],
    verts_per_side: usize,
    vertices: Vec<Vector3<f64>>,
    faces: [CuboidFace; 6],
    vertex_faces: Vec<u8>,
}

impl CuboidMesh {
    /// Extent ratios of the default category cuboid (length, height, width), scaled
    /// so that the box diagonal is one object unit.
    pub fn default_extents() -> [f64; 3] {
        let raw = [1.0, 0.45, 0.5];
        let diag = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        raw.map(|x| x / diag)
    }

    /// Grid resolution giving roughly 1100 vertices.
    pub const DEFAULT_VERTS_PER_SIDE: usize = 15;

    pub fn new(extents: [f64; 3], verts_per_side: usize) -> Result<Self> {
        if extents.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(param(format!("cuboid extents must be positive, got {extents:?}")));
        }
        if verts_per_side < 2 {
            return Err(param(format!(
                "need at least 2 vertices per side, got {verts_per_side}"
            )));
        }
        let n = verts_per_side;
        let last = n - 1;
        let coord = |axis: usize, i: usize| extents[axis] * (i as f64 / last as f64 - 0.5);

        let mut vertices = Vec::with_capacity(6 * n * n);
        let mut vertex_faces = Vec::with_capacity(6 * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let idx = [i, j, k];
                    let mut mask = 0u8;
                    for (axis, &c) in idx.iter().enumerate() {
                        if c == last {
                            mask |= 1 << (2 * axis);
                        }
                        if c == 0 {
                            mask |= 1 << (2 * axis + 1);
                        }
                    }
                    if mask != 0 {
                        vertices.push(Vector3::new(coord(0, i), coord(1, j), coord(2, k)));
                        vertex_faces.push(mask);
                    }
                }
            }
        }

        let faces = std::array::from_fn(|f| {
            let axis = f / 2;
            let sign = if f % 2 == 0 { 1.0 } else { -1.0 };
            let mut normal = Vector3::zeros();
            normal[axis] = sign;
            let center = normal * (extents[axis] / 2.0);
            let tangent = match axis {
                0 => [1, 2],
                1 => [0, 2],
                _ => [0, 1],
            };
            CuboidFace {
                axis,
                sign,
                normal,
                center,
                half_extents: tangent.map(|a| extents[a] / 2.0),
            }
        });

        Ok(Self {
            extents,
            verts_per_side,
            vertices,
            faces,
            vertex_faces,
        })
    }

    pub fn extents(&self) -> [f64; 3] {
        self.extents
    }

    pub fn verts_per_side(&self) -> usize {
        self.verts_per_side
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn faces(&self) -> &[CuboidFace; 6] {
        &self.faces
    }

    /// Indices of the faces vertex `i` lies on (one to three).
    pub fn owning_faces(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let mask = self.vertex_faces[i];
        (0..6).filter(move |f| mask & (1 << f) != 0)
    }

    pub(crate) fn face_mask(&self, i: usize) -> u8 {
        self.vertex_faces[i]
    }

    pub fn diagonal(&self) -> f64 {
        self.extents.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Builds the cuboid surface mesh.
pub fn build_cuboid_mesh(extents: [f64; 3], verts_per_side: usize) -> Result<CuboidMesh> {
    CuboidMesh::new(extents, verts_per_side)
}

/// Per-face backface test: a face is visible when its outward normal points toward
/// the camera, i.e. has a negative dot product with the ray to any point on it.
pub fn visible_faces(mesh: &CuboidMesh, kin: &PoseKinematics) -> [bool; 6] {
    mesh.faces.map(|face| {
        let n = kin.rotation * face.normal;
        let p = kin.to_camera(&face.center);
        n.dot(&p) < 0.0
    })
}

/// Cosine between each face's outward normal and the direction from its center to
/// the camera. Positive exactly for the faces [`visible_faces`] reports.
pub fn face_facing(mesh: &CuboidMesh, kin: &PoseKinematics) -> [f64; 6] {
    mesh.faces.map(|face| {
        let n = kin.rotation * face.normal;
        let p = kin.to_camera(&face.center);
        -n.dot(&p) / p.norm()
    })
}

/// [`face_facing`] with derivatives in the six pose parameters.
pub(crate) fn face_facing_with_grad(
    mesh: &CuboidMesh,
    kin: &PoseKinematics,
) -> [(f64, [f64; POSE_DIMS]); 6] {
    mesh.faces.map(|face| {
        let n = kin.rotation * face.normal;
        let p = kin.to_camera(&face.center);
        let len = p.norm();
        let np = n.dot(&p);
        let mut grad = [0.0; POSE_DIMS];
        for (k, g) in grad.iter_mut().enumerate() {
            let (dn, dp) = if k < 3 {
                (kin.rotation_grad[k] * face.normal, kin.rotation_grad[k] * face.center)
            } else {
                (Vector3::zeros(), kin.translation_grad[k - 3])
            };
            *g = -((dn.dot(&p) + n.dot(&dp)) / len - np * p.dot(&dp) / (len * len * len));
        }
        (-np / len, grad)
    })
}

pub(crate) fn face_bits(faces: &[bool; 6]) -> u8 {
    faces
        .iter()
        .enumerate()
        .fold(0u8, |m, (i, &v)| if v { m | (1 << i) } else { m })
}

/// Projects every mesh vertex. Fails if any vertex ends up at or behind the camera plane.
pub fn project_vertices(
    mesh: &CuboidMesh,
    pose: &Pose6D,
    cam: &CameraIntrinsics,
) -> Result<Vec<Projection>> {
    pose.validate()?;
    let kin = PoseKinematics::new(pose, cam);
    mesh.vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let p = kin.project(v);
            if p.depth <= 0.0 {
                Err(Error::BehindCamera {
                    vertex: i,
                    depth: p.depth,
                })
            } else {
                Ok(p)
            }
        })
        .collect()
}

/// Vertex visibility by backface culling: a vertex is visible when any face it lies on
/// is visible.
pub fn visible_vertices(mesh: &CuboidMesh, pose: &Pose6D, cam: &CameraIntrinsics) -> Vec<bool> {
    let kin = PoseKinematics::new(pose, cam);
    let bits = face_bits(&visible_faces(mesh, &kin));
    mesh.vertex_faces.iter().map(|m| m & bits != 0).collect()
}
