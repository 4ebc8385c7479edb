//! Vertex-splatting rasterizer for neural meshes.
//!
//! Every visible vertex is splatted onto the four pixels around its projection with
//! bilinear weights. A covered pixel stores the weight-normalized blend of its
//! contributors' features, and the depth-nearest contributor is its owner. Pixels
//! whose total weight is below [`COVERAGE_FLOOR`] are divided by the floor instead,
//! so features fade out continuously at the silhouette.
//! Backfacing faces are culled; faces close to edge-on are faded in (see
//! [`FACE_FADE`]). Splat weights are differentiable in the pose; ownership and the
//! set of contributors are frozen per render.

use crate::error::{param, Error, Result};
use crate::geometry::{
    face_facing, face_facing_with_grad, CameraIntrinsics, Pose6D, PoseKinematics,
    ProjectionGrad, POSE_DIMS,
};
use crate::likelihood::NeuralMesh;

/// Dense `H x W x c` feature map, row-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(param(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        })
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(param("feature map dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(param(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(param("feature map contains non-finite values"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Feature vector of the pixel with linear index `row * width + col`.
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub(crate) fn check_camera(&self, cam: &CameraIntrinsics) -> Result<()> {
        if cam.width != self.width || cam.height != self.height {
            return Err(param(format!(
                "feature map is {}x{} but camera lattice is {}x{}",
                self.height, self.width, cam.height, cam.width
            )));
        }
        Ok(())
    }
}

/// One bilinear splat of a vertex onto a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub vertex: usize,
    pub weight: f64,
    /// Which of the four cell corners this splat hit: bit 0 = right column, bit 1 = lower row.
    corner: u8,
}

/// A covered pixel of a render.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPixel {
    /// Linear lattice index `row * width + col`.
    pub index: usize,
    /// Depth-nearest contributing vertex.
    pub owner: usize,
    pub owner_depth: f64,
    /// Total splat weight.
    pub weight_sum: f64,
    splats: std::ops::Range<usize>,
}

/// Output of [`render`]: the rendered feature map, its foreground mask and the
/// pixel-vertex correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pose: Pose6D,
    features: FeatureMap,
    mask: Vec<bool>,
    pixels: Vec<RenderedPixel>,
    splats: Vec<Splat>,
}

impl RenderedScene {
    pub fn pose(&self) -> &Pose6D {
        &self.pose
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Covered pixels in ascending lattice order.
    pub fn pixels(&self) -> &[RenderedPixel] {
        &self.pixels
    }

    pub fn splats_of(&self, pixel: &RenderedPixel) -> &[Splat] {
        &self.splats[pixel.splats.clone()]
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.len()
    }

    /// Rendered feature at a covered pixel.
    pub fn feature(&self, pixel: &RenderedPixel) -> &[f64] {
        self.features.pixel(pixel.index)
    }

    /// Owner vertex of every lattice pixel, `None` on background.
    pub fn owner_map(&self) -> Vec<Option<usize>> {
        let mut owners = vec![None; self.mask.len()];
        for p in &self.pixels {
            owners[p.index] = Some(p.owner);
        }
        owners
    }
}

/// Render options.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderOptions {
    /// When set, the mesh feature dimension must equal this.
    pub channels: Option<usize>,
}

/// Bilinear footprint of a point: up to four `(col, row, weight, corner)` entries with
/// positive weight inside the lattice.
#[inline]
pub(crate) fn bilinear_footprint(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
    mut emit: impl FnMut(usize, usize, f64, u8),
) {
    let qx = x - 0.5;
    let qy = y - 0.5;
    if !(qx > -1.0 && qy > -1.0 && qx < width as f64 && qy < height as f64) {
        return;
    }
    let x0 = qx.floor();
    let y0 = qy.floor();
    let fx = qx - x0;
    let fy = qy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let wx = [1.0 - fx, fx];
    let wy = [1.0 - fy, fy];
    for corner in 0..4u8 {
        let dx = (corner & 1) as usize;
        let dy = (corner >> 1) as usize;
        let w = wx[dx] * wy[dy];
        if w <= 0.0 {
            continue;
        }
        let col = x0 + dx as isize;
        let row = y0 + dy as isize;
        if col < 0 || row < 0 || col >= width as isize || row >= height as isize {
            continue;
        }
        emit(col as usize, row as usize, w, corner);
    }
}

/// Bilinear weight for `corner` and its derivative with respect to the projected
/// position. At the exact apex of the hat (point on a pixel center) the symmetric
/// subgradient 0 is used.
#[inline]
fn bilinear_weight_grad(x: f64, y: f64, corner: u8) -> (f64, f64, f64) {
    let qx = x - 0.5;
    let qy = y - 0.5;
    let fx = qx - qx.floor();
    let fy = qy - qy.floor();
    let right = corner & 1 != 0;
    let lower = corner & 2 != 0;
    let (wx, dwx) = if right {
        (fx, 1.0)
    } else if fx == 0.0 {
        (1.0, 0.0)
    } else {
        (1.0 - fx, -1.0)
    };
    let (wy, dwy) = if lower {
        (fy, 1.0)
    } else if fy == 0.0 {
        (1.0, 0.0)
    } else {
        (1.0 - fy, -1.0)
    };
    (wx * wy, dwx * wy, wx * dwy)
}

/// A splat source: vertex id with its projected position and depth.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatPoint {
    pub vertex: usize,
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    /// Multiplier on the bilinear weights.
    pub scale: f64,
}

/// Faces fade in linearly while the cosine between their normal and the view ray
/// grows from 0 to this value.
pub const FACE_FADE: f64 = 0.1;

/// Smallest blend denominator. A pixel with total splat weight `W` renders
/// `sum w C / max(W, COVERAGE_FLOOR)`.
pub const COVERAGE_FLOOR: f64 = 0.25;

/// Fade of a vertex: the largest fade among its faces, and the face attaining it.
#[inline]
pub(crate) fn vertex_fade(mask: u8, facing: &[f64; 6]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for (f, c) in facing.iter().enumerate() {
        if mask & (1 << f) != 0 {
            let v = (c / FACE_FADE).clamp(0.0, 1.0);
            if v > best.0 {
                best = (v, f);
            }
        }
    }
    best
}

/// Reusable splatting buffers.
#[derive(Debug, Default)]
pub(crate) struct Splatter {
    slot_of: Vec<u32>,
    /// Lattice index per slot.
    pub slot_pixel: Vec<usize>,
    /// Weighted feature sums, `slots x c`.
    pub acc: Vec<f64>,
    /// Total splat weight per slot.
    pub weight: Vec<f64>,
    /// (owner vertex, owner depth, owner weight) per slot.
    pub owner: Vec<(usize, f64, f64)>,
    pub splats: Vec<(u32, Splat)>,
    record_splats: bool,
}

impl Splatter {
    pub fn new(num_pixels: usize, record_splats: bool) -> Self {
        Self {
            slot_of: vec![u32::MAX; num_pixels],
            record_splats,
            ..Default::default()
        }
    }

    pub fn num_slots(&self) -> usize {
        self.slot_pixel.len()
    }

    /// Splats `points`, blending the rows of `features` (`c` values per vertex).
    pub fn splat(
        &mut self,
        points: impl IntoIterator<Item = SplatPoint>,
        features: &[f64],
        channels: usize,
        width: usize,
        height: usize,
    ) {
        debug_assert_eq!(self.slot_of.len(), width * height);
        for p in points {
            let feat = &features[p.vertex * channels..(p.vertex + 1) * channels];
            bilinear_footprint(p.x, p.y, width, height, |col, row, w, corner| {
                let w = w * p.scale;
                let pixel = row * width + col;
                let mut slot = self.slot_of[pixel];
                if slot == u32::MAX {
                    slot = self.slot_pixel.len() as u32;
                    self.slot_of[pixel] = slot;
                    self.slot_pixel.push(pixel);
                    self.acc.extend(std::iter::repeat_n(0.0, channels));
                    self.weight.push(0.0);
                    self.owner.push((p.vertex, p.depth, w));
                } else {
                    let own = &mut self.owner[slot as usize];
                    let nearer = p.depth < own.1
                        || (p.depth == own.1 && (w > own.2 || (w == own.2 && p.vertex < own.0)));
                    if nearer {
                        *own = (p.vertex, p.depth, w);
                    }
                }
                self.weight[slot as usize] += w;
                let s = slot as usize * channels;
                for (a, f) in self.acc[s..s + channels].iter_mut().zip(feat) {
                    *a += w * f;
                }
                if self.record_splats {
                    self.splats.push((
                        slot,
                        Splat {
                            vertex: p.vertex,
                            weight: w,
                            corner,
                        },
                    ));
                }
            });
        }
    }

    /// Divides slot `s` by its blend denominator and returns the total weight.
    pub fn resolve_slot(&mut self, s: usize, channels: usize) -> f64 {
        let w = self.weight[s];
        let denom = w.max(COVERAGE_FLOOR);
        self.acc[s * channels..(s + 1) * channels]
            .iter_mut()
            .for_each(|x| *x /= denom);
        w
    }
}

pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-300 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Projects the visible vertices of `mesh` for `pose`.
pub(crate) fn visible_splat_points(
    mesh: &NeuralMesh,
    pose: &Pose6D,
    cam: &CameraIntrinsics,
) -> Result<Vec<SplatPoint>> {
    pose.validate()?;
    let geometry = mesh.geometry();
    let kin = PoseKinematics::new(pose, cam);
    let facing = face_facing(geometry, &kin);
    let mut points = Vec::new();
    for (i, v) in geometry.vertices().iter().enumerate() {
        let p = kin.project(v);
        if p.depth <= 0.0 {
            return Err(Error::BehindCamera {
                vertex: i,
                depth: p.depth,
            });
        }
        let (scale, _) = vertex_fade(geometry.face_mask(i), &facing);
        if scale > 0.0 {
            points.push(SplatPoint {
                vertex: i,
                x: p.x,
                y: p.y,
                depth: p.depth,
                scale,
            });
        }
    }
    Ok(points)
}

/// Renders `mesh` at `pose` into a feature map.
pub fn render(
    mesh: &NeuralMesh,
    pose: &Pose6D,
    cam: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Result<RenderedScene> {
    cam.validate()?;
    let c = mesh.channels();
    if let Some(expected) = opts.channels {
        if expected != c {
            return Err(param(format!(
                "mesh has {c} feature channels, expected {expected}"
            )));
        }
    }
    let points = visible_splat_points(mesh, pose, cam)?;
    let (w, h) = (cam.width, cam.height);
    let mut splatter = Splatter::new(w * h, true);
    splatter.splat(points, mesh.features(), c, w, h);

    // Order slots by lattice index so pixel lists are deterministic and sorted.
    let mut order: Vec<usize> = (0..splatter.num_slots()).collect();
    order.sort_unstable_by_key(|&s| splatter.slot_pixel[s]);
    let mut rank = vec![0usize; order.len()];
    for (r, &s) in order.iter().enumerate() {
        rank[s] = r;
    }

    // Group splats per pixel (stable, so per-pixel splat order follows vertex order).
    let mut counts = vec![0usize; order.len() + 1];
    for (slot, _) in &splatter.splats {
        counts[rank[*slot as usize] + 1] += 1;
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let starts = counts.clone();
    let mut cursor = counts;
    let mut splats = vec![
        Splat {
            vertex: 0,
            weight: 0.0,
            corner: 0
        };
        splatter.splats.len()
    ];
    for (slot, splat) in &splatter.splats {
        let r = rank[*slot as usize];
        splats[cursor[r]] = *splat;
        cursor[r] += 1;
    }

    let mut features = FeatureMap::zeros(h, w, c)?;
    let mut mask = vec![false; w * h];
    let mut pixels = Vec::with_capacity(order.len());
    for (r, &s) in order.iter().enumerate() {
        let weight_sum = splatter.resolve_slot(s, c);
        let index = splatter.slot_pixel[s];
        features
            .pixel_mut(index)
            .copy_from_slice(&splatter.acc[s * c..(s + 1) * c]);
        mask[index] = true;
        let (owner, owner_depth, _) = splatter.owner[s];
        pixels.push(RenderedPixel {
            index,
            owner,
            owner_depth,
            weight_sum,
            splats: starts[r]..starts[r + 1],
        });
    }

    Ok(RenderedScene {
        pose: *pose,
        features,
        mask,
        pixels,
        splats,
    })
}

/// Derivative of one splat weight with respect to the pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatDerivative {
    pub vertex: usize,
    pub weight: f64,
    pub d_weight: [f64; POSE_DIMS],
}

/// Per-pixel splat-weight derivatives of a render, with correspondences frozen.
#[derive(Debug, Clone)]
pub struct PoseJacobian {
    pose: Pose6D,
    /// Per covered pixel (same order as [`RenderedScene::pixels`]): range into `records`.
    ranges: Vec<std::ops::Range<usize>>,
    records: Vec<SplatDerivative>,
}

impl PoseJacobian {
    pub fn pose(&self) -> &Pose6D {
        &self.pose
    }

    /// Derivative records of the `k`-th covered pixel.
    pub fn pixel_records(&self, k: usize) -> &[SplatDerivative] {
        &self.records[self.ranges[k].clone()]
    }

    /// Chains per-pixel feature gradients `dL/dF` (one `c`-vector per covered pixel,
    /// in [`RenderedScene::pixels`] order) through the normalized blend and the splat
    /// weights, giving `dL/dm`.
    pub fn backprop(
        &self,
        scene: &RenderedScene,
        mesh: &NeuralMesh,
        d_features: &[f64],
    ) -> Result<[f64; POSE_DIMS]> {
        let c = mesh.channels();
        if d_features.len() != scene.pixels.len() * c || self.ranges.len() != scene.pixels.len() {
            return Err(Error::Consistency(
                "feature gradient does not match the rendered foreground".into(),
            ));
        }
        let mut grad = [0.0; POSE_DIMS];
        for (k, px) in scene.pixels.iter().enumerate() {
            let dl = &d_features[k * c..(k + 1) * c];
            if dl.iter().all(|&x| x == 0.0) {
                continue;
            }
            accumulate_pixel_grad(
                scene.feature(px),
                px.weight_sum,
                dl,
                self.pixel_records(k),
                mesh,
                &mut grad,
            );
        }
        Ok(grad)
    }
}

/// Adds `dL/dm` of one pixel given `dL/dF` at that pixel.
#[inline]
pub(crate) fn accumulate_pixel_grad(
    rendered: &[f64],
    weight_sum: f64,
    dl: &[f64],
    records: &[SplatDerivative],
    mesh: &NeuralMesh,
    grad: &mut [f64; POSE_DIMS],
) {
    // F = g / max(W, k): dF/dw_j = (C_j - F) / W above the floor, C_j / k below.
    let above = weight_sum > COVERAGE_FLOOR;
    let proj: f64 = if above {
        rendered.iter().zip(dl).map(|(f, d)| f * d).sum()
    } else {
        0.0
    };
    let denom = weight_sum.max(COVERAGE_FLOOR);
    for rec in records {
        let feat = mesh.feature(rec.vertex);
        let dot: f64 = dl.iter().zip(feat).map(|(d, cr)| d * cr).sum();
        let dl_dw = (dot - proj) / denom;
        for (g, dw) in grad.iter_mut().zip(&rec.d_weight) {
            *g += dl_dw * dw;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct VertexDerivative {
    x: f64,
    y: f64,
    grad: ProjectionGrad,
    fade: f64,
    d_fade: [f64; POSE_DIMS],
}

/// Splat-weight derivatives for a render produced by [`render`] at the same pose.
pub fn render_pose_jacobian(
    mesh: &NeuralMesh,
    pose: &Pose6D,
    cam: &CameraIntrinsics,
    scene: &RenderedScene,
) -> Result<PoseJacobian> {
    if scene.pose.to_array().map(f64::to_bits) != pose.to_array().map(f64::to_bits) {
        return Err(Error::Consistency(
            "rendered scene was produced at a different pose".into(),
        ));
    }
    if scene.features.width() != cam.width || scene.features.height() != cam.height {
        return Err(Error::Consistency("rendered scene does not match the camera".into()));
    }
    let kin = PoseKinematics::new(pose, cam);
    let geometry = mesh.geometry();
    let vertices = geometry.vertices();
    let facing = face_facing_with_grad(geometry, &kin);
    let cosines = facing.map(|(c, _)| c);
    let mut cache: Vec<Option<VertexDerivative>> = vec![None; vertices.len()];
    let mut ranges = Vec::with_capacity(scene.pixels.len());
    let mut records = Vec::with_capacity(scene.splats.len());
    for px in &scene.pixels {
        let start = records.len();
        for splat in scene.splats_of(px) {
            let vd = *cache[splat.vertex].get_or_insert_with(|| {
                let (p, g) = kin.project_with_grad(&vertices[splat.vertex]);
                let (fade, face) = vertex_fade(geometry.face_mask(splat.vertex), &cosines);
                let (c, dc) = facing[face];
                let d_fade = if c > 0.0 && c < FACE_FADE {
                    dc.map(|d| d / FACE_FADE)
                } else {
                    [0.0; POSE_DIMS]
                };
                VertexDerivative {
                    x: p.x,
                    y: p.y,
                    grad: g,
                    fade,
                    d_fade,
                }
            });
            let (w, dwdx, dwdy) = bilinear_weight_grad(vd.x, vd.y, splat.corner);
            let mut d_weight = [0.0; POSE_DIMS];
            for k in 0..POSE_DIMS {
                d_weight[k] =
                    vd.fade * (dwdx * vd.grad.dx[k] + dwdy * vd.grad.dy[k]) + w * vd.d_fade[k];
            }
            records.push(SplatDerivative {
                vertex: splat.vertex,
                weight: splat.weight,
                d_weight,
            });
        }
        ranges.push(start..records.len());
    }
    Ok(PoseJacobian {
        pose: *pose,
        ranges,
        records,
    })
}
