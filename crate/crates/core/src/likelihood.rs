//! Generative model of feature activations over a rendered neural mesh.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{param, Error, Result};
use crate::geometry::CuboidMesh;
use crate::geometry::POSE_DIMS;
use crate::render::{normalize_in_place, FeatureMap, PoseJacobian, RenderedScene};

/// Cuboid mesh with a unit-norm feature vector and a spread per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMesh {
    geometry: CuboidMesh,
    channels: usize,
    features: Vec<f64>,
    sigma: Vec<f64>,
}

impl NeuralMesh {
    pub const UNIT_NORM_TOL: f64 = 1e-6;

    pub fn new(
        geometry: CuboidMesh,
        channels: usize,
        features: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let n = geometry.len();
        if channels == 0 {
            return Err(param("feature channels must be positive"));
        }
        if features.len() != n * channels {
            return Err(param(format!(
                "expected {} feature values for {n} vertices x {channels} channels, got {}",
                n * channels,
                features.len()
            )));
        }
        if sigma.len() != n {
            return Err(param(format!("expected {n} vertex sigmas, got {}", sigma.len())));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(param("vertex sigmas must be positive"));
        }
        for (i, f) in features.chunks_exact(channels).enumerate() {
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > Self::UNIT_NORM_TOL {
                return Err(param(format!("vertex {i} feature has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            geometry,
            channels,
            features,
            sigma,
        })
    }

    /// Normalizes each row of `features` and uses unit sigmas.
    pub fn from_unnormalized(
        geometry: CuboidMesh,
        channels: usize,
        mut features: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || features.len() != geometry.len() * channels {
            return Err(param("feature array does not match mesh size"));
        }
        for f in features.chunks_exact_mut(channels) {
            if normalize_in_place(f) <= 1e-300 {
                return Err(param("cannot normalize a zero feature vector"));
            }
        }
        let sigma = vec![1.0; geometry.len()];
        Self::new(geometry, channels, features, sigma)
    }

    /// Independent uniformly random unit features.
    pub fn random(geometry: CuboidMesh, channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..geometry.len() * channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self::from_unnormalized(geometry, channels, features)
    }

    pub fn geometry(&self) -> &CuboidMesh {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, vertex: usize) -> &[f64] {
        &self.features[vertex * self.channels..(vertex + 1) * self.channels]
    }

    /// Overwrites a vertex feature with the normalized `value`.
    pub fn set_feature(&mut self, vertex: usize, value: &[f64]) -> Result<()> {
        if value.len() != self.channels {
            return Err(param("feature length does not match channel count"));
        }
        let dst = &mut self.features[vertex * self.channels..(vertex + 1) * self.channels];
        dst.copy_from_slice(value);
        if normalize_in_place(dst) <= 1e-300 {
            return Err(param("cannot normalize a zero feature vector"));
        }
        Ok(())
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn set_sigma(&mut self, sigma: Vec<f64>) -> Result<()> {
        if sigma.len() != self.len() || sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(param("vertex sigmas must be positive, one per vertex"));
        }
        self.sigma = sigma;
        Ok(())
    }
}

/// Isotropic Gaussian background feature model.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    mean: Vec<f64>,
    sigma: f64,
}

impl BackgroundModel {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if mean.is_empty() || mean.iter().any(|x| !x.is_finite()) {
            return Err(param("background mean must be a finite non-empty vector"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(param(format!("background sigma must be positive, got {sigma}")));
        }
        Ok(Self { mean, sigma })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Per-pixel assignment of the lattice to at most one of `k` objects.
///
/// Stored as an owner per pixel, which makes the exactly-one-or-background
/// invariant structural.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipMap {
    height: usize,
    width: usize,
    layers: usize,
    owner: Vec<Option<u32>>,
}

impl OwnershipMap {
    pub fn new(height: usize, width: usize, layers: usize) -> Self {
        Self {
            height,
            width,
            layers,
            owner: vec![None; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// `Z[pixel, layer]` as 0 or 1.
    pub fn z(&self, pixel: usize, layer: usize) -> u8 {
        u8::from(self.owner[pixel] == Some(layer as u32))
    }

    pub fn owner(&self, pixel: usize) -> Option<usize> {
        self.owner[pixel].map(|o| o as usize)
    }

    pub fn assign(&mut self, pixel: usize, layer: Option<usize>) {
        debug_assert!(layer.is_none_or(|l| l < self.layers));
        self.owner[pixel] = layer.map(|l| l as u32);
    }

    /// Binary mask of one layer.
    pub fn layer(&self, layer: usize) -> Vec<bool> {
        self.owner.iter().map(|o| *o == Some(layer as u32)).collect()
    }

    pub fn count(&self, layer: usize) -> usize {
        self.owner.iter().filter(|o| **o == Some(layer as u32)).count()
    }

    /// Stacks single-layer maps into one map with a layer per input.
    pub fn stack(maps: &[OwnershipMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| param("nothing to stack"))?;
        let mut out = Self::new(first.height, first.width, maps.len());
        for (k, m) in maps.iter().enumerate() {
            if m.height != first.height || m.width != first.width {
                return Err(param("ownership maps differ in size"));
            }
            for (p, o) in m.owner.iter().enumerate() {
                if o.is_some() {
                    if out.owner[p].is_some() {
                        return Err(Error::Consistency(format!(
                            "pixel {p} is claimed by more than one layer"
                        )));
                    }
                    out.owner[p] = Some(k as u32);
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(features: &FeatureMap, scene: &RenderedScene, mesh: &NeuralMesh) -> Result<()> {
    let r = scene.features();
    if features.height() != r.height() || features.width() != r.width() {
        return Err(param(format!(
            "feature map is {}x{}, render is {}x{}",
            features.height(),
            features.width(),
            r.height(),
            r.width()
        )));
    }
    if features.channels() != mesh.channels() || r.channels() != mesh.channels() {
        return Err(param(format!(
            "feature map has {} channels, mesh has {}",
            features.channels(),
            mesh.channels()
        )));
    }
    Ok(())
}

fn check_background(features: &FeatureMap, bg: &BackgroundModel) -> Result<()> {
    if bg.channels() != features.channels() {
        return Err(param(format!(
            "background has {} channels, feature map has {}",
            bg.channels(),
            features.channels()
        )));
    }
    Ok(())
}

/// `0.5 * |f_i - b|^2` for every pixel.
pub fn background_costs(features: &FeatureMap, bg: &BackgroundModel) -> Result<Vec<f64>> {
    check_background(features, bg)?;
    Ok(features.pixels().map(|f| 0.5 * sq_dist(f, bg.mean())).collect())
}

/// Negative log-likelihood of `features` under the rendered mesh and background.
///
/// With `unit_variance` the Gaussian normalizers are dropped and all spreads are 1,
/// leaving `0.5 * sum_FG |f - F_render|^2 + 0.5 * sum_BG |f - b|^2`. Otherwise each
/// foreground pixel uses the spread of its owner vertex.
pub fn nll(
    features: &FeatureMap,
    scene: &RenderedScene,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
    unit_variance: bool,
) -> Result<f64> {
    check_dims(features, scene, mesh)?;
    check_background(features, bg)?;
    let log_norm = |s: f64| (s * (2.0 * PI).sqrt()).ln();
    let mask = scene.mask();
    let mut total = 0.0;
    for (i, f) in features.pixels().enumerate() {
        if !mask[i] {
            let d = sq_dist(f, bg.mean());
            total += if unit_variance {
                0.5 * d
            } else {
                log_norm(bg.sigma()) + d / (2.0 * bg.sigma() * bg.sigma())
            };
        }
    }
    for px in scene.pixels() {
        let d = sq_dist(features.pixel(px.index), scene.feature(px));
        total += if unit_variance {
            0.5 * d
        } else {
            let s = mesh.sigma()[px.owner];
            log_norm(s) + d / (2.0 * s * s)
        };
    }
    Ok(total)
}

/// Foreground/background assignment of covered pixels: `Z = 1` where the observed
/// feature is at least as close to the rendered feature as to the background mean.
pub fn zmap(
    features: &FeatureMap,
    scene: &RenderedScene,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
) -> Result<OwnershipMap> {
    check_dims(features, scene, mesh)?;
    check_background(features, bg)?;
    let mut z = OwnershipMap::new(features.height(), features.width(), 1);
    for px in scene.pixels() {
        let f = features.pixel(px.index);
        if sq_dist(f, scene.feature(px)) <= sq_dist(f, bg.mean()) {
            z.assign(px.index, Some(0));
        }
    }
    Ok(z)
}

/// Unit-variance NLL with foreground membership taken from layer `layer` of `z`.
///
/// A pixel uses the rendered-feature term when `Z[i, layer] = 1` and it is covered by
/// the render, the background term otherwise. Pixels assigned to another layer
/// are excluded from both sums.
pub fn nll_masked(
    features: &FeatureMap,
    scene: &RenderedScene,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
    z: &OwnershipMap,
    layer: usize,
) -> Result<f64> {
    check_dims(features, scene, mesh)?;
    check_background(features, bg)?;
    if z.height() != features.height() || z.width() != features.width() {
        return Err(param("ownership map does not match the feature map"));
    }
    if layer >= z.layers() {
        return Err(param(format!("layer {layer} out of range for {} layers", z.layers())));
    }
    let mask = scene.mask();
    let mut total = 0.0;
    for (i, f) in features.pixels().enumerate() {
        match z.owner(i) {
            Some(o) if o != layer => {}
            Some(_) if mask[i] => {}
            _ => total += 0.5 * sq_dist(f, bg.mean()),
        }
    }
    for px in scene.pixels() {
        if z.owner(px.index) == Some(layer) {
            total += 0.5 * sq_dist(features.pixel(px.index), scene.feature(px));
        }
    }
    Ok(total)
}

/// Pose gradient of [`nll_masked`] with `z` and the render's correspondences held
/// fixed. `jacobian` must come from [`crate::render::render_pose_jacobian`] for `scene`.
pub fn nll_masked_gradient(
    features: &FeatureMap,
    scene: &RenderedScene,
    jacobian: &PoseJacobian,
    mesh: &NeuralMesh,
    z: &OwnershipMap,
    layer: usize,
) -> Result<[f64; POSE_DIMS]> {
    check_dims(features, scene, mesh)?;
    if z.height() != features.height() || z.width() != features.width() || layer >= z.layers() {
        return Err(param("ownership map does not match the feature map"));
    }
    let c = mesh.channels();
    let mut d_features = vec![0.0; scene.pixels().len() * c];
    for (k, px) in scene.pixels().iter().enumerate() {
        if z.owner(px.index) == Some(layer) {
            let f = features.pixel(px.index);
            for ((d, r), o) in d_features[k * c..(k + 1) * c].iter_mut().zip(scene.feature(px)).zip(f) {
                *d = r - o;
            }
        }
    }
    jacobian.backprop(scene, mesh, &d_features)
}

/// Label of a pixel for the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLabel {
    Vertex(usize),
    Background,
    Ignore,
}

/// Contrastive loss over pixel features and its gradient with respect to every raw
/// pixel feature.
///
/// Features are projected onto the unit sphere first; the loss is
/// `-sum_{i in FG} sum_{j in FG, j != i} |f_i - f_j|^2 - sum_{i in FG} sum_{j in BG} |f_i - f_j|^2`
/// with ordered pairs.
pub fn contrastive_loss(
    features: &FeatureMap,
    labels: &[PixelLabel],
) -> Result<(f64, FeatureMap)> {
    let c = features.channels();
    if labels.len() != features.num_pixels() {
        return Err(param("one label per pixel required"));
    }
    let mut unit = features.clone();
    let mut norms = vec![0.0; features.num_pixels()];
    for (i, n) in norms.iter_mut().enumerate() {
        *n = normalize_in_place(unit.pixel_mut(i));
    }
    let mut sum_fg = vec![0.0; c];
    let mut sum_bg = vec![0.0; c];
    let (mut n_fg, mut n_bg) = (0usize, 0usize);
    let (mut sq_fg, mut sq_bg) = (0.0, 0.0);
    for (i, label) in labels.iter().enumerate() {
        let (sum, count, sq) = match label {
            PixelLabel::Vertex(_) => (&mut sum_fg, &mut n_fg, &mut sq_fg),
            PixelLabel::Background => (&mut sum_bg, &mut n_bg, &mut sq_bg),
            PixelLabel::Ignore => continue,
        };
        let f = unit.pixel(i);
        for (s, x) in sum.iter_mut().zip(f) {
            *s += x;
        }
        *sq += f.iter().map(|x| x * x).sum::<f64>();
        *count += 1;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (nf, nb) = (n_fg as f64, n_bg as f64);
    // sum_{i != j} |a_i - a_j|^2 = 2 n sum |a_i|^2 - 2 |sum a_i|^2
    let pair_fg = 2.0 * nf * sq_fg - 2.0 * dot(&sum_fg, &sum_fg);
    let cross = nb * sq_fg + nf * sq_bg - 2.0 * dot(&sum_fg, &sum_bg);
    let loss = -(pair_fg + cross);

    let mut grad = FeatureMap::zeros(features.height(), features.width(), c)?;
    let mut g_unit = vec![0.0; c];
    for (i, label) in labels.iter().enumerate() {
        let a = unit.pixel(i);
        match label {
            PixelLabel::Vertex(_) => {
                for k in 0..c {
                    g_unit[k] = -(4.0 * nf * a[k] - 4.0 * sum_fg[k])
                        - (2.0 * nb * a[k] - 2.0 * sum_bg[k]);
                }
            }
            PixelLabel::Background => {
                for k in 0..c {
                    g_unit[k] = -(2.0 * nf * a[k] - 2.0 * sum_fg[k]);
                }
            }
            PixelLabel::Ignore => continue,
        }
        if norms[i] <= 1e-300 {
            continue;
        }
        // Chain through a = f / |f|.
        let radial = dot(&g_unit, a);
        let out = grad.pixel_mut(i);
        for k in 0..c {
            out[k] = (g_unit[k] - a[k] * radial) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Per-pixel `min_r |C_r - f_i|^2` over all vertex features.
pub fn reconstruction_heatmap(features: &FeatureMap, mesh: &NeuralMesh) -> Result<Vec<f64>> {
    if features.channels() != mesh.channels() {
        return Err(param("feature map and mesh channel counts differ"));
    }
    let c = mesh.channels();
    Ok(features
        .pixels()
        .map(|f| {
            mesh.features()
                .chunks_exact(c)
                .map(|cr| sq_dist(cr, f))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}
