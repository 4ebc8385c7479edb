//! Fitting vertex features and the background model from posed feature maps.
//!
//! Vertex features follow a per-vertex moving average of the observed features at
//! the pixels the vertex owns under the ground-truth render. With momentum `1/n`
//! on the `n`-th observation the average is the exact sample mean; a momentum floor
//! turns it into exponential forgetting later on.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{param, Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6D};
use crate::likelihood::{contrastive_loss, BackgroundModel, NeuralMesh, PixelLabel};
use crate::render::{normalize_in_place, render, FeatureMap, RenderOptions};

/// Lower bound applied to estimated background spreads.
pub const SIGMA_MIN: f64 = 1e-3;

/// Posed feature map used for fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: FeatureMap,
    pub pose: Pose6D,
    pub camera: CameraIntrinsics,
    /// Pixels known to show the object; when absent the ground-truth render decides.
    pub fg_mask: Option<Vec<bool>>,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<()> {
        self.pose.validate()?;
        self.camera.validate()?;
        self.features.check_camera(&self.camera)?;
        if let Some(mask) = &self.fg_mask {
            if mask.len() != self.features.num_pixels() {
                return Err(param("foreground mask does not match the feature map"));
            }
        }
        Ok(())
    }
}

/// Bilinear sample of `map` at continuous image position `(x, y)`, clamped at the border.
fn sample_bilinear(map: &FeatureMap, x: f64, y: f64, out: &mut [f64]) {
    let (w, h) = (map.width(), map.height());
    let qx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let qy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = qx.floor() as usize;
    let y0 = qy.floor() as usize;
    let fx = qx - x0 as f64;
    let fy = qy - y0 as f64;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    out.fill(0.0);
    for (col, row, wgt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wgt == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(map.at(row, col)) {
            *o += wgt * v;
        }
    }
}

/// Downscales the sample by `s` about the image center and pads the border with
/// background draws. The object moves `s` times farther away: `d' = d * s`.
pub fn scale_augment(
    sample: &TrainingSample,
    s: f64,
    bg: &BackgroundModel,
    rng_seed: u64,
) -> Result<TrainingSample> {
    if !(s.is_finite() && s >= 1.0) {
        return Err(param(format!("scale factor must be >= 1, got {s}")));
    }
    sample.validate()?;
    let src = &sample.features;
    let (w, h, c) = (src.width(), src.height(), src.channels());
    if bg.channels() != c {
        return Err(param("background model does not match the feature channels"));
    }
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let noise = Normal::new(0.0, bg.sigma()).map_err(|e| param(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = FeatureMap::zeros(h, w, c)?;
    let mut mask = sample.fg_mask.as_ref().map(|_| vec![false; w * h]);
    for row in 0..h {
        for col in 0..w {
            let sx = (col as f64 + 0.5 - cx) * s + cx;
            let sy = (row as f64 + 0.5 - cy) * s + cy;
            let idx = row * w + col;
            let inside = (0.0..=w as f64).contains(&sx) && (0.0..=h as f64).contains(&sy);
            if inside {
                sample_bilinear(src, sx, sy, out.pixel_mut(idx));
                if let (Some(m), Some(src_mask)) = (mask.as_mut(), sample.fg_mask.as_ref()) {
                    let nc = (sx.floor() as usize).min(w - 1);
                    let nr = (sy.floor() as usize).min(h - 1);
                    m[idx] = src_mask[nr * w + nc];
                }
            } else {
                for (o, b) in out.pixel_mut(idx).iter_mut().zip(bg.mean()) {
                    *o = b + noise.sample(&mut rng);
                }
            }
        }
    }
    let pose = Pose6D {
        u: cx + (sample.pose.u - cx) / s,
        v: cy + (sample.pose.v - cy) / s,
        distance: sample.pose.distance * s,
        ..sample.pose
    };
    Ok(TrainingSample {
        features: out,
        pose,
        camera: sample.camera,
        fg_mask: mask,
    })
}

/// Pixels of `sample` with their owning vertex under the ground-truth render.
fn correspondences(mesh: &NeuralMesh, sample: &TrainingSample) -> Result<Vec<(usize, usize)>> {
    sample.validate()?;
    if sample.features.channels() != mesh.channels() {
        return Err(param("sample channels do not match the mesh"));
    }
    let scene = render(mesh, &sample.pose, &sample.camera, &RenderOptions::default())?;
    Ok(scene
        .pixels()
        .iter()
        .filter(|px| sample.fg_mask.as_ref().is_none_or(|m| m[px.index]))
        .map(|px| (px.index, px.owner))
        .collect())
}

/// One moving-average pass with a fixed momentum:
/// `C_r <- normalize((1 - momentum) C_r + momentum f_i)` for every owned pixel.
pub fn update_vertex_features(
    mesh: &NeuralMesh,
    sample: &TrainingSample,
    momentum: f64,
) -> Result<NeuralMesh> {
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(param(format!("momentum must lie in (0, 1], got {momentum}")));
    }
    let pairs = correspondences(mesh, sample)?;
    let mut out = mesh.clone();
    let mut buf = vec![0.0; mesh.channels()];
    for (pixel, vertex) in pairs {
        let f = sample.features.pixel(pixel);
        for ((b, c), x) in buf.iter_mut().zip(out.feature(vertex)).zip(f) {
            *b = (1.0 - momentum) * c + momentum * x;
        }
        // A degenerate blend (exactly opposite vectors) leaves the vertex as it was.
        if buf.iter().any(|x| *x != 0.0) {
            out.set_feature(vertex, &buf)?;
        }
    }
    Ok(out)
}

/// Per-vertex moving average with momentum `max(1/n, floor)` on the `n`-th observation.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingAverage {
    channels: usize,
    accum: Vec<f64>,
    counts: Vec<u64>,
    min_momentum: f64,
}

impl MovingAverage {
    pub const DEFAULT_MIN_MOMENTUM: f64 = 0.01;

    pub fn new(vertices: usize, channels: usize, min_momentum: f64) -> Self {
        Self {
            channels,
            accum: vec![0.0; vertices * channels],
            counts: vec![0; vertices],
            min_momentum,
        }
    }

    /// Starts from the current mesh features, counted as zero observations.
    pub fn from_mesh(mesh: &NeuralMesh, min_momentum: f64) -> Self {
        Self {
            channels: mesh.channels(),
            accum: mesh.features().to_vec(),
            counts: vec![0; mesh.len()],
            min_momentum,
        }
    }

    pub fn momentum(&self, observations: u64) -> f64 {
        (1.0 / observations as f64).max(self.min_momentum)
    }

    pub fn observe(&mut self, vertex: usize, feature: &[f64]) {
        self.counts[vertex] += 1;
        let mu = self.momentum(self.counts[vertex]);
        let c = self.channels;
        for (a, f) in self.accum[vertex * c..(vertex + 1) * c].iter_mut().zip(feature) {
            *a = (1.0 - mu) * *a + mu * f;
        }
    }

    pub fn count(&self, vertex: usize) -> u64 {
        self.counts[vertex]
    }

    /// Unnormalized running average of a vertex.
    pub fn accumulator(&self, vertex: usize) -> &[f64] {
        &self.accum[vertex * self.channels..(vertex + 1) * self.channels]
    }

    /// Writes the normalized averages of every observed vertex into `mesh`.
    pub fn write_to(&self, mesh: &mut NeuralMesh) -> Result<()> {
        for v in 0..self.counts.len() {
            if self.counts[v] > 0 && self.accumulator(v).iter().any(|x| *x != 0.0) {
                mesh.set_feature(v, self.accumulator(v))?;
            }
        }
        Ok(())
    }

    /// Replaces the direction of vertex accumulators by the mesh features while
    /// keeping their magnitudes.
    fn realign(&mut self, mesh: &NeuralMesh) {
        let c = self.channels;
        for v in 0..self.counts.len() {
            let acc = &mut self.accum[v * c..(v + 1) * c];
            let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (a, f) in acc.iter_mut().zip(mesh.feature(v)) {
                *a = f * norm;
            }
        }
    }
}

/// Maximum likelihood background model from all pixels outside the ground-truth
/// foreground (the sample mask when given, the mesh render otherwise).
pub fn estimate_background(samples: &[TrainingSample], mesh: &NeuralMesh) -> Result<BackgroundModel> {
    let c = mesh.channels();
    let mut sum = vec![0.0; c];
    let mut pixels: Vec<&[f64]> = Vec::new();
    for sample in samples {
        sample.validate()?;
        if sample.features.channels() != c {
            return Err(param("sample channels do not match the mesh"));
        }
        let fg = match &sample.fg_mask {
            Some(m) => m.clone(),
            None => render(mesh, &sample.pose, &sample.camera, &RenderOptions::default())?
                .mask()
                .to_vec(),
        };
        for (i, f) in sample.features.pixels().enumerate() {
            if !fg[i] {
                for (s, x) in sum.iter_mut().zip(f) {
                    *s += x;
                }
                pixels.push(f);
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::Estimation("no background pixels in the samples".into()));
    }
    let n = pixels.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let sq: f64 = pixels
        .iter()
        .map(|f| f.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    let sigma = (sq / (n * c as f64)).sqrt().max(SIGMA_MIN);
    BackgroundModel::new(mean, sigma)
}

/// Options for [`train_features`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    pub min_momentum: f64,
    /// Re-estimate the background after this many samples; 0 means once per epoch.
    pub background_every: usize,
    /// Step size of a contrastive update on the vertex features after every epoch;
    /// 0 disables it.
    pub contrastive_step: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            min_momentum: MovingAverage::DEFAULT_MIN_MOMENTUM,
            background_every: 0,
            contrastive_step: 0.0,
        }
    }
}

/// One contrastive gradient step on the vertex features, with the background mean
/// as the only background sample.
fn contrastive_step(mesh: &mut NeuralMesh, bg: &BackgroundModel, step: f64) -> Result<()> {
    let n = mesh.len();
    let c = mesh.channels();
    let mut data = mesh.features().to_vec();
    data.extend_from_slice(bg.mean());
    let map = FeatureMap::from_vec(n + 1, 1, c, data)?;
    let mut labels: Vec<PixelLabel> = (0..n).map(PixelLabel::Vertex).collect();
    labels.push(PixelLabel::Background);
    let (_, grad) = contrastive_loss(&map, &labels)?;
    // Scale by the number of pairs so the step size is resolution independent.
    let scale = step / (n as f64);
    let mut buf = vec![0.0; c];
    for v in 0..n {
        for ((b, f), g) in buf.iter_mut().zip(mesh.feature(v)).zip(grad.pixel(v)) {
            *b = f - scale * g;
        }
        if normalize_in_place(&mut buf) > 1e-300 {
            mesh.set_feature(v, &buf)?;
        }
    }
    Ok(())
}

/// Fits vertex features and the background model to a posed dataset.
///
/// Each epoch visits the samples in a seeded random order and feeds every owned
/// pixel into the per-vertex moving average; the background is re-estimated
/// periodically. With `epochs == 0` the inputs are returned unchanged.
pub fn train_features(
    init_mesh: &NeuralMesh,
    init_bg: &BackgroundModel,
    dataset: &[TrainingSample],
    epochs: usize,
    opts: &TrainOptions,
) -> Result<(NeuralMesh, BackgroundModel)> {
    if dataset.is_empty() {
        return Err(param("training dataset is empty"));
    }
    let mut mesh = init_mesh.clone();
    let mut bg = init_bg.clone();
    if epochs == 0 {
        return Ok((mesh, bg));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut avg = MovingAverage::from_mesh(&mesh, opts.min_momentum);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut seen = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let sample = &dataset[i];
            for (pixel, vertex) in correspondences(&mesh, sample)? {
                avg.observe(vertex, sample.features.pixel(pixel));
            }
            avg.write_to(&mut mesh)?;
            seen += 1;
            if opts.background_every > 0 && seen % opts.background_every == 0 {
                bg = estimate_background(dataset, &mesh)?;
            }
        }
        if opts.background_every == 0 {
            bg = estimate_background(dataset, &mesh)?;
        }
        if opts.contrastive_step > 0.0 {
            contrastive_step(&mut mesh, &bg, opts.contrastive_step)?;
            avg.realign(&mesh);
        }
    }
    Ok((mesh, bg))
}
