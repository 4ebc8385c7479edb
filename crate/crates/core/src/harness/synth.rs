use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::geometry::{CameraIntrinsics, CuboidMesh, Pose6D};
use crate::likelihood::{BackgroundModel, NeuralMesh};
use crate::render::{normalize_in_place, render, FeatureMap, RenderOptions};

/// Parameters of the reference neural mesh used as the feature oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub extents: [f64; 3],
    pub verts_per_side: usize,
    pub channels: usize,
    /// Angular frequency scale of the feature field over object coordinates.
    pub frequency: f64,
    /// Norm of the background mean.
    pub background_offset: f64,
    pub background_sigma: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            extents: CuboidMesh::default_extents(),
            verts_per_side: CuboidMesh::DEFAULT_VERTS_PER_SIDE,
            channels: 32,
            frequency: 6.0,
            background_offset: 0.2,
            background_sigma: 0.2,
        }
    }
}

/// Reference mesh plus background model.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub mesh: NeuralMesh,
    pub background: BackgroundModel,
}

/// Builds a mesh whose vertex features vary smoothly over the surface: channel `k`
/// is `cos(w_k . X + phi_k)` with random `w_k ~ N(0, frequency^2 I)`, then each
/// vertex vector is normalized.
pub fn reference_model(cfg: &ReferenceConfig, seed: u64) -> Result<ReferenceModel> {
    if !(cfg.frequency.is_finite() && cfg.frequency >= 0.0) {
        return Err(param("frequency must be finite and >= 0"));
    }
    let geometry = CuboidMesh::new(cfg.extents, cfg.verts_per_side)?;
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<([f64; 3], f64)> = (0..c)
        .map(|_| {
            let w = std::array::from_fn(|_| cfg.frequency * rng.sample::<f64, _>(StandardNormal));
            (w, rng.random_range(0.0..TAU))
        })
        .collect();
    let mut features = Vec::with_capacity(geometry.len() * c);
    for v in geometry.vertices() {
        for (w, phi) in &waves {
            features.push((w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + phi).cos());
        }
    }
    let mesh = NeuralMesh::from_unnormalized(geometry, c, features)?;
    let mut b: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    normalize_in_place(&mut b);
    b.iter_mut().for_each(|x| *x *= cfg.background_offset);
    let background = BackgroundModel::new(b, cfg.background_sigma)?;
    Ok(ReferenceModel { mesh, background })
}

/// Share of an object's visible foreground hidden by occluders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OcclusionLevel {
    L0,
    L1,
    L2,
    L3,
}

impl OcclusionLevel {
    pub const ALL: [OcclusionLevel; 4] = [Self::L0, Self::L1, Self::L2, Self::L3];

    pub fn from_index(i: u8) -> Result<Self> {
        Self::ALL
            .get(i as usize)
            .copied()
            .ok_or_else(|| param(format!("occlusion level must be 0..3, got {i}")))
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    /// Inclusive band of the occluded fraction.
    pub fn band(self) -> (f64, f64) {
        match self {
            Self::L0 => (0.0, 0.0),
            Self::L1 => (0.2, 0.4),
            Self::L2 => (0.4, 0.6),
            Self::L3 => (0.6, 0.8),
        }
    }
}

/// Objects and conditions of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Pose6D>,
    pub occlusion: OcclusionLevel,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub pose: Pose6D,
    pub mesh_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub features: FeatureMap,
    pub ground_truth: Vec<GroundTruth>,
    /// Per object: visible foreground pixels covered by occluders.
    pub occlusion_masks: Vec<Vec<bool>>,
    /// Per object: pixels where it is the front-most rendered object.
    pub visible_masks: Vec<Vec<bool>>,
    pub level: OcclusionLevel,
    pub seed: u64,
}

impl SyntheticScene {
    /// Occluded share of each object's visible foreground.
    pub fn occluded_fractions(&self) -> Vec<f64> {
        self.visible_masks
            .iter()
            .zip(&self.occlusion_masks)
            .map(|(v, o)| fraction(v, o))
            .collect()
    }
}

fn fraction(visible: &[bool], occluded: &[bool]) -> f64 {
    let n = visible.iter().filter(|&&x| x).count();
    if n == 0 {
        return 0.0;
    }
    let k = visible.iter().zip(occluded).filter(|(v, o)| **v && **o).count();
    k as f64 / n as f64
}

const OCCLUDER_TRIES: usize = 2000;
/// Targets are drawn this far inside the band.
const BAND_MARGIN: f64 = 0.02;

/// `|base| normalize(base / |base| + eps)`: noise on the direction, magnitude kept.
fn noisy_unit(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    out.copy_from_slice(base);
    if sigma > 0.0 {
        let norm = normalize_in_place(out);
        for x in out.iter_mut() {
            *x += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        normalize_in_place(out);
        if norm > 1e-300 {
            out.iter_mut().for_each(|x| *x *= norm);
        }
    }
}

/// Renders the objects far to near over a noisy background, then paints random
/// feature rectangles until every object's occluded share lies in the level band.
pub fn generate_scene(
    spec: &SceneSpec,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
    cam: &CameraIntrinsics,
    seed: u64,
) -> Result<SyntheticScene> {
    cam.validate()?;
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(param("noise sigma must be finite and >= 0"));
    }
    if bg.channels() != mesh.channels() {
        return Err(param("background and mesh channels differ"));
    }
    let c = mesh.channels();
    let npix = cam.width * cam.height;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = FeatureMap::zeros(cam.height, cam.width, c)?;
    for i in 0..npix {
        let f = features.pixel_mut(i);
        for (x, b) in f.iter_mut().zip(bg.mean()) {
            *x = b + bg.sigma() * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut order: Vec<usize> = (0..spec.objects.len()).collect();
    order.sort_by(|&a, &b| spec.objects[b].distance.total_cmp(&spec.objects[a].distance).then(a.cmp(&b)));
    let mut front: Vec<Option<usize>> = vec![None; npix];
    for &k in &order {
        let scene = render(mesh, &spec.objects[k], cam, &RenderOptions::default())?;
        if scene.pixels().is_empty() {
            return Err(Error::Generation(format!("object {k} is not in frame")));
        }
        for px in scene.pixels() {
            noisy_unit(scene.feature(px), spec.noise_sigma, &mut rng, features.pixel_mut(px.index));
            front[px.index] = Some(k);
        }
    }
    let visible_masks: Vec<Vec<bool>> = (0..spec.objects.len())
        .map(|k| front.iter().map(|o| *o == Some(k)).collect())
        .collect();

    let mut occluded = vec![false; npix];
    if spec.occlusion != OcclusionLevel::L0 {
        let (lo, hi) = spec.occlusion.band();
        place_occluders(cam, &visible_masks, lo, hi, &mut occluded, &mut rng, &mut features, spec.noise_sigma)?;
    }
    let occlusion_masks = visible_masks
        .iter()
        .map(|v| v.iter().zip(&occluded).map(|(a, b)| *a && *b).collect())
        .collect();
    Ok(SyntheticScene {
        features,
        ground_truth: spec
            .objects
            .iter()
            .map(|&pose| GroundTruth { pose, mesh_id: 0 })
            .collect(),
        occlusion_masks,
        visible_masks,
        level: spec.occlusion,
        seed,
    })
}

#[allow(clippy::too_many_arguments)]
fn place_occluders(
    cam: &CameraIntrinsics,
    visible: &[Vec<bool>],
    lo: f64,
    hi: f64,
    occluded: &mut [bool],
    rng: &mut ChaCha8Rng,
    features: &mut FeatureMap,
    noise: f64,
) -> Result<()> {
    let (w, h) = (cam.width, cam.height);
    let c = features.channels();
    let count = |m: &[bool]| m.iter().filter(|&&x| x).count();
    let totals: Vec<usize> = visible.iter().map(|v| count(v)).collect();
    let hits = |k: usize, occ: &[bool]| -> usize {
        visible[k].iter().zip(occ).filter(|(v, o)| **v && **o).count()
    };
    let upper = hi - BAND_MARGIN / 2.0;
    for k in 0..visible.len() {
        if totals[k] == 0 {
            continue;
        }
        let target = rng.random_range(lo + BAND_MARGIN..=hi - BAND_MARGIN);
        let (mut c0, mut r0, mut c1, mut r1) = (w, h, 0, 0);
        for (i, &v) in visible[k].iter().enumerate() {
            if v {
                let (col, row) = (i % w, i / w);
                c0 = c0.min(col);
                r0 = r0.min(row);
                c1 = c1.max(col);
                r1 = r1.max(row);
            }
        }
        let (bw, bh) = (c1 - c0 + 1, r1 - r0 + 1);
        let mut tries = 0;
        while (hits(k, occluded) as f64) < target * totals[k] as f64 {
            tries += 1;
            if tries > OCCLUDER_TRIES {
                return Err(Error::Generation(format!(
                    "could not occlude object {k} into [{lo}, {hi}]"
                )));
            }
            // Shrink rectangles as the target gets close.
            let scale = if tries > OCCLUDER_TRIES / 2 { 0.15 } else { 0.6 };
            let rw = rng.random_range(1..=((bw as f64 * scale).ceil() as usize).max(1));
            let rh = rng.random_range(1..=((bh as f64 * scale).ceil() as usize).max(1));
            let x0 = rng.random_range(c0 as i64 - rw as i64 + 1..=c1 as i64).max(0) as usize;
            let y0 = rng.random_range(r0 as i64 - rh as i64 + 1..=r1 as i64).max(0) as usize;
            let (x1, y1) = ((x0 + rw).min(w), (y0 + rh).min(h));
            let mut trial = occluded.to_vec();
            for row in y0..y1 {
                for col in x0..x1 {
                    trial[row * w + col] = true;
                }
            }
            let ok = (0..visible.len()).all(|j| {
                totals[j] == 0 || (hits(j, &trial) as f64) <= upper * totals[j] as f64
            });
            if !ok {
                continue;
            }
            let mut base: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            normalize_in_place(&mut base);
            let mut buf = vec![0.0; c];
            for row in y0..y1 {
                for col in x0..x1 {
                    let i = row * w + col;
                    noisy_unit(&base, noise, rng, &mut buf);
                    features.pixel_mut(i).copy_from_slice(&buf);
                }
            }
            occluded.copy_from_slice(&trial);
        }
    }
    for k in 0..visible.len() {
        if totals[k] == 0 {
            continue;
        }
        let f = hits(k, occluded) as f64 / totals[k] as f64;
        if f < lo || f > hi {
            return Err(Error::Generation(format!(
                "object {k} ended with occluded share {f:.3} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Ranges of randomly drawn ground-truth poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSampler {
    pub elevation: (f64, f64),
    pub theta: (f64, f64),
    pub u: (f64, f64),
    pub v: (f64, f64),
    pub distance: (f64, f64),
}

impl PoseSampler {
    pub fn for_camera(cam: &CameraIntrinsics) -> Self {
        let (sx, sy) = (0.1875 * cam.width as f64, 0.1875 * cam.height as f64);
        Self {
            elevation: (-PI / 5.0, PI / 5.0),
            theta: (-PI / 6.0, PI / 6.0),
            u: (cam.cx() - sx, cam.cx() + sx),
            v: (cam.cy() - sy, cam.cy() + sy),
            distance: (3.0, 5.0),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Pose6D {
        let mut draw = |r: (f64, f64)| rng.random_range(r.0..=r.1);
        let azimuth = draw((0.0, TAU - 1e-12));
        let elevation = draw(self.elevation);
        let theta = draw(self.theta);
        let u = draw(self.u);
        let v = draw(self.v);
        let distance = draw(self.distance);
        Pose6D::new(azimuth, elevation, theta, u, v, distance)
    }

    /// Two poses whose projections overlap: centroids 6 to 12 pixels apart and
    /// distances at least 0.5 apart.
    pub fn sample_overlapping_pair(&self, rng: &mut impl Rng) -> [Pose6D; 2] {
        let first = self.sample(rng);
        loop {
            let mut second = self.sample(rng);
            let r = rng.random_range(6.0..=12.0);
            let phi = rng.random_range(0.0..TAU);
            second.u = first.u + r * phi.cos();
            second.v = first.v + r * phi.sin();
            let inside = |x: f64, lim: (f64, f64)| x >= lim.0 && x <= lim.1;
            if inside(second.u, self.u)
                && inside(second.v, self.v)
                && (second.distance - first.distance).abs() >= 0.5
            {
                return [first, second];
            }
        }
    }
}

/// Random single- or two-object scene spec.
pub fn random_spec(
    sampler: &PoseSampler,
    objects: usize,
    occlusion: OcclusionLevel,
    noise_sigma: f64,
    seed: u64,
) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = match objects {
        0 => Vec::new(),
        1 => vec![sampler.sample(&mut rng)],
        2 => sampler.sample_overlapping_pair(&mut rng).to_vec(),
        n => (0..n).map(|_| sampler.sample(&mut rng)).collect(),
    };
    Ok(SceneSpec {
        objects,
        occlusion,
        noise_sigma,
    })
}
