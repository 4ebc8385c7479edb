#![allow(dead_code)]

use meshpose::estimator::PoseGrid;
use meshpose::geometry::POSE_DIMS;
use meshpose::harness::{
    generate_scene, reference_model, OcclusionLevel, PoseSampler, ReferenceConfig, ReferenceModel, SceneSpec,
    SyntheticScene,
};
use meshpose::likelihood::{nll_masked, nll_masked_gradient};
use meshpose::render::COVERAGE_FLOOR;
use meshpose::{
    render, render_pose_jacobian, BackgroundModel, CameraIntrinsics, FeatureMap, NeuralMesh, OwnershipMap, Pose6D,
    RenderOptions, RenderedScene,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 64, 64).unwrap()
}

pub fn model(seed: u64) -> ReferenceModel {
    reference_model(&ReferenceConfig::default(), seed).unwrap()
}

pub fn scene(m: &ReferenceModel, objects: Vec<Pose6D>, level: OcclusionLevel, noise: f64, seed: u64) -> SyntheticScene {
    let spec = SceneSpec {
        objects,
        occlusion: level,
        noise_sigma: noise,
    };
    generate_scene(&spec, &m.mesh, &m.background, &cam(), seed).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unit-variance NLL of every grid pose, with the object rendered at the image
/// center on a lattice padded by one image size and moved by the whole-pixel
/// offset to its grid centroid. Entries are `(score, template, offset)` with
/// templates distance-fastest and offsets u-major, as the search numbers them.
pub fn brute_force_scores(
    features: &FeatureMap,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
    cam: &CameraIntrinsics,
    grid: &PoseGrid,
) -> Vec<(f64, usize, usize)> {
    let (w, h) = (cam.width, cam.height);
    let big = CameraIntrinsics::new(cam.focal_length, 3 * w, 3 * h).unwrap();
    let nd = grid.distances().len();
    let mut out = Vec::new();
    for (r, &[a, e, t]) in grid.rotations().iter().enumerate() {
        for (k, &d) in grid.distances().iter().enumerate() {
            let pose = Pose6D::new(a, e, t, big.cx(), big.cy(), d);
            let padded = render(mesh, &pose, &big, &RenderOptions::default()).unwrap();
            let mask = padded.mask();
            let rendered = padded.features();
            for (iu, &u) in grid.us().iter().enumerate() {
                for (iv, &v) in grid.vs().iter().enumerate() {
                    let (su, sv) = (u - cam.cx(), v - cam.cy());
                    assert_eq!(su.fract(), 0.0, "oracle needs whole-pixel offsets");
                    assert_eq!(sv.fract(), 0.0, "oracle needs whole-pixel offsets");
                    let mut total = 0.0;
                    for row in 0..h {
                        for col in 0..w {
                            let f = features.at(row, col);
                            let bc = (col as i64 + w as i64 - su as i64) as usize;
                            let br = (row as i64 + h as i64 - sv as i64) as usize;
                            let bi = br * 3 * w + bc;
                            total += if mask[bi] {
                                0.5 * sq(f, rendered.pixel(bi))
                            } else {
                                0.5 * sq(f, bg.mean())
                            };
                        }
                    }
                    out.push((total, r * nd + k, iu * grid.vs().len() + iv));
                }
            }
        }
    }
    out
}

/// Exhaustive argmin with ties broken by template, then offset.
pub fn brute_force_best(scores: &[(f64, usize, usize)]) -> (f64, usize, usize) {
    *scores
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .unwrap()
}

/// Same covered pixels, same contributing vertices, and no pixel on the other
/// side of the coverage floor.
fn same_structure(a: &RenderedScene, b: &RenderedScene) -> bool {
    a.pixels().len() == b.pixels().len()
        && a.pixels().iter().zip(b.pixels()).all(|(p, q)| {
            p.index == q.index
                && (p.weight_sum > COVERAGE_FLOOR) == (q.weight_sum > COVERAGE_FLOOR)
                && a.splats_of(p).iter().map(|s| s.vertex).eq(b.splats_of(q).iter().map(|s| s.vertex))
        })
}

fn perturbed(pose: &Pose6D, k: usize, h: f64) -> Pose6D {
    let mut m = pose.to_array();
    m[k] += h;
    Pose6D::from_array(m)
}

#[derive(Debug)]
pub struct GradientCheck {
    pub checked: usize,
    pub tried: usize,
    pub worst_relative_error: f64,
}

/// Compares the analytic pose gradient of the masked NLL with central differences
/// (step 1e-4, relative for distance) on random poses and random observations,
/// until `configs` smooth configurations were checked.
pub fn gradient_check(configs: usize, seed: u64) -> GradientCheck {
    const STEP: f64 = 1e-4;
    let c = cam();
    // A coarse mesh keeps every vertex clear of cell boundaries often enough.
    let cfg = ReferenceConfig {
        verts_per_side: 3,
        ..Default::default()
    };
    let m = reference_model(&cfg, seed).unwrap();
    let sampler = PoseSampler::for_camera(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradientCheck {
        checked: 0,
        tried: 0,
        worst_relative_error: 0.0,
    };
    let draw = |p: &Pose6D| render(&m.mesh, p, &c, &RenderOptions::default()).unwrap();
    while out.checked < configs && out.tried < 20 * configs {
        out.tried += 1;
        let pose = sampler.sample(&mut rng);
        let data: Vec<f64> = (0..c.width * c.height * m.mesh.channels()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let features = FeatureMap::from_vec(c.height, c.width, m.mesh.channels(), data).unwrap();
        let scene = draw(&pose);
        let mut z = OwnershipMap::new(c.height, c.width, 1);
        for px in scene.pixels() {
            z.assign(px.index, Some(0));
        }
        let loss = |p: &Pose6D| -> Option<f64> {
            let sp = draw(p);
            same_structure(&scene, &sp).then(|| nll_masked(&features, &sp, &m.mesh, &m.background, &z, 0).unwrap())
        };
        // Skip poses where a step crosses a splat cell, visibility, floor or fade
        // boundary; a kink inside the stencil shows up as step dependence.
        let mut fd = [0.0; POSE_DIMS];
        let smooth = (0..POSE_DIMS).all(|k| {
            let h = if k == 5 { STEP * pose.distance } else { STEP };
            let central = |h: f64| -> Option<f64> {
                Some((loss(&perturbed(&pose, k, h))? - loss(&perturbed(&pose, k, -h))?) / (2.0 * h))
            };
            match (central(h), central(h / 2.0)) {
                (Some(a), Some(b)) if (a - b).abs() <= 1e-4 * a.abs().max(1e-3) => {
                    fd[k] = a;
                    true
                }
                _ => false,
            }
        });
        if !smooth {
            continue;
        }
        let jac = render_pose_jacobian(&m.mesh, &pose, &c, &scene).unwrap();
        let an = nll_masked_gradient(&features, &scene, &jac, &m.mesh, &z, 0).unwrap();
        for k in 0..POSE_DIMS {
            let rel = (an[k] - fd[k]).abs() / an[k].abs().max(fd[k].abs()).max(1e-3);
            out.worst_relative_error = out.worst_relative_error.max(rel);
        }
        out.checked += 1;
    }
    out
}
