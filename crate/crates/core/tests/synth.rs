mod common;

use common::{cam, model, scene};
use meshpose::harness::{generate_scene, random_spec, OcclusionLevel, PoseSampler, SceneSpec};
use meshpose::{render, Error, Pose6D, RenderOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn noise_free_scene_copies_the_render() {
    let m = model(31);
    let pose = Pose6D::new(1.3, 0.2, -0.1, 30.0, 34.0, 4.0);
    let s = scene(&m, vec![pose], OcclusionLevel::L0, 0.0, 31);
    let r = render(&m.mesh, &pose, &cam(), &RenderOptions::default()).unwrap();
    for px in r.pixels() {
        assert_eq!(s.features.pixel(px.index), r.feature(px));
    }
    assert_eq!(s.visible_masks[0], r.mask());
    assert_eq!(s.occluded_fractions(), vec![0.0]);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let m = model(32);
    let pose = Pose6D::new(0.3, 0.0, 0.1, 32.0, 32.0, 4.0);
    let a = scene(&m, vec![pose], OcclusionLevel::L2, 0.1, 7);
    let b = scene(&m, vec![pose], OcclusionLevel::L2, 0.1, 7);
    let c = scene(&m, vec![pose], OcclusionLevel::L2, 0.1, 8);
    assert_eq!(a, b);
    assert_ne!(a.features, c.features);
}

#[test]
fn noise_keeps_feature_magnitude() {
    let m = model(33);
    let pose = Pose6D::new(2.0, -0.2, 0.0, 32.0, 30.0, 3.5);
    let s = scene(&m, vec![pose], OcclusionLevel::L0, 0.3, 33);
    let r = render(&m.mesh, &pose, &cam(), &RenderOptions::default()).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for px in r.pixels() {
        let (got, want) = (norm(s.features.pixel(px.index)), norm(r.feature(px)));
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn occluded_share_lies_in_the_level_band() {
    let c = cam();
    let m = model(34);
    let sampler = PoseSampler::for_camera(&c);
    for level in [OcclusionLevel::L1, OcclusionLevel::L2, OcclusionLevel::L3] {
        let (lo, hi) = level.band();
        for seed in 0..10 {
            for objects in [1, 2] {
                let spec = random_spec(&sampler, objects, level, 0.1, seed).unwrap();
                let s = generate_scene(&spec, &m.mesh, &m.background, &c, seed).unwrap();
                for f in s.occluded_fractions() {
                    assert!(f >= lo && f <= hi, "{level:?} seed {seed}: {f}");
                }
            }
        }
    }
}

#[test]
fn nearer_object_owns_shared_pixels() {
    let c = cam();
    let m = model(35);
    let pair = PoseSampler::for_camera(&c).sample_overlapping_pair(&mut ChaCha8Rng::seed_from_u64(35));
    let s = scene(&m, pair.to_vec(), OcclusionLevel::L0, 0.0, 35);
    let near = if pair[0].distance < pair[1].distance { 0 } else { 1 };
    let r = render(&m.mesh, &pair[near], &c, &RenderOptions::default()).unwrap();
    assert_eq!(s.visible_masks[near], r.mask());
    assert!(s.visible_masks[0].iter().zip(&s.visible_masks[1]).all(|(a, b)| !(*a && *b)));
}

#[test]
fn bad_inputs_are_rejected() {
    let c = cam();
    let m = model(36);
    let out_of_frame = SceneSpec {
        objects: vec![Pose6D::new(0.0, 0.0, 0.0, 500.0, 500.0, 4.0)],
        occlusion: OcclusionLevel::L0,
        noise_sigma: 0.1,
    };
    assert!(matches!(
        generate_scene(&out_of_frame, &m.mesh, &m.background, &c, 0),
        Err(Error::Generation(_))
    ));
    let negative_noise = SceneSpec {
        objects: vec![],
        occlusion: OcclusionLevel::L0,
        noise_sigma: -1.0,
    };
    assert!(matches!(
        generate_scene(&negative_noise, &m.mesh, &m.background, &c, 0),
        Err(Error::Param(_))
    ));
    assert!(matches!(OcclusionLevel::from_index(4), Err(Error::Param(_))));
}
