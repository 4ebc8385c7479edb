use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

use meshpose::geometry::CuboidMesh;
use meshpose::harness::{
    add_metric, evaluate, map_at, pose_error, EvalThresholds, ScoredPose,
};
use meshpose::{CameraIntrinsics, Error, Pose6D};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use proptest::prelude::*;
use serde::Deserialize;

fn cam() -> CameraIntrinsics {
    CameraIntrinsics::new(100.0, 64, 64).unwrap()
}

fn mesh() -> CuboidMesh {
    CuboidMesh::new(CuboidMesh::default_extents(), 5).unwrap()
}

fn angles() -> impl Strategy<Value = (f64, f64, f64)> {
    (-PI..PI, -FRAC_PI_2..FRAC_PI_2, -PI..PI)
}

fn pose_strategy() -> impl Strategy<Value = Pose6D> {
    (angles(), 10.0..54.0, 10.0..54.0, 2.0..8.0)
        .prop_map(|((a, e, t), u, v, d)| Pose6D::new(a, e, t, u, v, d))
}

fn rot(a: f64, e: f64, t: f64) -> Matrix3<f64> {
    *Pose6D::new(a, e, t, 32.0, 32.0, 4.0).rotation().matrix()
}

#[test]
fn equal_rotations_have_zero_error() {
    let r = rot(0.3, -0.2, 1.1);
    assert!(pose_error(&r, &r).unwrap().abs() < 1e-12);
}

#[test]
fn axis_angle_error_is_the_angle() {
    let base = rot(0.7, 0.1, -0.4);
    for axis in [Vector3::x(), Vector3::y(), Vector3::new(1.0, -2.0, 0.5)] {
        let delta = Rotation3::from_axis_angle(&Unit::new_normalize(axis), FRAC_PI_6);
        let pred = base * delta.matrix();
        let err = pose_error(&pred, &base).unwrap();
        assert!((err - FRAC_PI_6).abs() < 1e-12, "{err}");
    }
}

#[test]
fn non_rotation_is_a_parameter_error() {
    let scaled = Matrix3::identity() * 2.0;
    assert!(matches!(pose_error(&scaled, &Matrix3::identity()), Err(Error::Param(_))));
    let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
    assert!(matches!(pose_error(&reflection, &Matrix3::identity()), Err(Error::Param(_))));
}

proptest! {
    #[test]
    fn error_matches_trace_formula((a1, e1, t1) in angles(), (a2, e2, t2) in angles()) {
        let (r1, r2) = (rot(a1, e1, t1), rot(a2, e2, t2));
        let err = pose_error(&r1, &r2).unwrap();
        let trace = (r1.transpose() * r2).trace();
        let oracle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        // acos loses precision near 0 and pi; compare there through the cosine.
        if oracle > 1e-4 && oracle < PI - 1e-4 {
            prop_assert!((err - oracle).abs() < 1e-9, "{} vs {}", err, oracle);
        } else {
            prop_assert!((err.cos() - oracle.cos()).abs() < 1e-9);
        }
        let back = pose_error(&r2, &r1).unwrap();
        prop_assert!((err - back).abs() < 1e-9);
        prop_assert!((0.0..=PI).contains(&err));
    }

    #[test]
    fn add_matches_vertex_loop(p in pose_strategy(), q in pose_strategy()) {
        let m = mesh();
        let c = cam();
        let (rp, rq) = (p.rotation(), q.rotation());
        let mut sum = 0.0;
        for x in m.vertices() {
            let tp = Vector3::new((p.u - 32.0) * p.distance / 100.0, (p.v - 32.0) * p.distance / 100.0, p.distance);
            let tq = Vector3::new((q.u - 32.0) * q.distance / 100.0, (q.v - 32.0) * q.distance / 100.0, q.distance);
            let a = rp.matrix() * x + tp;
            let b = rq.matrix() * x + tq;
            sum += ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt();
        }
        let oracle = sum / m.len() as f64;
        prop_assert!((add_metric(&m, &p, &q, &c) - oracle).abs() < 1e-9);
    }

    #[test]
    fn add_triangle_inequality(p1 in pose_strategy(), p2 in pose_strategy(), p3 in pose_strategy()) {
        let (m, c) = (mesh(), cam());
        let d13 = add_metric(&m, &p1, &p3, &c);
        let d12 = add_metric(&m, &p1, &p2, &c);
        let d23 = add_metric(&m, &p2, &p3, &c);
        prop_assert!(d12 >= 0.0);
        prop_assert!(d13 <= d12 + d23 + 1e-9);
    }

    #[test]
    fn evaluate_ignores_detection_order(
        gts in prop::collection::vec(pose_strategy(), 1..4),
        dets in prop::collection::vec((pose_strategy(), 0.0..1.0f64), 0..6),
        seed in any::<u64>(),
    ) {
        let (m, c) = (mesh(), cam());
        let scored: Vec<ScoredPose> = dets.iter().map(|&(pose, score)| ScoredPose { pose, score }).collect();
        let mut shuffled = scored.clone();
        let n = shuffled.len();
        if n > 1 {
            shuffled.rotate_left((seed as usize) % n);
            shuffled.swap(0, n - 1);
        }
        let t = EvalThresholds::default();
        let a = evaluate(&[scored], &[gts.clone()], &m, &c, &t).unwrap();
        let b = evaluate(&[shuffled], &[gts], &m, &c, &t).unwrap();
        prop_assert_eq!(a.acc_coarse, b.acc_coarse);
        prop_assert_eq!(a.acc_fine, b.acc_fine);
        prop_assert_eq!(a.median_pose_error, b.median_pose_error);
        prop_assert_eq!(a.median_add, b.median_add);
    }
}

#[test]
fn add_identities() {
    let (m, c) = (mesh(), cam());
    let p = Pose6D::new(0.4, 0.3, -0.2, 32.0, 32.0, 4.0);
    assert_eq!(add_metric(&m, &p, &p, &c), 0.0);
    let mut q = p;
    q.distance += 0.75;
    assert!((add_metric(&m, &q, &p, &c) - 0.75).abs() < 1e-12);
}

fn scored(poses: &[Pose6D]) -> Vec<ScoredPose> {
    poses.iter().map(|&pose| ScoredPose { pose, score: 1.0 }).collect()
}

#[test]
fn perfect_and_straddling_detections() {
    let (m, c) = (mesh(), cam());
    let t = EvalThresholds::default();
    let gts = vec![
        vec![Pose6D::new(0.5, 0.2, 0.1, 30.0, 34.0, 4.0), Pose6D::new(2.5, -0.2, 0.0, 20.0, 20.0, 3.0)],
        vec![Pose6D::new(4.0, 0.0, -0.3, 40.0, 30.0, 5.0)],
    ];
    let perfect: Vec<_> = gts.iter().map(|g| scored(g)).collect();
    let r = evaluate(&perfect, &gts, &m, &c, &t).unwrap();
    assert_eq!((r.acc_coarse, r.acc_fine), (1.0, 1.0));
    assert!(r.median_pose_error < 1e-12 && r.median_add < 1e-12);
    assert!((r.map - 1.0).abs() < 1e-12);

    let off: Vec<_> = gts
        .iter()
        .map(|g| {
            scored(&g.iter().map(|p| Pose6D { azimuth: p.azimuth + PI / 12.0, ..*p }).collect::<Vec<_>>())
        })
        .collect();
    let r = evaluate(&off, &gts, &m, &c, &t).unwrap();
    assert_eq!((r.acc_coarse, r.acc_fine), (1.0, 0.0));
}

#[test]
fn empty_detections_and_misaligned_scenes() {
    let (m, c) = (mesh(), cam());
    let gts = vec![vec![Pose6D::new(0.0, 0.0, 0.0, 32.0, 32.0, 4.0)]];
    assert_eq!(map_at(&[vec![]], &gts, &m, &c, PI / 3.0, 5.0).unwrap(), 0.0);
    let r = evaluate(&[vec![]], &gts, &m, &c, &EvalThresholds::default()).unwrap();
    assert_eq!((r.acc_coarse, r.acc_fine, r.map), (0.0, 0.0, 0.0));
    assert!(r.records[0].detection.is_none());
    assert!(matches!(
        evaluate(&[], &gts, &m, &c, &EvalThresholds::default()),
        Err(Error::Param(_))
    ));
}

#[derive(Deserialize)]
struct EvaluateFixture {
    ground_truth: Vec<Vec<Pose6D>>,
    detections: Vec<Vec<ScoredPose>>,
    expected: Expected,
}

#[derive(Deserialize)]
struct Expected {
    acc_pi_6: f64,
    acc_pi_18: f64,
    median_pose_error: f64,
    median_add: f64,
    map: f64,
}

#[derive(Deserialize)]
struct MapFixture {
    ground_truth: Vec<Vec<Pose6D>>,
    detections: Vec<Vec<ScoredPose>>,
    expected_ap: f64,
}

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn evaluate_matches_hand_computed_fixture() {
    let f: EvaluateFixture = serde_json::from_str(&fixture("evaluate_fixture.json")).unwrap();
    let r = evaluate(&f.detections, &f.ground_truth, &mesh(), &cam(), &EvalThresholds::default()).unwrap();
    let e = f.expected;
    for (got, want) in [
        (r.acc_coarse, e.acc_pi_6),
        (r.acc_fine, e.acc_pi_18),
        (r.median_pose_error, e.median_pose_error),
        (r.median_add, e.median_add),
        (r.map, e.map),
    ] {
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }
    assert_eq!(r.records.iter().filter(|x| x.detection.is_none()).count(), 1);
}

#[test]
fn map_matches_hand_computed_fixture() {
    let f: MapFixture = serde_json::from_str(&fixture("map_fixture.json")).unwrap();
    let ap = map_at(&f.detections, &f.ground_truth, &mesh(), &cam(), PI / 3.0, 5.0).unwrap();
    assert!((ap - f.expected_ap).abs() < 1e-12, "{ap}");
}
