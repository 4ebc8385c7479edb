use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn meshpose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshpose")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

#[test]
fn generate_fit_estimate_evaluate_landscape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(meshpose(&["gen-data", "--out", p(&data), "--count", "2", "--seed", "3", "--occlusion-level", "1"]));
    for name in ["scene_0000.json", "scene_0000.nfm", "scene_0001.json", "ground_truth.json", "reference.nfm", "reference.json"] {
        assert!(data.join(name).exists(), "{name}");
    }
    let scene: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("scene_0000.json")).unwrap()).unwrap();
    assert_eq!(scene["occlusion_level"], 1);
    for key in ["azimuth", "elevation", "theta", "u", "v", "d"] {
        assert!(scene["objects"][0]["pose"].get(key).is_some(), "{key}");
    }

    // Same seed, same bytes.
    let again = dir.path().join("again");
    ok(meshpose(&["gen-data", "--out", p(&again), "--count", "2", "--seed", "3", "--occlusion-level", "1"]));
    assert_eq!(fs::read(data.join("scene_0001.nfm")).unwrap(), fs::read(again.join("scene_0001.nfm")).unwrap());

    let fitted = dir.path().join("model/fitted.nfm");
    ok(meshpose(&["fit", "--scenes", p(&data), "--out", p(&fitted), "--epochs", "1", "--verts-per-side", "6"]));
    assert!(fitted.exists() && fitted.with_extension("json").exists());

    let dets = dir.path().join("dets.json");
    ok(meshpose(&[
        "estimate", "--model", p(&data.join("reference.nfm")), "--scenes", p(&data), "--out", p(&dets),
        "--grid", "12x3x3:5x5x5", "--top-k", "3", "--threads", "1",
    ]));
    let found: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dets).unwrap()).unwrap();
    assert_eq!(found.as_array().unwrap().len(), 2);
    let first = &found[0]["detections"][0];
    for key in ["azimuth", "u", "d", "score", "loss"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let metrics = dir.path().join("metrics.csv");
    let records = dir.path().join("records.csv");
    ok(meshpose(&[
        "evaluate", "--detections", p(&dets), "--ground-truth", p(&data.join("ground_truth.json")),
        "--out", p(&metrics), "--records", p(&records),
    ]));
    let text = fs::read_to_string(&metrics).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "metric,value");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("acc_pi_6,"));
    assert!(fs::read_to_string(&records).unwrap().starts_with("scene,object,detection,pose_error,add\n"));

    let sweep = dir.path().join("sweep.csv");
    ok(meshpose(&[
        "landscape", "--model", p(&fitted), "--scene", p(&data.join("scene_0000.json")), "--steps", "5",
        "--out", p(&sweep),
    ]));
    let text = fs::read_to_string(&sweep).unwrap();
    assert!(text.starts_with("dimension,offset,nll\n"));
    assert_eq!(text.lines().count(), 1 + 6 * 5);
    let pose = "0.5,-0.1,0,30,31,4";
    ok(meshpose(&[
        "landscape", "--model", p(&fitted), "--scene", p(&data.join("scene_0000.json")), "--steps", "3",
        "--pose", pose, "--out", p(&sweep),
    ]));
}

#[test]
fn parameter_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&meshpose(&["gen-data", "--out", p(&out), "--grid", "12x3:9x9x9"])), 2);
    assert_eq!(code(&meshpose(&["gen-data", "--out", p(&out), "--occlusion-level", "4"])), 2);
    assert_eq!(code(&meshpose(&["gen-data", "--out", p(&out), "--focal-length", "-1"])), 2);
    assert_eq!(code(&meshpose(&["frobnicate"])), 2);
}

#[test]
fn io_and_format_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.nfm");
    let out = dir.path().join("d.json");
    assert_eq!(
        code(&meshpose(&["estimate", "--model", p(&missing), "--scenes", p(dir.path()), "--out", p(&out)])),
        3
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "[{").unwrap();
    assert_eq!(
        code(&meshpose(&["evaluate", "--detections", p(&bad), "--ground-truth", p(&bad), "--out", p(&out)])),
        3
    );
}

#[test]
fn impossible_scene_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    // An object outside the frame cannot be rendered.
    let specs = dir.path().join("specs.json");
    fs::write(
        &specs,
        r#"[{"objects": [{"azimuth": 0, "elevation": 0, "theta": 0, "u": 500, "v": 32, "d": 4}],
            "occlusion": "L0", "noise_sigma": 0.1}]"#,
    )
    .unwrap();
    let out = meshpose(&["gen-data", "--out", p(&dir.path().join("o")), "--specs", p(&specs)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
