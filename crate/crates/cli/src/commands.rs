use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use meshpose::estimator::{EstimatorOptions, PoseEstimator, DEFAULT_THRESHOLD};
use meshpose::geometry::{CuboidMesh, POSE_DIMS};
use meshpose::harness::io::{
    read_checkpoint, read_json, write_checkpoint, write_feature_map, write_json, DetectionRecord,
    SceneDetections, SceneFile, SceneGroundTruth,
};
use meshpose::harness::{
    evaluate, export_landscape, generate_scene, random_spec, reference_model, write_landscape_csv,
    EvalThresholds, PoseSampler, ReferenceConfig, SceneSpec, ScoredPose,
};
use meshpose::learning::{estimate_background, train_features, TrainOptions, TrainingSample};
use meshpose::{render, CameraIntrinsics, Error, NeuralMesh, Pose6D, RenderOptions, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{output_dir, Context};

const GROUND_TRUTH_FILE: &str = "ground_truth.json";
const REFERENCE_FILE: &str = "reference.nfm";
const GENERATION_ATTEMPTS: usize = 5;

fn param(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}

/// Comma-separated list of exactly `N` numbers.
fn parse_list<const N: usize>(s: &str) -> std::result::Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated numbers, got {}", v.len()))
}

fn parse_six(s: &str) -> std::result::Result<[f64; POSE_DIMS], String> {
    parse_list::<POSE_DIMS>(s)
}

fn parse_three(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_list::<3>(s)
}

/// Scene files `scene_*.json` of a directory, sorted by name.
fn scene_files(dir: &Path) -> Result<Vec<(PathBuf, SceneFile)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name.starts_with("scene_") && name.ends_with(".json")
    });
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!("no scene_*.json files in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| read_json(&p).map(|s| (p, s)))
        .collect()
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of random scenes.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Objects per random scene.
    #[arg(long, default_value_t = 1)]
    objects: usize,
    /// Noise on foreground feature directions.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// JSON list of scene specs to render instead of random scenes.
    #[arg(long)]
    specs: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    focal_length: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
}

impl GenData {
    pub fn run(&self, ctx: &Context) -> Result<()> {
        let cam = CameraIntrinsics::new(self.focal_length, self.width, self.height)?;
        let cfg = ReferenceConfig {
            channels: self.channels,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let reference = reference_model(&cfg, rng.random())?;
        let specs: Vec<SceneSpec> = match &self.specs {
            Some(path) => read_json(path)?,
            None => {
                let sampler = PoseSampler::for_camera(&cam);
                (0..self.count)
                    .map(|_| random_spec(&sampler, self.objects, ctx.level, self.noise, rng.random()))
                    .collect::<Result<_>>()?
            }
        };
        output_dir(&self.out)?;
        write_checkpoint(&self.out.join(REFERENCE_FILE), &reference.mesh, &reference.background)?;
        let mut truth = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let id = format!("scene_{i:04}");
            let mut last = None;
            let mut made = None;
            for _ in 0..GENERATION_ATTEMPTS {
                let seed: u64 = rng.random();
                match generate_scene(spec, &reference.mesh, &reference.background, &cam, seed) {
                    Ok(s) => {
                        made = Some(s);
                        break;
                    }
                    Err(e @ Error::Generation(_)) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            let scene = match made {
                Some(s) => s,
                None => return Err(last.expect("at least one attempt")),
            };
            let features = format!("{id}.nfm");
            write_feature_map(&self.out.join(&features), &scene.features)?;
            let file = SceneFile {
                id: id.clone(),
                seed: scene.seed,
                occlusion_level: scene.level.index(),
                noise_sigma: spec.noise_sigma,
                camera: cam,
                features,
                objects: scene.ground_truth.clone(),
                occluded_fractions: scene.occluded_fractions(),
            };
            write_json(&self.out.join(format!("{id}.json")), &file)?;
            truth.push(SceneGroundTruth {
                scene: id,
                camera: cam,
                objects: scene.ground_truth,
            });
        }
        write_json(&self.out.join(GROUND_TRUTH_FILE), &truth)?;
        eprintln!("wrote {} scenes to {}", truth.len(), self.out.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Fit {
    /// Directory of posed scenes.
    #[arg(long)]
    scenes: PathBuf,
    /// Checkpoint path; the sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = CuboidMesh::DEFAULT_VERTS_PER_SIDE)]
    verts_per_side: usize,
    /// Cuboid extents `x,y,z`.
    #[arg(long, value_parser = parse_three)]
    extents: Option<[f64; 3]>,
    /// Step of the contrastive update after every epoch; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    contrastive_step: f64,
}

/// One training sample per ground-truth object, restricted to the pixels where
/// no nearer object of the same scene is rendered.
fn samples_of(scene: &SceneFile, path: &Path, mesh: &NeuralMesh) -> Result<Vec<TrainingSample>> {
    let features = scene.load_features(path)?;
    let renders = scene
        .objects
        .iter()
        .map(|o| render(mesh, &o.pose, &scene.camera, &RenderOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let npix = features.num_pixels();
    let mut nearest: Vec<Option<(usize, f64)>> = vec![None; npix];
    for (k, r) in renders.iter().enumerate() {
        for px in r.pixels() {
            if nearest[px.index].is_none_or(|(_, d)| px.owner_depth < d) {
                nearest[px.index] = Some((k, px.owner_depth));
            }
        }
    }
    Ok(scene
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| TrainingSample {
            features: features.clone(),
            pose: o.pose,
            camera: scene.camera,
            fg_mask: Some(nearest.iter().map(|n| n.is_some_and(|(j, _)| j == k)).collect()),
        })
        .collect())
}

impl Fit {
    pub fn run(&self, ctx: &Context) -> Result<()> {
        let scenes = scene_files(&self.scenes)?;
        let extents = self.extents.unwrap_or(CuboidMesh::default_extents());
        let geometry = CuboidMesh::new(extents, self.verts_per_side)?;
        let channels = scenes[0].1.load_features(&scenes[0].0)?.channels();
        let init = NeuralMesh::random(geometry, channels, ctx.seed)?;
        let mut dataset = Vec::new();
        for (path, scene) in &scenes {
            dataset.extend(samples_of(scene, path, &init)?);
        }
        if dataset.is_empty() {
            return Err(param("the scenes contain no annotated objects"));
        }
        let bg = estimate_background(&dataset, &init)?;
        let opts = TrainOptions {
            seed: ctx.seed,
            contrastive_step: self.contrastive_step,
            ..Default::default()
        };
        let (mesh, bg) = train_features(&init, &bg, &dataset, self.epochs, &opts)?;
        if let Some(dir) = self.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_checkpoint(&self.out, &mesh, &bg)?;
        eprintln!(
            "fitted {} vertices x {} channels on {} objects; background sigma {:.4}",
            mesh.len(),
            mesh.channels(),
            dataset.len(),
            bg.sigma()
        );
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Estimate {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory of scenes.
    #[arg(long)]
    scenes: PathBuf,
    /// Detections JSON.
    #[arg(long)]
    out: PathBuf,
    /// Detections need a per-pixel loss below this.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    threshold: f64,
    /// Skip multi-object occlusion reasoning.
    #[arg(long)]
    no_reasoning: bool,
}

impl Estimate {
    pub fn run(&self, ctx: &Context) -> Result<()> {
        let (mesh, bg) = read_checkpoint(&self.model)?;
        let scenes = scene_files(&self.scenes)?;
        let mut est: Option<PoseEstimator> = None;
        let mut out = Vec::with_capacity(scenes.len());
        for (path, scene) in &scenes {
            if est.as_ref().is_none_or(|e| *e.camera() != scene.camera) {
                let mut opts = EstimatorOptions::with_grid(&scene.camera, ctx.grid);
                opts.top_k = ctx.top_k;
                opts.threshold = self.threshold;
                opts.occlusion_reasoning = !self.no_reasoning;
                est = Some(PoseEstimator::new(mesh.clone(), bg.clone(), scene.camera, opts)?);
            }
            let features = scene.load_features(path)?;
            let dets = est.as_ref().expect("built above").estimate(&features)?;
            eprintln!("{}: {} detections", scene.id, dets.len());
            out.push(SceneDetections {
                scene: scene.id.clone(),
                detections: dets.iter().map(DetectionRecord::from).collect(),
            });
        }
        write_json(&self.out, &out)
    }
}

#[derive(Args, Debug)]
pub struct Evaluate {
    /// Detections JSON.
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth JSON.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Checkpoint whose geometry is used for ADD; the default cuboid otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Metrics CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-object CSV.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Serialize)]
struct MetricRow<'a> {
    metric: &'a str,
    value: f64,
}

#[derive(Serialize)]
struct RecordRow<'a> {
    scene: &'a str,
    object: usize,
    detection: Option<usize>,
    pose_error: Option<f64>,
    add: Option<f64>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

impl Evaluate {
    pub fn run(&self, _ctx: &Context) -> Result<()> {
        let truth: Vec<SceneGroundTruth> = read_json(&self.ground_truth)?;
        let found: Vec<SceneDetections> = read_json(&self.detections)?;
        let cam = match truth.first() {
            Some(t) => t.camera,
            None => return Err(param("ground truth lists no scenes")),
        };
        if truth.iter().any(|t| t.camera != cam) {
            return Err(param("evaluation needs one camera for all scenes"));
        }
        if let Some(unknown) = found.iter().find(|d| !truth.iter().any(|t| t.scene == d.scene)) {
            return Err(param(format!("detections for unknown scene {}", unknown.scene)));
        }
        let geometry = match &self.model {
            Some(p) => read_checkpoint(p)?.0.geometry().clone(),
            None => CuboidMesh::new(CuboidMesh::default_extents(), CuboidMesh::DEFAULT_VERTS_PER_SIDE)?,
        };
        let gts: Vec<Vec<Pose6D>> = truth.iter().map(|t| t.objects.iter().map(|o| o.pose).collect()).collect();
        let dets: Vec<Vec<ScoredPose>> = truth
            .iter()
            .map(|t| {
                found
                    .iter()
                    .filter(|d| d.scene == t.scene)
                    .flat_map(|d| &d.detections)
                    .map(|d| ScoredPose {
                        pose: d.pose,
                        score: d.score,
                    })
                    .collect()
            })
            .collect();
        let report = evaluate(&dets, &gts, &geometry, &cam, &EvalThresholds::default())?;
        let rows: Vec<MetricRow> = report
            .summary()
            .iter()
            .map(|&(metric, value)| MetricRow { metric, value })
            .collect();
        write_csv(&self.out, &rows)?;
        if let Some(path) = &self.records {
            let rows: Vec<RecordRow> = report
                .records
                .iter()
                .map(|r| RecordRow {
                    scene: &truth[r.scene].scene,
                    object: r.object,
                    detection: r.detection,
                    pose_error: r.pose_error,
                    add: r.add,
                })
                .collect();
            write_csv(path, &rows)?;
        }
        for (name, value) in report.summary() {
            eprintln!("{name:>18} {value:.4}");
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Landscape {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Scene JSON.
    #[arg(long)]
    scene: PathBuf,
    /// Center pose `azimuth,elevation,theta,u,v,d`; defaults to a ground-truth object.
    #[arg(long, value_parser = parse_six, allow_hyphen_values = true)]
    pose: Option<[f64; POSE_DIMS]>,
    /// Ground-truth object used as the center when no pose is given.
    #[arg(long, default_value_t = 0)]
    object: usize,
    /// Half-widths of the six sweeps.
    #[arg(long, value_parser = parse_six, default_value = "1.5,1.5,1.5,15,15,1")]
    ranges: [f64; POSE_DIMS],
    /// Samples per sweep.
    #[arg(long, default_value_t = 61)]
    steps: usize,
    /// Sweep CSV.
    #[arg(long)]
    out: PathBuf,
}

impl Landscape {
    pub fn run(&self, _ctx: &Context) -> Result<()> {
        let (mesh, bg) = read_checkpoint(&self.model)?;
        let scene: SceneFile = read_json(&self.scene)?;
        let features = scene.load_features(&self.scene)?;
        let center = match self.pose {
            Some(p) => Pose6D::from_array(p),
            None => match scene.objects.get(self.object) {
                Some(o) => o.pose,
                None => return Err(param(format!("scene {} has no object {}", scene.id, self.object))),
            },
        };
        let rows = export_landscape(&features, &mesh, &bg, &scene.camera, &center, self.ranges, self.steps)?;
        write_landscape_csv(&rows, fs::File::create(&self.out)?)
    }
}
