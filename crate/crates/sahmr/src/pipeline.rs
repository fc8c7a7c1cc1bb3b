//! Training, inference, fitting and benchmarking over frame sets, with an
//! optional worker pool whose results are merged by frame index.

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sahmr_core::bench::{bench_frame, collect_reports, mesh_sample, noisy_keypoints, run_stage1, stage1_sample, BenchConfig, Models};
use sahmr_core::body::{BodyModel, ContactLabels};
use sahmr_core::mesh_net::{train_mesh_net, MeshInput, MeshNet, MeshOutput};
use sahmr_core::metrics::{evaluate_frame, FrameEval, FrameMetrics, MetricReport};
use sahmr_core::root_contact::{train_stage1, Stage1Epoch, Stage1Output, ToyStage1Net};
use sahmr_core::saopt::{fit, FitProblem, FitResult, FitState, SaOptConfig};
use sahmr_core::synth::{SynthFrame, FEATURE_CHANNELS};
use sahmr_core::Vec3;

use crate::config::{regressor, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{write_json, RootJson, Stage1Json};
use crate::mesh::{write_obj, write_points, Mesh};

/// `f` over `items` on `workers` threads. Results keep the input order and
/// the reported error is the one of the earliest failing item, so the
/// outcome does not depend on scheduling.
pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    use rayon::prelude::*;
    let results: Vec<Result<R>> = if workers <= 1 {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    };
    results.into_iter().collect()
}

pub fn new_stage1_net(cfg: &RunConfig) -> ToyStage1Net {
    ToyStage1Net::new(FEATURE_CHANNELS, cfg.stage1_config(), cfg.seeds.stage1)
}

pub fn new_mesh_net(body: &BodyModel, cfg: &RunConfig) -> Result<MeshNet> {
    Ok(MeshNet::new(body, cfg.mesh_net_config())?)
}

pub fn train_root_contact(
    frames: &[SynthFrame],
    cfg: &RunConfig,
    workers: usize,
    on_epoch: impl FnMut(&Stage1Epoch) -> bool,
) -> Result<ToyStage1Net> {
    let mut net = new_stage1_net(cfg);
    let bench = cfg.bench_config()?;
    let samples = par_map(workers, frames, |_, f| Ok(stage1_sample(&net, f, &bench)?))?;
    train_stage1(&mut net, &samples, &cfg.stage1_training(), on_epoch)?;
    Ok(net)
}

/// Train the scene-aware network, or with `trunk` the scene-blind one, at
/// the ground-truth root.
pub fn train_mesh(
    frames: &[SynthFrame],
    body: &BodyModel,
    cfg: &RunConfig,
    trunk: bool,
    on_epoch: impl FnMut(usize, f64, &MeshNet) -> bool,
) -> Result<MeshNet> {
    let mut net = new_mesh_net(body, cfg)?;
    let samples: Vec<_> = frames.iter().map(|f| mesh_sample(f, !trunk)).collect();
    train_mesh_net(&mut net, &samples, &regressor(body)?, &cfg.mesh_training(trunk), on_epoch)?;
    Ok(net)
}

/// End-to-end prediction for one frame.
#[derive(Debug, Clone)]
pub struct Inference {
    pub stage1: Stage1Output,
    pub root: Vec3,
    pub mesh: MeshOutput,
    pub stage1_time: Duration,
    pub stage2_time: Duration,
}

impl Inference {
    /// Scene-frame body.
    pub fn vertices(&self) -> Vec<Vec3> {
        self.mesh.placed(self.root)
    }

    /// Scene-frame reconstructed contact points.
    pub fn reconstructed(&self) -> Vec<Vec3> {
        self.mesh.reconstructed.iter().map(|&p| p + self.root).collect()
    }
}

pub fn infer_frame(frame: &SynthFrame, stage1: &ToyStage1Net, mesh: &MeshNet, bench: &BenchConfig) -> Result<Inference> {
    let t0 = Instant::now();
    let s1 = run_stage1(stage1, frame, bench)?;
    let t1 = Instant::now();
    let root = s1.refined.to_scene(&frame.camera);
    let out = mesh.predict(&MeshInput {
        image_feature: &frame.image_feature,
        contacts: &s1.contact_points,
        categories: &s1.contact_categories,
        root,
        rotation: frame.camera.rotation,
    })?;
    Ok(Inference {
        stage1: s1,
        root,
        mesh: out,
        stage1_time: t1 - t0,
        stage2_time: t1.elapsed(),
    })
}

/// `stage1.json` with `contacts.ply`, `root.json`, `body.obj` and
/// `reconstructed_contacts.ply`.
pub fn write_inference(dir: &Path, inf: &Inference) -> Result<()> {
    write_points(&dir.join("contacts.ply"), &inf.stage1.contact_points)?;
    write_json(
        &dir.join("stage1.json"),
        &Stage1Json {
            root: inf.root.to_array(),
            contacts: "contacts.ply".into(),
            categories: inf.stage1.contact_categories.clone(),
        },
    )?;
    write_json(&dir.join("root.json"), &RootJson { root: inf.root.to_array() })?;
    write_obj(
        &dir.join("body.obj"),
        &Mesh {
            vertices: inf.vertices(),
            faces: Vec::new(),
        },
    )?;
    write_points(&dir.join("reconstructed_contacts.ply"), &inf.reconstructed())
}

/// Per-point labels of `points` from a list of labelled contact points.
/// Contacts are copies of scene points, so they are matched exactly.
pub fn labels_from_contacts(points: &[Vec3], contacts: &[Vec3], categories: &[u8]) -> Result<ContactLabels> {
    if contacts.len() != categories.len() {
        return Err(sahmr_core::Error::DimensionMismatch("one category per contact point".into()).into());
    }
    let key = |p: &Vec3| p.to_array().map(f64::to_bits);
    let index: HashMap<[u64; 3], usize> = points.iter().enumerate().map(|(i, p)| (key(p), i)).collect();
    let mut labels = ContactLabels::none(points.len());
    for (c, &k) in contacts.iter().zip(categories) {
        let i = index
            .get(&key(c))
            .ok_or_else(|| Error::Config(format!("contact point {c:?} is not a scene point")))?;
        labels.categories[*i] = k;
    }
    Ok(labels)
}

/// Score a predicted body, optionally with predicted contact labels.
pub fn evaluate(index: usize, frame: &SynthFrame, body: &BodyModel, pred: &[Vec3], labels: Option<&ContactLabels>) -> Result<FrameMetrics> {
    Ok(evaluate_frame(
        index,
        &FrameEval {
            body,
            scene: &frame.scene,
            pred,
            gt: &frame.body,
            gt_contact: &frame.vertex_contact,
            pred_labels: labels,
            gt_labels: Some(&frame.labels),
        },
    )?)
}

pub fn run_bench(frames: &[SynthFrame], body: &BodyModel, models: &Models, cfg: &BenchConfig, workers: usize) -> Result<Vec<MetricReport>> {
    if frames.is_empty() {
        return Err(sahmr_core::Error::EmptyFrameSet.into());
    }
    models.check(&cfg.variants)?;
    let per_frame = par_map(workers, frames, |i, f| Ok(bench_frame(i, f, body, models, cfg)?))?;
    Ok(collect_reports(&cfg.variants, per_frame)?)
}

/// Fit of the ground-truth shape with exact contacts, started `offset`
/// metres from the true root in a seeded random direction.
#[derive(Debug, Clone)]
pub struct PerturbedFit {
    pub init: FitState,
    pub result: FitResult,
    /// Distance of the final translation from the true root, metres.
    pub error: f64,
}

pub fn perturbed_fit(
    frame: &SynthFrame,
    body: &BodyModel,
    cfg: &SaOptConfig,
    offset: f64,
    keypoint_sigma: f64,
    seed: u64,
) -> Result<PerturbedFit> {
    let shape: Vec<Vec3> = frame.body.iter().map(|&v| v - frame.root).collect();
    let (contacts, categories) = frame.labels.contact_points(&frame.scene.points);
    let joints = noisy_keypoints(
        body,
        frame,
        &BenchConfig {
            keypoint_sigma,
            seed,
            ..BenchConfig::default()
        },
    )?;
    let problem = FitProblem::new(body, &shape, &frame.camera, &frame.scene, &contacts, &categories, &joints)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frame.seed);
    let dir = loop {
        let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = d.norm();
        if n > 1e-3 && n <= 1.0 {
            break d * (1.0 / n);
        }
    };
    let init = FitState::at(frame.root + dir * offset);
    let result = fit(&problem, init, cfg)?;
    let error = result.state.translation.distance(frame.root);
    Ok(PerturbedFit { init, result, error })
}
