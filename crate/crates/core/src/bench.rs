//! Benchmark harness: run every method variant on synthetic frames and
//! score them with the same metrics.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::body::{BodyModel, ContactLabels};
use crate::error::{Error, Result};
use crate::autodiff::Tensor;
use crate::mesh_net::{MeshInput, MeshNet, MeshSample};
use crate::metrics::{evaluate_frame, FrameEval, FrameMetrics, MetricReport};
use crate::root_contact::{Stage1Input, Stage1Output, Stage1Predictor, Stage1Sample, ToyStage1Net};
use crate::saopt::{fit, project_joints, FitProblem, FitState, SaOptConfig};
use crate::synth::{simulate_root_head, RootHeadNoise, SynthConfig, SynthFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Estimated root and contacts.
    SaHmr,
    OracleRoot,
    OracleContact,
    OracleBoth,
    /// Scene-blind mesh network placed at the initial root.
    TrunkOnly,
    TrunkSaOpt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SaHmr,
        Variant::OracleRoot,
        Variant::OracleContact,
        Variant::OracleBoth,
        Variant::TrunkOnly,
        Variant::TrunkSaOpt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SaHmr => "sa-hmr",
            Variant::OracleRoot => "oracle-root",
            Variant::OracleContact => "oracle-contact",
            Variant::OracleBoth => "oracle-both",
            Variant::TrunkOnly => "trunk-only",
            Variant::TrunkSaOpt => "trunk-saopt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown variant `{s}`")))
    }

    fn needs_stage1(self) -> bool {
        !matches!(self, Variant::OracleBoth)
    }

    fn needs_mesh(self) -> bool {
        !matches!(self, Variant::TrunkOnly | Variant::TrunkSaOpt)
    }
}

/// Trained models; a variant whose model is absent fails with
/// `MissingCheckpoint`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Models<'a> {
    pub stage1: Option<&'a ToyStage1Net>,
    pub mesh: Option<&'a MeshNet>,
    pub trunk: Option<&'a MeshNet>,
}

impl Models<'_> {
    pub fn check(&self, variants: &[Variant]) -> Result<()> {
        for &v in variants {
            if v.needs_stage1() && self.stage1.is_none() {
                return Err(Error::MissingCheckpoint(alloc::format!("stage1 (needed by {})", v.as_str())));
            }
            if v.needs_mesh() && self.mesh.is_none() {
                return Err(Error::MissingCheckpoint(alloc::format!("stage2 (needed by {})", v.as_str())));
            }
            if !v.needs_mesh() && self.trunk.is_none() {
                return Err(Error::MissingCheckpoint(alloc::format!("trunk (needed by {})", v.as_str())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub synth: SynthConfig,
    pub root_noise: RootHeadNoise,
    pub saopt: SaOptConfig,
    /// Pixel noise of the simulated 2D keypoints fed to SA-Opt.
    pub keypoint_sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::ALL.to_vec(),
            synth: SynthConfig::default(),
            root_noise: RootHeadNoise::default(),
            saopt: SaOptConfig::default(),
            keypoint_sigma: 2.0,
            seed: 0,
        }
    }
}

/// Everything a variant predicted for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub variant: Variant,
    /// Scene frame.
    pub vertices: Vec<crate::math::Vec3>,
    pub root: crate::math::Vec3,
}

/// Stage-1 output for `frame`, with the root head simulated from a
/// per-frame seed.
pub fn run_stage1(net: &ToyStage1Net, frame: &SynthFrame, cfg: &BenchConfig) -> Result<Stage1Output> {
    let maps = simulate_root_head(frame, &cfg.synth, cfg.root_noise, frame.seed ^ cfg.seed)?;
    net.predict(&Stage1Input {
        camera: &frame.camera,
        points: &frame.scene.points,
        features: &frame.features,
        maps: &maps,
    })
}

/// Run and score every configured variant on one frame.
pub fn bench_frame(
    index: usize,
    frame: &SynthFrame,
    body: &BodyModel,
    models: &Models,
    cfg: &BenchConfig,
) -> Result<Vec<(Variant, FrameMetrics)>> {
    models.check(&cfg.variants)?;
    let s1 = match models.stage1 {
        Some(net) if cfg.variants.iter().any(|v| v.needs_stage1()) => Some(run_stage1(net, frame, cfg)?),
        _ => None,
    };
    let (gt_points, gt_cats) = frame.labels.contact_points(&frame.scene.points);
    let mut out = Vec::with_capacity(cfg.variants.len());
    for &v in &cfg.variants {
        let (pred, labels) = predict_variant(v, frame, body, models, cfg, s1.as_ref(), (&gt_points, &gt_cats))?;
        let m = evaluate_frame(
            index,
            &FrameEval {
                body,
                scene: &frame.scene,
                pred: &pred.vertices,
                gt: &frame.body,
                gt_contact: &frame.vertex_contact,
                pred_labels: labels,
                gt_labels: Some(&frame.labels),
            },
        )?;
        out.push((v, m));
    }
    Ok(out)
}

fn predict_variant<'a>(
    v: Variant,
    frame: &SynthFrame,
    body: &BodyModel,
    models: &Models,
    cfg: &BenchConfig,
    s1: Option<&'a Stage1Output>,
    gt: (&[crate::math::Vec3], &[u8]),
) -> Result<(Prediction, Option<&'a ContactLabels>)> {
    let need = |o: Option<&'a Stage1Output>| o.ok_or_else(|| Error::MissingCheckpoint("stage1".into()));
    let missing = |what: &str| Error::MissingCheckpoint(String::from(what));
    let run_mesh = |net: &MeshNet, root, contacts: &[_], categories: &[u8]| {
        net.predict(&MeshInput {
            image_feature: &frame.image_feature,
            contacts,
            categories,
            root,
            rotation: frame.camera.rotation,
        })
    };
    let prediction = |vertices, root| Prediction { variant: v, vertices, root };
    match v {
        Variant::SaHmr | Variant::OracleRoot | Variant::OracleContact | Variant::OracleBoth => {
            let net = models.mesh.ok_or_else(|| missing("stage2"))?;
            let root = match v {
                Variant::OracleRoot | Variant::OracleBoth => frame.root,
                _ => need(s1)?.refined.to_scene(&frame.camera),
            };
            // oracle labels would score trivially; precision/recall is
            // reported for estimates only
            let (points, cats, labels) = match v {
                Variant::OracleContact | Variant::OracleBoth => (gt.0, gt.1, None),
                _ => {
                    let s = need(s1)?;
                    (&s.contact_points[..], &s.contact_categories[..], Some(&s.labels))
                }
            };
            let out = run_mesh(net, root, points, cats)?;
            Ok((prediction(out.placed(root), root), labels))
        }
        Variant::TrunkOnly | Variant::TrunkSaOpt => {
            let net = models.trunk.ok_or_else(|| missing("trunk"))?;
            let s = need(s1)?;
            let root = s.initial.to_scene(&frame.camera);
            let out = run_mesh(net, root, &[], &[])?;
            if v == Variant::TrunkOnly {
                return Ok((prediction(out.placed(root), root), None));
            }
            let joints = noisy_keypoints(body, frame, cfg)?;
            let problem = FitProblem::new(
                body,
                &out.vertices,
                &frame.camera,
                &frame.scene,
                &s.contact_points,
                &s.contact_categories,
                &joints,
            )?;
            // a body reaching behind the camera has no finite starting
            // energy; the network estimate then stands
            let (vertices, root) = match fit(&problem, FitState::at(root), &cfg.saopt) {
                Ok(r) => (r.state.vertices(&out.vertices), r.state.translation),
                Err(Error::Diverged(0)) => (out.placed(root), root),
                Err(e) => return Err(e),
            };
            Ok((prediction(vertices, root), Some(&s.labels)))
        }
    }
}

/// Ground-truth 2D joints with seeded Gaussian pixel noise, standing in for
/// a keypoint detector.
pub fn noisy_keypoints(body: &BodyModel, frame: &SynthFrame, cfg: &BenchConfig) -> Result<Vec<(f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame.seed ^ cfg.seed ^ 0x6b65_7970);
    let noise = Normal::new(0.0, cfg.keypoint_sigma.max(0.0)).map_err(|_| Error::InvalidConfig("keypoint sigma".into()))?;
    Ok(project_joints(body, &frame.camera, &frame.body)?
        .into_iter()
        .map(|(u, v)| (u + noise.sample(&mut rng), v + noise.sample(&mut rng)))
        .collect())
}

/// Stage-1 training sample of `frame`: the simulated root head is the
/// input, the rendered maps and GT labels the targets.
pub fn stage1_sample(net: &ToyStage1Net, frame: &SynthFrame, cfg: &BenchConfig) -> Result<Stage1Sample> {
    let maps = simulate_root_head(frame, &cfg.synth, cfg.root_noise, frame.seed ^ cfg.seed)?;
    let input = Stage1Input {
        camera: &frame.camera,
        points: &frame.scene.points,
        features: &frame.features,
        maps: &maps,
    };
    Stage1Sample::new(net, &input, &frame.maps, frame.root, &frame.labels)
}

/// Mesh training sample at the GT root. The trunk is trained on the same
/// frames with `with_contacts` off.
pub fn mesh_sample(frame: &SynthFrame, with_contacts: bool) -> MeshSample {
    let (contacts, categories) = if with_contacts {
        frame.labels.contact_points(&frame.scene.points)
    } else {
        (Vec::new(), Vec::new())
    };
    MeshSample {
        image_feature: frame.image_feature.clone(),
        contacts,
        categories,
        root: frame.root,
        rotation: frame.camera.rotation,
        vertices_gt: frame.body.clone(),
    }
}

/// Dense joint regressor as a tensor, the target side of the joint loss.
pub fn regressor_tensor(body: &BodyModel) -> Result<Tensor> {
    Tensor::from_vec(body.n_joints(), body.n_vertices(), body.regressor.to_dense(body.n_vertices()))
}

/// One report per variant from per-frame results, merged by frame index so
/// the outcome does not depend on evaluation order.
pub fn collect_reports(variants: &[Variant], mut per_frame: Vec<Vec<(Variant, FrameMetrics)>>) -> Result<Vec<MetricReport>> {
    if per_frame.is_empty() {
        return Err(Error::EmptyFrameSet);
    }
    per_frame.sort_by_key(|f| f.first().map_or(0, |(_, m)| m.frame));
    variants
        .iter()
        .map(|&v| {
            let frames = per_frame
                .iter()
                .flat_map(|f| f.iter().filter(|(w, _)| *w == v).map(|(_, m)| m.clone()))
                .collect();
            MetricReport::new(v.as_str(), frames)
        })
        .collect()
}

/// Sequential benchmark over `frames`.
pub fn run_benchmark(frames: &[SynthFrame], body: &BodyModel, models: &Models, cfg: &BenchConfig) -> Result<Vec<MetricReport>> {
    if frames.is_empty() {
        return Err(Error::EmptyFrameSet);
    }
    models.check(&cfg.variants)?;
    let per_frame = frames
        .iter()
        .enumerate()
        .map(|(i, f)| bench_frame(i, f, body, models, cfg))
        .collect::<Result<Vec<_>>>()?;
    collect_reports(&cfg.variants, per_frame)
}
