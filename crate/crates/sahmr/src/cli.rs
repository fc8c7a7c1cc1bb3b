//! The `sahmr` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use sahmr_core::bench::Models;
use sahmr_core::body::BodyModel;
use sahmr_core::metrics::MetricReport;
use sahmr_core::gradsuite;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate, read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::formats::{read_json, write_json, Stage1Json};
use crate::mesh::{read_obj, read_points};
use crate::pipeline::{self, par_map};
use crate::report::{write_report, write_trace_csv};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const TRUNK_CKPT: &str = "trunk.ckpt";

#[derive(Debug, Parser)]
#[command(name = "sahmr", version, about = "Scene-aware human mesh recovery on synthetic scenes")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-frame work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory written by `gen-synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenSynth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the root and contact network.
    TrainStage1 {
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Train the scene-aware mesh network and the scene-blind trunk.
    TrainStage2 {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        trunk_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Run both stages on every frame and write the predictions.
    Infer {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted bodies against the ground truth.
    Eval {
        #[command(flatten)]
        data: DataArg,
        /// Directory with one sub-directory per frame, as written by `infer`.
        #[arg(long)]
        pred: PathBuf,
        /// Body file inside each frame directory.
        #[arg(long, default_value = "body.obj")]
        pred_file: String,
        #[arg(long, default_value = "eval")]
        method: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the ground-truth shape from a perturbed translation and write
    /// the energy traces.
    FitSaopt {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Initial translation error in metres.
        #[arg(long, default_value_t = 0.3)]
        offset: f64,
        /// Only this frame.
        #[arg(long)]
        frame: Option<usize>,
    },
    /// Run and score every method variant.
    Bench {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// A single variant, or `all`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth { .. } => "gen-synth",
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::FitSaopt { .. } => "fit-saopt",
            Command::Bench { .. } => "bench",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

/// Self-description of a run.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
    /// Hash over all input hashes and paths.
    pub inputs_hash: String,
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style blob hash: SHA-256 of `blob <len>\0` followed by the content.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn hash_inputs(paths: &[PathBuf]) -> Result<(Vec<InputHash>, String)> {
    let mut all = Sha256::new();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let sha256 = blob_hash(&bytes);
        all.update(format!("{sha256} {}\n", p.display()).as_bytes());
        out.push(InputHash { path: p.clone(), sha256 });
    }
    Ok((out, hex(&all.finalize())))
}

struct Ctx {
    cfg: RunConfig,
    body: BodyModel,
    command: String,
    args: Vec<String>,
}

impl Ctx {
    fn workers(&self) -> usize {
        self.cfg.workers
    }

    fn dataset(&self, data: &DataArg) -> Result<Dataset> {
        let dir = data.data.clone().unwrap_or_else(|| self.cfg.paths.data.clone());
        read_dataset(&dir, &self.body, self.workers())
    }

    fn record(&self, out: &Path, inputs: &[PathBuf]) -> Result<()> {
        let (inputs, inputs_hash) = hash_inputs(inputs)?;
        write_json(
            &out.join("run.json"),
            &RunRecord {
                command: self.command.clone(),
                args: self.args.clone(),
                config: self.cfg.clone(),
                inputs,
                inputs_hash,
            },
        )
    }

    fn load_models(&self, dir: &Path, need: (bool, bool, bool)) -> Result<LoadedModels> {
        let mut m = LoadedModels::default();
        if need.0 {
            let mut net = pipeline::new_stage1_net(&self.cfg);
            checkpoint::load_into(&dir.join(STAGE1_CKPT), &mut net.store)?;
            m.stage1 = Some(net);
        }
        for (flag, name, slot) in [(need.1, STAGE2_CKPT, &mut m.mesh), (need.2, TRUNK_CKPT, &mut m.trunk)] {
            if flag {
                let mut net = pipeline::new_mesh_net(&self.body, &self.cfg)?;
                checkpoint::load_into(&dir.join(name), &mut net.store)?;
                *slot = Some(net);
            }
        }
        Ok(m)
    }
}

#[derive(Default)]
struct LoadedModels {
    stage1: Option<sahmr_core::root_contact::ToyStage1Net>,
    mesh: Option<sahmr_core::mesh_net::MeshNet>,
    trunk: Option<sahmr_core::mesh_net::MeshNet>,
}

impl LoadedModels {
    fn models(&self) -> Models<'_> {
        Models {
            stage1: self.stage1.as_ref(),
            mesh: self.mesh.as_ref(),
            trunk: self.trunk.as_ref(),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn main_with(args: impl IntoIterator<Item = OsString>) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, args: Vec<String>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let mut config_inputs: Vec<PathBuf> = cli.config.iter().cloned().collect();
    match &cli.command {
        Command::GenSynth { frames, seed, .. } => {
            cfg.frames = frames.unwrap_or(cfg.frames);
            cfg.seeds.data = seed.unwrap_or(cfg.seeds.data);
        }
        Command::TrainStage1 { epochs, lr, .. } => {
            cfg.stage1.epochs = epochs.unwrap_or(cfg.stage1.epochs);
            cfg.stage1.lr = lr.unwrap_or(cfg.stage1.lr);
        }
        Command::TrainStage2 {
            epochs, trunk_epochs, lr, ..
        } => {
            cfg.stage2.epochs = epochs.unwrap_or(cfg.stage2.epochs);
            cfg.stage2.trunk_epochs = trunk_epochs.unwrap_or(cfg.stage2.trunk_epochs);
            cfg.stage2.lr = lr.unwrap_or(cfg.stage2.lr);
        }
        Command::Bench { variant: Some(v), .. } => cfg.variant = v.clone(),
        _ => {}
    }
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        body: BodyModel::toy(),
        command: cli.command.name().into(),
        args,
    };
    let cfg = &ctx.cfg;
    let out_or = |o: &Option<PathBuf>, d: &PathBuf| o.clone().unwrap_or_else(|| d.clone());

    match &cli.command {
        Command::GenSynth { out, .. } => {
            let out = out_or(out, &cfg.paths.data);
            let synth = cfg.synth_config();
            let frames = generate(cfg.frames, cfg.seeds.data, &ctx.body, &synth, ctx.workers())?;
            write_dataset(&out, &frames, cfg.seeds.data, &synth, &ctx.body, ctx.workers())?;
            eprintln!("wrote {} frames to {}", frames.len(), out.display());
            ctx.record(&out, &config_inputs)
        }
        Command::TrainStage1 { data, out, .. } => {
            let ds = ctx.dataset(data)?;
            let out = out_or(out, &cfg.paths.checkpoints);
            let t = Instant::now();
            let net = pipeline::train_root_contact(&ds.frames, cfg, ctx.workers(), |e| {
                eprintln!("epoch {:>4} loss {:.5} root error {:.4} m", e.epoch, e.loss, e.root_error);
                true
            })?;
            checkpoint::save(&out.join(STAGE1_CKPT), &net.store)?;
            eprintln!("trained stage 1 in {:.1} s", t.elapsed().as_secs_f64());
            config_inputs.extend(ds.files());
            ctx.record(&out, &config_inputs)
        }
        Command::TrainStage2 { data, out, .. } => {
            let ds = ctx.dataset(data)?;
            let out = out_or(out, &cfg.paths.checkpoints);
            for (trunk, name) in [(false, STAGE2_CKPT), (true, TRUNK_CKPT)] {
                let t = Instant::now();
                let net = pipeline::train_mesh(&ds.frames, &ctx.body, cfg, trunk, |e, loss, _| {
                    eprintln!("{name} epoch {e:>4} loss {loss:.5}");
                    true
                })?;
                checkpoint::save(&out.join(name), &net.store)?;
                eprintln!("trained {name} in {:.1} s", t.elapsed().as_secs_f64());
            }
            config_inputs.extend(ds.files());
            ctx.record(&out, &config_inputs)
        }
        Command::Infer { data, checkpoints, out } => {
            let ds = ctx.dataset(data)?;
            let ck = out_or(checkpoints, &cfg.paths.checkpoints);
            let out = out_or(out, &cfg.paths.output);
            let models = ctx.load_models(&ck, (true, true, false))?;
            let (s1, mesh) = (models.stage1.as_ref().unwrap(), models.mesh.as_ref().unwrap());
            let bench = cfg.bench_config()?;
            let results = par_map(ctx.workers(), &ds.frames, |i, f| {
                let inf = pipeline::infer_frame(f, s1, mesh, &bench)?;
                pipeline::write_inference(&out.join(&ds.manifest.frames[i].dir), &inf)?;
                Ok((inf.stage1_time, inf.stage2_time))
            })?;
            let n = results.len() as f64;
            let (a, b) = results.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + ms(*x), b + ms(*y)));
            for (i, (x, y)) in results.iter().enumerate() {
                println!("{} root+contact {:.1} ms mesh {:.1} ms", ds.manifest.frames[i].dir, ms(*x), ms(*y));
            }
            println!("mean root+contact {:.1} ms, mesh {:.1} ms, total {:.1} ms", a / n, b / n, (a + b) / n);
            write_json(
                &out.join("timing.json"),
                &serde_json::json!({ "stage1_ms": a / n, "stage2_ms": b / n, "frames": results.len() }),
            )?;
            config_inputs.extend(ds.files());
            config_inputs.extend([STAGE1_CKPT, STAGE2_CKPT].map(|c| ck.join(c)));
            ctx.record(&out, &config_inputs)
        }
        Command::Eval {
            data,
            pred,
            pred_file,
            method,
            out,
        } => {
            let ds = ctx.dataset(data)?;
            let out = out_or(out, &cfg.paths.output);
            let mut inputs = Vec::new();
            let metrics = par_map(ctx.workers(), &ds.frames, |i, f| {
                let dir = pred.join(&ds.manifest.frames[i].dir);
                let verts = read_obj(&dir.join(pred_file))?.vertices;
                let s1 = dir.join("stage1.json");
                let labels = if s1.exists() {
                    let j: Stage1Json = read_json(&s1)?;
                    let contacts = read_points(&dir.join(&j.contacts))?;
                    Some(pipeline::labels_from_contacts(&f.scene.points, &contacts, &j.categories)?)
                } else {
                    None
                };
                pipeline::evaluate(i, f, &ctx.body, &verts, labels.as_ref())
            })?;
            for i in 0..ds.frames.len() {
                inputs.push(pred.join(&ds.manifest.frames[i].dir).join(pred_file));
            }
            let report = MetricReport::new(method, metrics)?;
            print_report(&report);
            write_report(&out, &report)?;
            config_inputs.extend(ds.files());
            config_inputs.extend(inputs);
            ctx.record(&out, &config_inputs)
        }
        Command::FitSaopt { data, out, offset, frame } => {
            let ds = ctx.dataset(data)?;
            let out = out_or(out, &cfg.paths.output);
            let saopt = cfg.saopt_config()?;
            let ids: Vec<usize> = match frame {
                Some(k) if *k < ds.frames.len() => vec![*k],
                Some(k) => return Err(Error::Config(format!("frame {k} out of range"))),
                None => (0..ds.frames.len()).collect(),
            };
            let fits = par_map(ctx.workers(), &ids, |_, &i| {
                let r = pipeline::perturbed_fit(&ds.frames[i], &ctx.body, &saopt, *offset, cfg.saopt.keypoint_sigma, cfg.seeds.bench)?;
                let dir = out.join(&ds.manifest.frames[i].dir);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                write_trace_csv(&dir.join("trace.csv"), &r.result.trace)?;
                let s = &r.result.state;
                write_json(
                    &dir.join("fit.json"),
                    &serde_json::json!({
                        "initial_translation": r.init.translation.to_array(),
                        "translation": s.translation.to_array(),
                        "log_scale": s.log_scale,
                        "orientation": s.orientation.to_array(),
                        "iterations": r.result.iterations(),
                        "converged": r.result.converged,
                        "monotone": r.result.is_monotone(),
                        "translation_error": r.error,
                    }),
                )?;
                Ok((i, r.error, r.result.iterations()))
            })?;
            for (i, err, it) in &fits {
                println!("{} error {:.4} m after {it} iterations", ds.manifest.frames[*i].dir, err);
            }
            config_inputs.extend(ds.files());
            ctx.record(&out, &config_inputs)
        }
        Command::Bench {
            data, checkpoints, out, ..
        } => {
            let ds = ctx.dataset(data)?;
            let ck = out_or(checkpoints, &cfg.paths.checkpoints);
            let out = out_or(out, &cfg.paths.output);
            let bench = cfg.bench_config()?;
            let need_s1 = bench.variants.iter().any(|v| *v != sahmr_core::bench::Variant::OracleBoth);
            let need_trunk = bench
                .variants
                .iter()
                .any(|v| matches!(v, sahmr_core::bench::Variant::TrunkOnly | sahmr_core::bench::Variant::TrunkSaOpt));
            let need_mesh = bench.variants.iter().any(|v| {
                !matches!(v, sahmr_core::bench::Variant::TrunkOnly | sahmr_core::bench::Variant::TrunkSaOpt)
            });
            let models = ctx.load_models(&ck, (need_s1, need_mesh, need_trunk))?;
            let reports = pipeline::run_bench(&ds.frames, &ctx.body, &models.models(), &bench, ctx.workers())?;
            for r in &reports {
                print_report(r);
                write_report(&out, r)?;
            }
            config_inputs.extend(ds.files());
            for (flag, c) in [(need_s1, STAGE1_CKPT), (need_mesh, STAGE2_CKPT), (need_trunk, TRUNK_CKPT)] {
                if flag {
                    config_inputs.push(ck.join(c));
                }
            }
            ctx.record(&out, &config_inputs)
        }
        Command::Gradcheck { eps, tol, seed, out } => {
            if !(eps.is_finite() && *eps > 0.0 && tol.is_finite() && *tol > 0.0) {
                return Err(Error::Config("eps and tol must be positive".into()));
            }
            let out = out_or(out, &cfg.paths.output);
            let cases = gradsuite::run(*eps, *seed)?;
            let mut csv = String::from("case,max_rel_error,checked\n");
            let mut worst = 0.0f64;
            for c in &cases {
                println!("{:<18} {:.3e} ({} entries)", c.name, c.check.max_rel_error, c.check.checked);
                csv += &format!("{},{},{}\n", c.name, c.check.max_rel_error, c.check.checked);
                worst = worst.max(c.check.max_rel_error);
            }
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let p = out.join("gradcheck.csv");
            fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
            ctx.record(&out, &config_inputs)?;
            if worst >= *tol {
                return Err(Error::Numerical(format!("worst relative gradient error {worst:.3e} exceeds {tol:.0e}")));
            }
            Ok(())
        }
    }
}

fn print_report(r: &MetricReport) {
    let a = &r.aggregate;
    println!(
        "{:<15} G-MPJPE {:>7.1} G-MPVE {:>7.1} MPJPE {:>6.1} MPVE {:>6.1} CErr {:>6.1} PenE {:.4} ConFE {:.4} root {:>6.1}",
        r.method, a.g_mpjpe, a.g_mpve, a.mpjpe, a.mpve, a.cerr, a.pen_e, a.conf_e, a.root_error
    );
}
