//! Run configuration: JSON on disk, overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sahmr_core::autodiff::Tensor;
use sahmr_core::bench::{BenchConfig, Variant};
use sahmr_core::losses::LossWeights;
use sahmr_core::mesh_net::{MeshNetConfig, MeshTrainConfig, OptimizerKind};
use sahmr_core::root_contact::{Stage1Config, Stage1TrainConfig};
use sahmr_core::saopt::{SaOptConfig, SaOptWeights};
use sahmr_core::synth::{RootHeadNoise, SynthConfig};

use crate::error::{Error, Result};
use crate::formats::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub bench: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 0,
            stage1: 7,
            stage2: 5,
            bench: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            output: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Training {
    pub epochs: usize,
    pub lr: f64,
    pub contact_weight: f64,
}

impl Default for Stage1Training {
    fn default() -> Self {
        let d = Stage1TrainConfig::default();
        Stage1Training {
            epochs: d.epochs,
            lr: d.lr,
            contact_weight: d.contact_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Training {
    pub epochs: usize,
    pub trunk_epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for Stage2Training {
    fn default() -> Self {
        let d = MeshTrainConfig::default();
        Stage2Training {
            epochs: d.epochs,
            trunk_epochs: d.epochs,
            lr: d.lr,
            batch: d.batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    /// Reprojection, penetration, contact, ordinal.
    pub weights: [f64; 4],
    pub max_iterations: usize,
    pub orientation: bool,
    /// Pixel noise of the simulated 2D keypoints.
    pub keypoint_sigma: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        let d = SaOptConfig::default();
        FitSettings {
            weights: [d.weights.reproj, d.weights.pen, d.weights.contact, d.weights.ordinal],
            max_iterations: d.max_iterations,
            orientation: d.variables.orientation,
            keypoint_sigma: BenchConfig::default().keypoint_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Region of interest: radius around the root ray and its extent.
    pub gamma1: f64,
    pub gamma2: f64,
    pub voxel_size: f64,
    pub contact_threshold: f64,
    pub w_rz: f64,
    pub crop: f64,
    pub frames: usize,
    pub seeds: Seeds,
    pub paths: Paths,
    /// A method variant name, or `all`.
    pub variant: String,
    pub stage1: Stage1Training,
    pub stage2: Stage2Training,
    pub saopt: FitSettings,
    /// Simulated root-head noise: heatmap peak jitter (cells) and log-depth
    /// error.
    pub root_noise: [f64; 2],
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        let synth = SynthConfig::default();
        let noise = RootHeadNoise::default();
        RunConfig {
            gamma1: s1.gamma1,
            gamma2: s1.gamma2,
            voxel_size: s1.voxel_size,
            contact_threshold: synth.contact_threshold,
            w_rz: LossWeights::default().w_rz,
            crop: synth.crop,
            frames: 16,
            seeds: Seeds::default(),
            paths: Paths::default(),
            variant: "all".into(),
            stage1: Stage1Training::default(),
            stage2: Stage2Training::default(),
            saopt: FitSettings::default(),
            root_noise: [noise.cell_sigma, noise.depth_log_sigma],
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("voxel_size", self.voxel_size),
            ("contact_threshold", self.contact_threshold),
            ("crop", self.crop),
            ("stage1.lr", self.stage1.lr),
            ("stage2.lr", self.stage2.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("w_rz", self.w_rz),
            ("stage1.contact_weight", self.stage1.contact_weight),
            ("saopt.keypoint_sigma", self.saopt.keypoint_sigma),
            ("root_noise", self.root_noise[0]),
            ("root_noise", self.root_noise[1]),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.frames == 0 {
            return bad("frames must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.stage2.batch == 0 {
            return bad("stage2.batch must be positive".into());
        }
        self.variants()?;
        self.saopt_config()?;
        Ok(())
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        if self.variant == "all" {
            return Ok(Variant::ALL.to_vec());
        }
        Ok(vec![Variant::parse(&self.variant)?])
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            crop: self.crop,
            contact_threshold: self.contact_threshold,
            ..SynthConfig::default()
        }
    }

    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            voxel_size: self.voxel_size,
        }
    }

    pub fn stage1_training(&self) -> Stage1TrainConfig {
        Stage1TrainConfig {
            epochs: self.stage1.epochs,
            lr: self.stage1.lr,
            seed: self.seeds.stage1,
            contact_weight: self.stage1.contact_weight,
            weights: LossWeights { w_rz: self.w_rz },
        }
    }

    pub fn mesh_net_config(&self) -> MeshNetConfig {
        MeshNetConfig::default()
    }

    /// Training schedule of the scene-aware network, or of the trunk.
    pub fn mesh_training(&self, trunk: bool) -> MeshTrainConfig {
        MeshTrainConfig {
            epochs: if trunk { self.stage2.trunk_epochs } else { self.stage2.epochs },
            batch: self.stage2.batch,
            lr: self.stage2.lr,
            optimizer: OptimizerKind::Adam,
            seed: self.seeds.stage2,
        }
    }

    pub fn saopt_config(&self) -> Result<SaOptConfig> {
        let [reproj, pen, contact, ordinal] = self.saopt.weights;
        let mut cfg = SaOptConfig {
            weights: SaOptWeights {
                reproj,
                pen,
                contact,
                ordinal,
            },
            max_iterations: self.saopt.max_iterations,
            ..SaOptConfig::default()
        };
        cfg.variables.orientation = self.saopt.orientation;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn root_noise(&self) -> RootHeadNoise {
        RootHeadNoise {
            cell_sigma: self.root_noise[0],
            depth_log_sigma: self.root_noise[1],
        }
    }

    pub fn bench_config(&self) -> Result<BenchConfig> {
        Ok(BenchConfig {
            variants: self.variants()?,
            synth: self.synth_config(),
            root_noise: self.root_noise(),
            saopt: self.saopt_config()?,
            keypoint_sigma: self.saopt.keypoint_sigma,
            seed: self.seeds.bench,
        })
    }
}

/// The dense joint regressor in the layout the mesh loss expects.
pub fn regressor(body: &sahmr_core::body::BodyModel) -> Result<Tensor> {
    Ok(sahmr_core::bench::regressor_tensor(body)?)
}
