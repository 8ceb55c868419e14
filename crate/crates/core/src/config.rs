use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Structure names in label order (index 0 is background).
pub const SPINE_LABELS: [&str; 20] = [
    "background", "S", "L5", "L4", "L3", "L2", "L1", "T12", "T11", "T10", "T9", "L5/S", "L4/L5", "L3/L4", "L2/L3",
    "L1/L2", "T12/L1", "T11/T12", "T10/T11", "T9/T10",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Target spacing in mm, ordered (z, y, x).
    pub target_spacing: [f64; 3],
    /// Full-resolution in-plane size (y, x) every volume is fitted to.
    pub inplane_size: [usize; 2],
    /// Minimum number of slices; shorter volumes are padded.
    pub min_slices: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Net2dConfig {
    pub stem_channels: usize,
    pub blocks: Vec<usize>,
    /// Grouped-conv width of each stage.
    pub widths: Vec<usize>,
    pub out_channels: Vec<usize>,
    pub cardinality: usize,
    pub se_reduction: usize,
    /// In-plane stride of each stage's first block.
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    pub aspp_channels: usize,
    pub aspp_rates: Vec<usize>,
    pub low_level_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Net3dConfig {
    pub stem_channels: usize,
    pub blocks: Vec<usize>,
    pub widths: Vec<usize>,
    pub out_channels: Vec<usize>,
    pub cardinality: usize,
    pub se_reduction: usize,
    pub strides: Vec<usize>,
    pub aspp_channels: usize,
    /// In-plane dilation of the dilated 3D ASPP branches (z dilation is 1).
    pub aspp_rates: Vec<usize>,
    pub low_level_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { weight_decay: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn to_kind(self) -> sshs_tensor::nn::OptimKind {
        match self {
            OptimizerConfig::Adam { weight_decay } => sshs_tensor::nn::OptimKind::adam(weight_decay),
            OptimizerConfig::Sgd { momentum, weight_decay } => sshs_tensor::nn::OptimKind::Sgd { momentum, weight_decay },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub optimizer: OptimizerConfig,
}

impl ScheduleConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * 0.1f64.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub schedule: ScheduleConfig,
    pub lambda: f64,
    /// Epochs over which the CPS weight rises from 0 to `lambda` along
    /// `exp(-5 (1 - t)^2)`; 0 applies the full weight from the start.
    #[serde(default)]
    pub lambda_rampup: usize,
    pub cutmix: bool,
    /// Evaluate the held-out fold every this many epochs (0 disables).
    pub val_every: usize,
}

impl Stage1Config {
    /// CPS weight in effect during `epoch` (0-based).
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lambda_rampup {
            return self.lambda;
        }
        let t = epoch as f64 / self.lambda_rampup as f64;
        self.lambda * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub schedule: ScheduleConfig,
    /// Patch size (z, y, x) at full resolution.
    pub patch: [usize; 3],
    /// Category-balanced patches drawn per training subject per epoch.
    pub patches_per_subject: usize,
    /// Whether the 2C3 -> C3 reduction conv (and the per-peer projections) train.
    pub train_bridge: bool,
    pub val_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    MeanProbability,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Tile stride (z, y, x); the z stride applies only to volumes deeper than the patch.
    pub stride: [usize; 3],
    pub ensemble: EnsembleMode,
    /// Upper bound on patches held in memory at once.
    pub max_patches_in_flight: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Drop a structure from a subject's average when the ground truth lacks it.
    pub exclude_absent: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub num_classes: usize,
    pub c2: usize,
    pub c3: usize,
    pub c4: usize,
    pub class_names: Vec<String>,
    pub preprocess: PreprocessConfig,
    pub net2d: Net2dConfig,
    pub net3d: Net3dConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub folds: usize,
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    /// Full-size configuration: SE-ResNeXt50 (32x4d) 2D encoder with
    /// C1..C4 = (20, 128, 256, 512).
    pub fn full() -> Self {
        ExperimentConfig {
            name: "sshsnet".into(),
            num_classes: 20,
            c2: 128,
            c3: 256,
            c4: 512,
            class_names: SPINE_LABELS.iter().map(|s| s.to_string()).collect(),
            preprocess: PreprocessConfig { target_spacing: [4.4, 0.34, 0.34], inplane_size: [448, 880], min_slices: 12 },
            net2d: Net2dConfig {
                stem_channels: 64,
                blocks: vec![3, 4, 6, 3],
                widths: vec![128, 256, 512, 1024],
                out_channels: vec![256, 512, 1024, 2048],
                cardinality: 32,
                se_reduction: 16,
                strides: vec![1, 2, 2, 1],
                dilations: vec![1, 1, 1, 2],
                aspp_channels: 256,
                aspp_rates: vec![6, 12, 18],
                low_level_channels: 48,
            },
            net3d: Net3dConfig {
                stem_channels: 32,
                blocks: vec![1, 1, 1, 1],
                widths: vec![64, 128, 256, 256],
                out_channels: vec![128, 256, 512, 512],
                cardinality: 32,
                se_reduction: 16,
                strides: vec![2, 2, 1, 1],
                aspp_channels: 256,
                aspp_rates: vec![6, 12],
                low_level_channels: 48,
            },
            stage1: Stage1Config {
                schedule: ScheduleConfig {
                    epochs: 1000,
                    batch_size: 4,
                    lr: 1e-3,
                    milestones: vec![50, 400],
                    optimizer: OptimizerConfig::Adam { weight_decay: 1e-4 },
                },
                lambda: 1.0,
                lambda_rampup: 0,
                cutmix: true,
                val_every: 10,
            },
            stage2: Stage2Config {
                schedule: ScheduleConfig {
                    epochs: 150,
                    batch_size: 4,
                    lr: 1e-3,
                    milestones: vec![25, 100],
                    optimizer: OptimizerConfig::Adam { weight_decay: 1e-4 },
                },
                patch: [12, 192, 192],
                patches_per_subject: 4,
                train_bridge: true,
                val_every: 10,
            },
            inference: InferenceConfig {
                stride: [6, 96, 96],
                ensemble: EnsembleMode::MeanProbability,
                max_patches_in_flight: 4,
            },
            eval: EvalConfig { exclude_absent: true },
            folds: 5,
            seed: 0,
            paths: PathsConfig::default(),
        }
    }

    /// Small configuration for synthetic phantoms (224x224x12, 8 classes).
    pub fn phantom() -> Self {
        let mut c = Self::full();
        c.name = "phantom".into();
        c.num_classes = 8;
        c.c2 = 16;
        c.c3 = 16;
        c.c4 = 32;
        c.class_names = ["background", "VB1", "VB2", "VB3", "VB4", "IVD1", "IVD2", "IVD3"].iter().map(|s| s.to_string()).collect();
        c.preprocess = PreprocessConfig { target_spacing: [4.4, 0.68, 0.68], inplane_size: [224, 224], min_slices: 12 };
        c.net2d = Net2dConfig {
            stem_channels: 8,
            blocks: vec![1, 1, 1, 1],
            widths: vec![8, 16, 16, 32],
            out_channels: vec![16, 32, 32, 64],
            cardinality: 4,
            se_reduction: 4,
            strides: vec![1, 2, 2, 1],
            dilations: vec![1, 1, 1, 2],
            aspp_channels: 16,
            aspp_rates: vec![2, 4, 6],
            low_level_channels: 8,
        };
        c.net3d = Net3dConfig {
            stem_channels: 8,
            blocks: vec![1, 1, 1, 1],
            widths: vec![8, 16, 16, 16],
            out_channels: vec![16, 32, 32, 32],
            cardinality: 4,
            se_reduction: 4,
            strides: vec![2, 2, 1, 1],
            aspp_channels: 16,
            aspp_rates: vec![2, 4],
            low_level_channels: 8,
        };
        c.stage1.schedule.epochs = 200;
        c.stage1.schedule.milestones = vec![150];
        c.stage1.lambda_rampup = 80;
        c.stage1.val_every = 0;
        c.stage2.schedule.epochs = 60;
        c.stage2.schedule.milestones = vec![45];
        c.stage2.schedule.lr = 2e-3;
        c.stage2.patch = [12, 96, 96];
        c.stage2.patches_per_subject = 64;
        c.stage2.val_every = 0;
        c.inference.stride = [6, 48, 48];
        c
    }

    pub fn validate(&self) -> Result<()> {
        let v = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        v(self.num_classes >= 2 && self.num_classes <= 256, "num_classes must be in 2..=256")?;
        v(self.class_names.len() == self.num_classes, "class_names must list num_classes names")?;
        v(self.c4 == 2 * self.c3, "c4 must equal 2 * c3")?;
        v(self.c3 % 8 == 0, "c3 must be divisible by 8")?;
        v(self.folds >= 2, "folds must be at least 2")?;
        for (name, n) in [("net2d", &self.net2d.blocks), ("net3d", &self.net3d.blocks)] {
            v(n.len() == 4, &format!("{name}.blocks must have four stages"))?;
        }
        let n2 = &self.net2d;
        v(
            n2.widths.len() == 4 && n2.out_channels.len() == 4 && n2.strides.len() == 4 && n2.dilations.len() == 4,
            "net2d stage lists must have four entries",
        )?;
        v(n2.widths.iter().all(|w| w % n2.cardinality == 0), "net2d widths must be divisible by cardinality")?;
        v(n2.strides.iter().product::<usize>() == 4, "net2d stage strides must reach output stride 16")?;
        let n3 = &self.net3d;
        v(n3.widths.len() == 4 && n3.out_channels.len() == 4 && n3.strides.len() == 4, "net3d stage lists must have four entries")?;
        v(n3.widths.iter().all(|w| w % n3.cardinality == 0), "net3d widths must be divisible by cardinality")?;
        v(n3.strides.iter().product::<usize>() == 4, "net3d stage strides must reach in-plane stride 16")?;
        let [pz, py, px] = self.stage2.patch;
        v(pz >= 1 && py % 16 == 0 && px % 16 == 0, "patch in-plane size must be a multiple of 16")?;
        let [iy, ix] = self.preprocess.inplane_size;
        v(iy % 16 == 0 && ix % 16 == 0, "in-plane size must be a multiple of 16")?;
        v(iy >= py && ix >= px, "patch must fit inside the in-plane size")?;
        v(self.preprocess.min_slices >= pz, "min_slices must be at least the patch depth")?;
        v(self.inference.stride.iter().all(|&s| s > 0), "tile strides must be positive")?;
        v(self.inference.stride[1] % 4 == 0 && self.inference.stride[2] % 4 == 0, "in-plane tile stride must be a multiple of 4")?;
        v(self.stage1.schedule.batch_size > 0 && self.stage2.schedule.batch_size > 0, "batch size must be positive")?;
        v(self.preprocess.target_spacing.iter().all(|&s| s > 0.0), "target spacing must be positive")?;
        v(self.inference.max_patches_in_flight > 0, "max_patches_in_flight must be positive")?;
        Ok(())
    }

    /// Half-resolution input size of the 2D networks.
    pub fn input_2d(&self) -> [usize; 2] {
        [self.preprocess.inplane_size[0] / 2, self.preprocess.inplane_size[1] / 2]
    }

    /// Stable hash over everything except filesystem paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        let json = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml" | "yml"));
        let cfg: Self = if is_yaml {
            serde_yaml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Data root from `SSHSNET_DATA_ROOT`, falling back to the config.
    pub fn data_root(&self) -> Option<PathBuf> {
        std::env::var_os("SSHSNET_DATA_ROOT").map(PathBuf::from).or_else(|| self.paths.data_root.clone())
    }
}
