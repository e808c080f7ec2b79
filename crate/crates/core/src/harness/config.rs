use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::effioptim::{OptimConfig, OptimizerKind};
use crate::error::{config_err, Error, Result};
use crate::extract::{ImagePatchConfig, Reduce, VoxelConfig};
use crate::nn::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    VoxelSegmentation,
    ImageClassification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    #[default]
    None,
    LaserNoise,
    PixelNoise,
    Both,
}

impl CorruptionKind {
    pub fn laser(self) -> bool {
        matches!(self, Self::LaserNoise | Self::Both)
    }

    pub fn pixel(self) -> bool {
        matches!(self, Self::PixelNoise | Self::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "clean",
            Self::LaserNoise => "laser-noise",
            Self::PixelNoise => "pixel-noise",
            Self::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub sigma: f64,
}

/// Feature extractor settings shared by both tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub voxel: VoxelConfig,
    /// Hidden widths of the shared MLP.
    pub hidden: Vec<usize>,
    /// Output width of the MLP, the feature width C of the sparse tensor.
    pub features: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub reduce: Reduce,
    /// Patch size `(height, width)` for the image task.
    pub patch: [usize; 2],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelConfig {
                range_min: [0.0, 0.0, -0.2],
                range_max: [6.4, 6.4, 1.4],
                voxel_size: [0.2; 3],
                max_points: 16,
                seed: 0,
            },
            hidden: vec![32, 32],
            features: 16,
            activation: Activation::Relu,
            dropout: 0.0,
            reduce: Reduce::Max,
            patch: [4, 4],
        }
    }
}

impl ExtractorConfig {
    pub fn patch_config(&self) -> ImagePatchConfig {
        ImagePatchConfig { patch_h: self.patch[0], patch_w: self.patch[1], out_dim: self.features }
    }

    /// Every MLP width from `input` to the feature width.
    pub fn widths(&self, input: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(self.features);
        w
    }
}

/// Widths of the sparse down-sampling block; its input width is the
/// extractor's feature width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdsLayers {
    pub mid_channels: usize,
    pub restore_channels: usize,
    pub post_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Default for SdsLayers {
    fn default() -> Self {
        Self { mid_channels: 16, restore_channels: 16, post_channels: 16, out_channels: 16, kernel: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsaLayers {
    pub scale_widths: [usize; 2],
}

impl Default for GsaLayers {
    fn default() -> Self {
        Self { scale_widths: [16, 16] }
    }
}

/// Synthetic data sizes for both tasks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub objects: usize,
    /// Std of the Gaussian jitter on every generated point, meters.
    pub noise_floor: f64,
    /// Surface sampling density, points per square meter.
    pub density: f64,
    pub image_size: usize,
    pub train_images: usize,
    pub eval_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 16,
            eval_scenes: 8,
            objects: 6,
            noise_floor: 0.01,
            density: 100.0,
            image_size: 16,
            train_images: 64,
            eval_images: 32,
        }
    }
}

/// One experiment, loadable from a TOML file. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub sds: bool,
    pub gsa: bool,
    pub optimizer: OptimizerKind,
    pub optim: OptimConfig,
    pub extractor: ExtractorConfig,
    pub sds_layers: SdsLayers,
    pub gsa_layers: GsaLayers,
    pub data: DataConfig,
    pub corruption: Corruption,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::VoxelSegmentation,
            seed: 7,
            epochs: 30,
            batch_size: 1,
            sds: true,
            gsa: true,
            optimizer: OptimizerKind::EightBit,
            optim: OptimConfig { lr: 3e-3, ..OptimConfig::default() },
            extractor: ExtractorConfig::default(),
            sds_layers: SdsLayers::default(),
            gsa_layers: GsaLayers::default(),
            data: DataConfig::default(),
            corruption: Corruption::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.extractor.voxel.validate()?;
        let ex = &self.extractor;
        if ex.features == 0 || ex.hidden.contains(&0) {
            return Err(config_err!("extractor widths must be positive"));
        }
        if !(0.0..1.0).contains(&ex.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", ex.dropout));
        }
        ex.patch_config().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be >= 1"));
        }
        let s = &self.sds_layers;
        if [s.mid_channels, s.restore_channels, s.post_channels, s.out_channels].contains(&0) {
            return Err(config_err!("SDS widths must be positive"));
        }
        // every voxel needs an active parent cell after the stride-2 layer
        if s.kernel < 3 || s.kernel.is_multiple_of(2) {
            return Err(config_err!("SDS kernel must be odd and >= 3, got {}", s.kernel));
        }
        if self.gsa_layers.scale_widths.contains(&0) {
            return Err(config_err!("GSA widths must be positive"));
        }
        if !(self.corruption.sigma >= 0.0 && self.corruption.sigma.is_finite()) {
            return Err(config_err!("corruption sigma must be finite and >= 0, got {}", self.corruption.sigma));
        }
        let d = &self.data;
        if !(d.noise_floor >= 0.0 && d.density > 0.0) {
            return Err(config_err!("noise_floor must be >= 0 and density > 0"));
        }
        match self.task {
            Task::VoxelSegmentation if d.train_scenes == 0 || d.eval_scenes == 0 => {
                Err(config_err!("need at least one training and one evaluation scene"))
            }
            Task::ImageClassification if d.train_images == 0 || d.eval_images == 0 => {
                Err(config_err!("need at least one training and one evaluation image"))
            }
            Task::ImageClassification
                if !d.image_size.is_multiple_of(ex.patch[0]) || !d.image_size.is_multiple_of(ex.patch[1]) =>
            {
                Err(config_err!("image size {} is not a multiple of patch {:?}", d.image_size, ex.patch))
            }
            _ => Ok(()),
        }
    }
}
