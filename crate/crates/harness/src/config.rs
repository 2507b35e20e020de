//! Experiment configuration, read from TOML.
//!
//! Every key is documented in [`CONFIG_REFERENCE`], which the CLI prints
//! under `--help`.

use std::path::{Path, PathBuf};

use resonance::attacks::AttackConfig;
use resonance::model::{ModelSpec, TrainConfig};
use resonance::stereo::{BlockStructure, Texture};
use resonance::{DefenseConfig, PadMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_REFERENCE: &str = r#"CONFIG FILE (TOML)

Top level
  seed = <u64>              base seed; every random stream derives from it (default 0)
  sample_count = <usize>    test samples (classification) or stereo pairs to evaluate (default 500)
  cache = "<path>"          optional adversarial-cache archive; read if it matches, written otherwise

[dataset]                   one of three kinds, selected by `kind`
  kind = "synthetic_shapes"
    train_count = <usize>   training images (default 2000)
    size = <usize>          image side in pixels (default 32)
    noise = <f64>           Gaussian pixel noise std (default 0.1)
  kind = "mnist_idx"
    train_images, train_labels, test_images, test_labels = "<path>"   IDX files
  kind = "stereo_rds"
    height, width = <usize>           image size (default 32 x 64)
    d_max = <usize>                   largest disparity (default 8; needs 4 * d_max < width)
    structure.blocks = <usize>        foreground rectangles (default 3)
    structure.block_size = [lo, hi]   rectangle side range (default [8, 20])
    structure.texture = "binary" | "gray"
    structure.contrast = <f64>        dot levels 0.5 -/+ contrast / 2 (default 0.06)
    structure.dot_size = <usize>      dot side in pixels (default 1)

[model]                     classification only
  preset = "small_cnn" | "logistic" | "equivariant_probe"   (default small_cnn)
  spec = { ... }            explicit ModelSpec instead of a preset:
                              input_shape = [C, H, W], num_classes = <usize>,
                              layers = [{ kind = "conv", out_channels, kernel, stride, padding,
                                          pad_mode = "zeros" | "circular", bias },
                                        { kind = "relu" }, { kind = "max_pool", size },
                                        { kind = "avg_pool", size }, { kind = "global_avg_pool" },
                                        { kind = "flatten" }, { kind = "linear", out_features, bias },
                                        { kind = "res_block", kernel, pad_mode }],
                              taps = [{ name, layer_index }]
  channels = <usize>        hidden channels of equivariant_probe (default 4)
  weights = "<path>"        load a weight bundle instead of training

[training]                  SGD with momentum (classification only)
  lr = <f64>                (default 0.02)
  epochs = <usize>          (default 5)
  batch = <usize>           (default 32)
  momentum = <f64>          (default 0.9)

[matcher]                   stereo only
  encoder = "subsampled_patch" | "patch"   (default subsampled_patch)
  stride = <usize>          subsampling step, or average-pool size for "patch" (default 2)
  patch = <usize>           neighbourhood side (default 5)
  pad_mode = "zeros" | "circular"          encoder padding (default zeros)
  temperature = <f64>       soft-argmin temperature (default 0.003 * structure.contrast^2)
  candidate_pad = "zeros" | "circular"     fill when translating the right image
  target = "ground_truth" | "clean_prediction"   field the dense attacks push away from

[[attacks]]                 repeatable; empty list gives a clean-only report
  kind = "fgsm" | "pgd" | "cw_margin" | "dense_pgd"
  epsilon = <f64>           l-inf budget in [0, 1] pixel units
  steps = <usize>           (default 1; fgsm requires 1)
  alpha = <f64>             step size (default 2.5 * epsilon / steps)
  random_start = <bool>     (default false)
  adaptive = <bool>         attack through each evaluated defense (default false)
  seed = <u64>              random-start seed; per-sample seeds derive from it
  kappa = <f64>             margin of cw_margin (default 0)
  objective = "mae" | "epe" dense attacks (default mae)
  perturb = "all" | "first" dense attacks: both images or the left one only
  name = "<label>"          report column label (default derived, e.g. pgd20)

[[defenses]]                repeatable; "none" is always evaluated first
  mode = "none" | "sr" | "latent_smooth" | "input_smooth" | "output_ensemble"
  d_x, d_y = <usize>        translation radius (grid of (2 d_x + 1)(2 d_y + 1) shifts)
  tap = "<name>"            tap where latent ensembling ends (sr, latent_smooth)
  action = "translate" | "rotate"     rotations use angles k * rotation_step_deg, |k| <= d_x
  rotation_step_deg = <f64> (default 5)
  pad = "zeros" | "circular"          fill for vacated cells
  rounding = "nearest" | "floor"      feature-grid realignment of sub-stride shifts
  weights = [<f64>, ...]    prior weights in branch order (default uniform)
  name = "<label>"          report row label (default derived, e.g. sr_d1@block2)
"#;

fn d_sample_count() -> usize {
    500
}

/// Everything a run depends on besides the code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sample_count")]
    pub sample_count: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub matcher: MatcherSettings,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub defenses: Vec<DefenseConfig>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn d_train_count() -> usize {
    2000
}
fn d_size() -> usize {
    32
}
fn d_noise() -> f64 {
    0.1
}
fn d_height() -> usize {
    32
}
fn d_width() -> usize {
    64
}
fn d_dmax() -> usize {
    8
}

/// Contrast of the default stereo texture. Low enough that an ε = 0.02
/// perturbation is a sizeable fraction of the signal.
pub const STEREO_CONTRAST: f64 = 0.06;

fn d_contrast() -> f64 {
    STEREO_CONTRAST
}

/// Scene settings of generated stereograms; see [`BlockStructure`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSettings {
    #[serde(default = "d_blocks")]
    pub blocks: usize,
    #[serde(default = "d_block_size")]
    pub block_size: (usize, usize),
    #[serde(default)]
    pub texture: Texture,
    #[serde(default = "d_contrast")]
    pub contrast: f64,
    #[serde(default = "d_dot")]
    pub dot_size: usize,
}

fn d_blocks() -> usize {
    BlockStructure::default().blocks
}
fn d_block_size() -> (usize, usize) {
    BlockStructure::default().block_size
}
fn d_dot() -> usize {
    BlockStructure::default().dot_size
}

impl Default for StructureSettings {
    fn default() -> Self {
        Self {
            blocks: d_blocks(),
            block_size: d_block_size(),
            texture: Texture::default(),
            contrast: d_contrast(),
            dot_size: d_dot(),
        }
    }
}

impl StructureSettings {
    pub fn to_block_structure(&self) -> BlockStructure {
        BlockStructure {
            blocks: self.blocks,
            block_size: self.block_size,
            texture: self.texture,
            contrast: self.contrast,
            dot_size: self.dot_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    SyntheticShapes {
        #[serde(default = "d_train_count")]
        train_count: usize,
        #[serde(default = "d_size")]
        size: usize,
        #[serde(default = "d_noise")]
        noise: f64,
    },
    MnistIdx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    StereoRds {
        #[serde(default = "d_height")]
        height: usize,
        #[serde(default = "d_width")]
        width: usize,
        #[serde(default = "d_dmax")]
        d_max: usize,
        #[serde(default)]
        structure: StructureSettings,
    },
}

impl DatasetConfig {
    pub fn is_stereo(&self) -> bool {
        matches!(self, DatasetConfig::StereoRds { .. })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    #[default]
    SmallCnn,
    Logistic,
    EquivariantProbe,
}

fn d_channels() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub preset: ModelPreset,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default)]
    pub weights: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: ModelPreset::default(),
            spec: None,
            channels: d_channels(),
            weights: None,
        }
    }
}

impl ModelConfig {
    /// The explicit spec, or the preset built for `input_shape`.
    pub fn resolve(&self, input_shape: [usize; 3], num_classes: usize) -> ModelSpec {
        if let Some(spec) = &self.spec {
            return spec.clone();
        }
        match self.preset {
            ModelPreset::SmallCnn => ModelSpec::small_cnn(input_shape, num_classes),
            ModelPreset::Logistic => ModelSpec::logistic(input_shape, num_classes),
            ModelPreset::EquivariantProbe => ModelSpec::equivariant_probe(input_shape, self.channels, num_classes),
        }
    }
}

fn d_lr() -> f64 {
    0.02
}
fn d_epochs() -> usize {
    5
}
fn d_batch() -> usize {
    32
}
fn d_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            epochs: d_epochs(),
            batch: d_batch(),
            momentum: d_momentum(),
        }
    }
}

impl TrainingConfig {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch: self.batch,
            seed,
            momentum: self.momentum,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    SubsampledPatch,
    Patch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseTarget {
    #[default]
    GroundTruth,
    CleanPrediction,
}

fn d_stride() -> usize {
    2
}
fn d_patch() -> usize {
    5
}
/// Default soft-argmin temperature relative to the squared texture
/// contrast, which sets the scale of matching costs.
pub const RELATIVE_TEMPERATURE: f64 = 0.003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherSettings {
    #[serde(default)]
    pub encoder: EncoderKind,
    #[serde(default = "d_stride")]
    pub stride: usize,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default)]
    pub pad_mode: PadMode,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub candidate_pad: PadMode,
    #[serde(default)]
    pub target: DenseTarget,
}

impl Default for MatcherSettings {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::default(),
            stride: d_stride(),
            patch: d_patch(),
            pad_mode: PadMode::Zeros,
            temperature: None,
            candidate_pad: PadMode::Zeros,
            target: DenseTarget::default(),
        }
    }
}

impl MatcherSettings {
    pub fn temperature_for(&self, contrast: f64) -> f64 {
        self.temperature
            .unwrap_or(RELATIVE_TEMPERATURE * contrast * contrast)
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks what can be checked without building the model; taps are
    /// checked against the model in [`crate::experiment`].
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be positive".into()));
        }
        for a in &self.attacks {
            a.validate().map_err(|e| Error::Config(format!("attack `{}`: {e}", a.label())))?;
            if self.dataset.is_stereo() && a.kind == resonance::AttackKind::CwMargin {
                return Err(Error::Config("cw_margin needs class labels and cannot run on stereo data".into()));
            }
        }
        let mut labels: Vec<String> = self.attacks.iter().map(AttackConfig::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("attack labels must be unique; set `name` to disambiguate".into()));
        }
        let mut labels: Vec<String> = self.defenses.iter().map(DefenseConfig::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("defense labels must be unique; set `name` to disambiguate".into()));
        }
        if let Some(t) = self.matcher.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config("matcher.temperature must be positive".into()));
            }
        }
        Ok(())
    }

    /// Defenses in report order: `none` first, then the configured ones
    /// (a configured `none` is not repeated).
    pub fn defense_list(&self) -> Vec<DefenseConfig> {
        let mut out = vec![DefenseConfig::none()];
        out.extend(
            self.defenses
                .iter()
                .filter(|d| d.label() != "none")
                .cloned(),
        );
        out
    }
}
