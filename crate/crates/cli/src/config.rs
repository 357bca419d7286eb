//! Run configuration: a TOML file with dotted keys, overridden by flags.

use std::path::{Path, PathBuf};

use ctxfer_core::context_fusion::{Palette, StatsMode};
use ctxfer_core::density::KernelMode;
use ctxfer_core::neural::{NetworkSpec, OptimizerConfig, OptimizerKind};
use ctxfer_core::synth::SynthConfig;
use ctxfer_core::training::{AblationVariant, BandwidthRouting, LabelScale, TrainConfig};
use ctxfer_core::transfer_physical::TransferTrainConfig;
use ctxfer_core::transfer_social::{DEFAULT_BANDWIDTH, DEFAULT_LAMBDA};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for every random choice in every command.
    pub seed: u64,
    pub variant: AblationVariant,
    pub paths: PathsConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub density: DensityConfig,
    pub social: SocialConfig,
    pub transfer: TransferConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub render: RenderConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            variant: AblationVariant::Full,
            paths: PathsConfig::default(),
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            density: DensityConfig::default(),
            social: SocialConfig::default(),
            transfer: TransferConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            render: RenderConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// Scene manifest. Defaults to `scenes.toml` inside `out`.
    pub manifest: Option<PathBuf>,
    /// Predictor checkpoint. Defaults to `train-<variant>/model.ckpt` inside `out`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("run"),
            manifest: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 100, cols: 100 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Default,
    /// Few channels; only useful for smoke runs.
    Tiny,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: ModelPreset,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    /// Kernel bandwidth in scene units.
    pub h: f64,
    pub kernel: KernelMode,
    pub subsamples: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            h: 0.7,
            kernel: KernelMode::Literal,
            subsamples: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialConfig {
    pub lambda: Vec<f64>,
    pub init_bandwidth: f64,
    /// Neighbors farther than this (scene units) are ignored.
    pub neighbor_radius: Option<f64>,
}

impl Default for SocialConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA.to_vec(),
            init_bandwidth: DEFAULT_BANDWIDTH,
            neighbor_radius: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Must match the variant's weights when given.
    pub mu: Option<Vec<f64>>,
    pub freeze_g: bool,
    pub bandwidth_routing: BandwidthRouting,
    pub label_scale: LabelScale,
    /// Evenly thins each scene's samples down to this many.
    pub max_samples_per_scene: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.optimizer.lr,
            optimizer: t.optimizer.kind,
            mu: None,
            freeze_g: t.freeze_g,
            bandwidth_routing: t.bandwidth_routing,
            label_scale: t.label_scale,
            max_samples_per_scene: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out scene. Defaults to the last scene of the manifest.
    pub test_scene: Option<String>,
    pub k: usize,
    pub stats: StatsMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_scene: None,
            k: 1,
            stats: StatsMode::Batch,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Sample ids as `scene:agent@frame`.
    pub samples: Vec<String>,
    pub palette: Palette,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<AblationVariant>,
    pub out: Option<PathBuf>,
    pub scene: Option<String>,
    pub k: Option<usize>,
    pub samples: Vec<String>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(v) = o.variant {
            self.variant = v;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(scene) = &o.scene {
            self.eval.test_scene = Some(scene.clone());
        }
        if let Some(k) = o.k {
            self.eval.k = k;
        }
        if !o.samples.is_empty() {
            self.render.samples = o.samples.clone();
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.lambda()?;
        if let Some(mu) = &self.train.mu {
            let w = self.variant.weights();
            if mu.len() != 3 {
                return Err(CliError::Config(format!("train.mu needs 3 entries, got {}", mu.len())));
            }
            if mu[..] != [w.mu1, w.mu2, w.mu3] {
                return Err(CliError::Config(format!(
                    "train.mu {mu:?} does not match variant {} ({}, {}, {})",
                    self.variant, w.mu1, w.mu2, w.mu3
                )));
            }
        }
        if self.eval.k == 0 {
            return Err(CliError::Config("eval.k must be at least 1".into()));
        }
        if !(self.density.h.is_finite() && self.density.h > 0.0) {
            return Err(CliError::Config(format!(
                "density.h must be positive, got {}",
                self.density.h
            )));
        }
        self.network_spec()?;
        Ok(())
    }

    pub fn lambda(&self) -> Result<[f64; 3], CliError> {
        <[f64; 3]>::try_from(self.social.lambda.as_slice()).map_err(|_| {
            CliError::Config(format!(
                "social.lambda needs 3 entries, got {}",
                self.social.lambda.len()
            ))
        })
    }

    /// Network shapes for the configured grid. The transfer model reads
    /// images at twice the grid size.
    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        let GridConfig { rows, cols } = self.grid;
        let mut spec = match self.model.preset {
            ModelPreset::Default => NetworkSpec::default(),
            ModelPreset::Tiny => NetworkSpec::tiny(),
        };
        spec.grid_rows = rows;
        spec.grid_cols = cols;
        spec.transfer.input_size = 2 * rows;
        if rows != cols || rows == 0 || spec.transfer.output_size() != rows {
            return Err(CliError::Config(format!(
                "grid must be square with a side divisible by 4, got {rows}x{cols}"
            )));
        }
        if spec.context_flatten_dim() == 0 {
            return Err(CliError::Config(format!(
                "grid {rows}x{cols} is too small for the context network"
            )));
        }
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let optimizer = OptimizerConfig {
            kind: self.train.optimizer,
            ..OptimizerConfig::adam(self.train.lr)
        };
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer,
            seed: self.seed,
            variant: self.variant,
            lambda: self.lambda()?,
            init_bandwidth: self.social.init_bandwidth,
            freeze_g: self.train.freeze_g,
            bandwidth_routing: self.train.bandwidth_routing,
            label_scale: self.train.label_scale,
        })
    }

    pub fn transfer_config(&self) -> TransferTrainConfig {
        TransferTrainConfig {
            epochs: self.transfer.epochs,
            optimizer: OptimizerConfig::adam(self.transfer.lr),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.out.join("scenes.toml"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.train_dir().join("model.ckpt"))
    }

    pub fn labels_dir(&self) -> PathBuf {
        self.paths.out.join("labels")
    }

    pub fn transfer_dir(&self) -> PathBuf {
        self.paths.out.join("transfer")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.paths.out.join(format!("train-{}", self.variant))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.paths.out.join(format!("eval-{}", self.variant))
    }

    pub fn render_dir(&self) -> PathBuf {
        self.paths.out.join(format!("render-{}", self.variant))
    }
}
