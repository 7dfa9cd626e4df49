//! JSON run configuration shared by every subcommand.

use std::path::Path;

use pixclust_core::eval::LaneScoreConfig;
use pixclust_core::losses::LossConfig;
use pixclust_core::network::{GradCheckConfig, MiniFpnConfig, TrainConfig, OUTPUT_STRIDE};
use pixclust_core::postprocess::PostprocessConfig;
use pixclust_core::sampling::SamplerConfig;
use pixclust_core::scene::SceneGenConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, IoContext, Result};

pub const CONFIG_VERSION: u32 = 1;
/// Overrides the `seed` field of any loaded config.
pub const SEED_ENV: &str = "PXC_SEED";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    #[default]
    Shapes,
    Lanes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 2000, clip_grad_norm: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckSection {
    pub step: f64,
    pub max_coords: Option<usize>,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self { step: 1e-4, max_coords: None }
    }
}

/// The `seed` field drives scene generation, weight initialisation and the
/// training shuffle; `net.seed` is overwritten with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: SceneMode,
    /// Scenes written by `gen`.
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default)]
    pub scene: SceneGenConfig,
    #[serde(default)]
    pub net: MiniFpnConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainSection,
    /// Thresholds scaled from the image size when absent.
    #[serde(default)]
    pub postprocess: Option<PostprocessConfig>,
    #[serde(default)]
    pub lane_eval: LaneScoreConfig,
    #[serde(default)]
    pub grad_check: GradCheckSection,
}

fn default_count() -> usize {
    10
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Invalid(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Reads a config file and applies the `PXC_SEED` override. Not yet
    /// validated, so callers can apply flag overrides first.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SceneMode::Shapes => self.scene.validate_shapes()?,
            SceneMode::Lanes => self.scene.validate_lanes()?,
        }
        self.net.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.postprocess().validate()?;
        if self.net.n != self.loss.n {
            return Err(CliError::Invalid(format!(
                "net.n = {} but loss.n = {}; both count instance indices",
                self.net.n, self.loss.n
            )));
        }
        if (self.net.height, self.net.width) != (self.scene.height, self.scene.width) {
            return Err(CliError::Invalid(format!(
                "network input {}x{} differs from scene size {}x{}",
                self.net.height, self.net.width, self.scene.height, self.scene.width
            )));
        }
        if self.loss.stride != OUTPUT_STRIDE {
            return Err(CliError::Invalid(format!("loss.stride must equal the network stride {OUTPUT_STRIDE}")));
        }
        let needed = match self.mode {
            SceneMode::Shapes => self.scene.shape_kinds.iter().map(|k| k.category() as usize).max().unwrap_or(1),
            SceneMode::Lanes => 1,
        };
        if self.net.classes < needed {
            return Err(CliError::Invalid(format!(
                "net.classes = {} cannot represent category {needed}",
                self.net.classes
            )));
        }
        if let Some(c) = self.train.clip_grad_norm {
            if !(c > 0.0) {
                return Err(CliError::Invalid(format!("train.clip_grad_norm must be positive, got {c}")));
            }
        }
        if !(self.grad_check.step > 0.0) {
            return Err(CliError::Invalid("grad_check.step must be positive".into()));
        }
        Ok(())
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        self.postprocess.unwrap_or_else(|| PostprocessConfig::for_image(self.scene.height, self.scene.width))
    }

    pub fn net(&self) -> MiniFpnConfig {
        MiniFpnConfig { seed: self.seed, ..self.net.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            net: self.net(),
            sampler: self.sampler,
            loss: self.loss,
            seed: self.seed,
            clip_grad_norm: self.train.clip_grad_norm,
        }
    }

    pub fn grad_check_config(&self) -> GradCheckConfig {
        GradCheckConfig {
            net: self.net(),
            loss: self.loss,
            sampler: self.sampler,
            scene: self.scene.clone(),
            seed: self.seed,
            step: self.grad_check.step,
            max_coords: self.grad_check.max_coords,
            fault: None,
        }
    }

    /// SHA-256 of the canonical JSON serialisation, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        format!("{:x}", Sha256::digest(bytes))
    }
}
