//! End-to-end orchestration: configuration, the SGD training loop,
//! inference with file outputs, overlay rendering, and the command-line
//! interface.

pub mod cli;
pub mod infer;
pub mod overlay;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::data::AugmentationConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub use cli::cli;
pub use infer::{infer, write_outputs, write_overlays, InferenceResult};
pub use overlay::render_overlay;
pub use train::{train, TrainReport};

/// Relative weights of the four loss components.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            reg: 1.0,
            ctr: 1.0,
            mask: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Desk-profile default. Production-scale runs use schedules on the
    /// order of 200_000 iterations; that is deliberately out of budget
    /// here.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Write the checkpoint every N iterations (0 = only at the end).
    pub checkpoint_interval: usize,
    /// Box-IOU threshold for matching decoded detections to ground truth
    /// when training the mask head.
    pub mask_match_iou: f64,
    /// Upper bound on mask ROIs per image per iteration.
    pub mask_rois: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            batch_size: 1,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            checkpoint_interval: 0,
            mask_match_iou: 0.5,
            mask_rois: 4,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// The single JSON configuration consumed by the CLI. Every field has a
/// desk-profile default; a config file may override any subset and
/// command-line flags override the file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Multi-scale training augmentation; absent = disabled.
    pub augment: Option<AugmentationConfig>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: None,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(aug) = &self.augment {
            aug.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::json(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        Config::from_json(&crate::io_util::read_to_string(path)?)
    }
}
