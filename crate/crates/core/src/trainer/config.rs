//! Training configuration, its presets and TOML round trip.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::{BatchRatio, Strategy, DEFAULT_THETA};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adamax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub base_epochs: usize,
    pub novel_epochs: usize,
    /// Slices per batch.
    pub batch_size: usize,
    /// Base-step batches per epoch; 0 means one full pass over every slice.
    pub base_batches_per_epoch: usize,
    /// Novel-step batches per epoch; 0 means one full pass over the one-shot subject.
    pub novel_batches_per_epoch: usize,
    pub seed: u64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Samples per region and class.
    pub n_s: usize,
    /// Distance threshold of the region partition, in voxels.
    pub theta: f64,
    /// Fraction of each batch fed to the contrastive loss.
    pub ratio: BatchRatio,
    pub strategy: Strategy,
    pub use_dis: bool,
    pub use_vc: bool,
    /// Learned per-loss weights; without it the enabled losses are summed.
    pub use_dw: bool,
    /// Unit-normalize embeddings before distances.
    pub embed_normalize: bool,
    pub augment_base: bool,
    pub augment_oneshot: bool,
    pub widths: Vec<usize>,
    pub dropout: f64,
    pub skips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small network and short schedules that run on one CPU core.
    pub fn desk() -> Self {
        Self {
            optimizer: Optimizer::Adamax,
            lr: 0.002,
            base_epochs: 40,
            novel_epochs: 60,
            batch_size: 16,
            base_batches_per_epoch: 48,
            novel_batches_per_epoch: 4,
            seed: 0,
            tau: 1.0,
            n_s: 5,
            theta: DEFAULT_THETA,
            ratio: BatchRatio::EIGHTH,
            strategy: Strategy::BalancedHard,
            use_dis: true,
            use_vc: true,
            use_dw: true,
            embed_normalize: false,
            augment_base: false,
            augment_oneshot: false,
            widths: vec![8, 16],
            dropout: 0.4,
            skips: true,
        }
    }

    /// Full-size schedule and network for anyone with the compute.
    pub fn paper() -> Self {
        Self {
            base_epochs: 200,
            novel_epochs: 200,
            batch_size: 48,
            base_batches_per_epoch: 0,
            novel_batches_per_epoch: 0,
            augment_base: true,
            widths: vec![64, 128, 256, 512],
            ..Self::desk()
        }
    }

    /// Plain fine-tuning from the base model: every switch off.
    pub fn lwf(mut self) -> Self {
        self.use_dis = false;
        self.use_vc = false;
        self.use_dw = false;
        self
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown training preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("theta", self.theta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.theta < 1.0 {
            return Err(Error::Config(format!("theta must be at least 1 voxel, got {}", self.theta)));
        }
        let counts = [
            ("base_epochs", self.base_epochs),
            ("novel_epochs", self.novel_epochs),
            ("batch_size", self.batch_size),
            ("n_s", self.n_s),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        BatchRatio::new(self.ratio.value())?;
        self.model(1, 0).validate()
    }

    /// Architecture for the given head sizes.
    pub fn model(&self, base_classes: usize, novel_classes: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 9,
            widths: self.widths.clone(),
            base_classes,
            novel_classes,
            dropout: self.dropout,
            skips: self.skips,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("training config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
