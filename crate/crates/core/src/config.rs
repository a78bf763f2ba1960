//! Run configuration, stored as versioned JSON and embedded in every
//! checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bestrq::MaskConfig;
use crate::encoder::{EncoderConfig, Preset};
use crate::frontend::FrontendConfig;
use crate::pooling::{PoolingConfig, PoolingKind};
use crate::train::{AdamWConfig, ScheduleConfig};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

/// A named preset or an explicit encoder geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(Preset),
    Explicit(EncoderConfig),
}

impl ModelSpec {
    pub fn encoder(&self) -> EncoderConfig {
        match self {
            ModelSpec::Preset(p) => p.config(),
            ModelSpec::Explicit(c) => c.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierSettings {
    pub margin: f64,
    pub scale: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self { margin: 0.2, scale: 30.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    /// `total_steps` is replaced by `steps` at run time.
    pub schedule: ScheduleConfig,
    pub mask: MaskConfig,
    pub quantizer_seed: u64,
    /// Write an intermediate checkpoint every this many steps (0 = only at
    /// the end).
    pub checkpoint_every: u64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 4,
            schedule: ScheduleConfig {
                peak_lr: 1e-3,
                warmup_steps: 20,
                total_steps: 200,
                floor_lr: 0.0,
            },
            mask: MaskConfig::default(),
            quantizer_seed: 1234,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    pub epochs: u64,
    pub batch_size: usize,
    /// Stretched at run time to `epochs × batches per epoch` steps, warmup
    /// keeping its fraction of the run.
    pub schedule: ScheduleConfig,
    pub freeze_encoder: bool,
    /// Head count of the multi-head variants in the pooling benchmark.
    pub bench_heads: usize,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            schedule: ScheduleConfig {
                peak_lr: 2e-3,
                warmup_steps: 20,
                total_steps: 240,
                floor_lr: 1e-5,
            },
            freeze_encoder: false,
            bench_heads: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Pre-training checkpoint whose encoder initializes fine-tuning.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub model: ModelSpec,
    pub frontend: FrontendConfig,
    pub pooling: PoolingConfig,
    pub classifier: ClassifierSettings,
    pub optimizer: AdamWConfig,
    pub pretrain: PretrainSettings,
    pub finetune: FinetuneSettings,
    /// Seeds parameter initialization, data order, masks and dropout.
    pub seed: u64,
    pub paths: Paths,
}

impl Default for RunConfig {
    /// Desk scale: the toy encoder on 3 s utterances.
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelSpec::Preset(Preset::Toy),
            frontend: FrontendConfig::default().with_target_seconds(3.0),
            pooling: PoolingConfig::new(PoolingKind::TemporalGate, 1),
            classifier: ClassifierSettings::default(),
            optimizer: AdamWConfig::default(),
            pretrain: PretrainSettings::default(),
            finetune: FinetuneSettings::default(),
            seed: 0,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Full-scale settings: 15 s inputs, batch 128 for 440k pre-training
    /// steps with 10k warmup at 1e-4, batch 64 for 80 fine-tuning epochs.
    pub fn full_scale(preset: Preset) -> Self {
        let heads = (preset.config().hidden_size / 64).max(1);
        Self {
            model: ModelSpec::Preset(preset),
            frontend: FrontendConfig::default(),
            pooling: PoolingConfig::new(PoolingKind::TemporalGate, heads),
            pretrain: PretrainSettings {
                steps: 440_000,
                batch_size: 128,
                schedule: ScheduleConfig::default(),
                ..PretrainSettings::default()
            },
            finetune: FinetuneSettings {
                epochs: 80,
                batch_size: 64,
                schedule: ScheduleConfig::default(),
                freeze_encoder: false,
                bench_heads: heads,
            },
            ..Self::default()
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        self.model.encoder()
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let enc = self.encoder();
        enc.validate()?;
        if self.frontend.n_mels != enc.n_mels {
            return Err(Error::Config(format!(
                "frontend produces {} mel channels, encoder expects {}",
                self.frontend.n_mels, enc.n_mels
            )));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Mel frames per utterance at the configured length and sample rate.
    pub fn mel_frames(&self, sample_rate: u32) -> usize {
        self.frontend.frames_for(sample_rate)
    }
}
