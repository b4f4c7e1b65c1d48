//! Run configuration: one JSON document with `data`, `model`, `loss`,
//! `optim`, `schedule`, `eval` and `seed` sections. Every field has a
//! default, so `{}` is a valid config.

use std::fs;
use std::path::{Path, PathBuf};

use asanet_core::eval::EvalConfig;
use asanet_core::losses::LossWeights;
use asanet_core::model::ModelConfig;
use asanet_core::synth::GenConfig;
use asanet_core::train::{LossSwitches, OptimConfig, SamplerConfig, Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Generator settings, used when `path` is unset.
    pub gen: GenConfig,
    /// A dataset directory written by `asanet gen`.
    pub path: Option<PathBuf>,
    pub sampler: SamplerConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            path: None,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub use_pmi: bool,
    pub use_bce: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let s = LossSwitches::default();
        Self {
            weights: LossWeights::default(),
            use_pmi: s.use_pmi,
            use_bce: s.use_bce,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleSection {
    #[serde(flatten)]
    pub schedule: Schedule,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub loss: LossSection,
    pub optim: OptimConfig,
    pub schedule: ScheduleSection,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            loss: self.loss.weights.clone(),
            switches: LossSwitches {
                use_pmi: self.loss.use_pmi,
                use_bce: self.loss.use_bce,
            },
            optim: self.optim.clone(),
            schedule: self.schedule.schedule.clone(),
            sampler: self.data.sampler,
            seed: self.seed,
        }
    }

    /// Two identities, tiny frames, 50 single-batch epochs.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.data.gen = GenConfig {
            num_identities: 2,
            tracklets_per_identity: 4,
            frame_height: 32,
            frame_width: 16,
            min_length: 4,
            max_length: 6,
            unmatched_identities: 1,
            distractors: 1,
            ..GenConfig::default()
        };
        c.data.sampler = SamplerConfig { p: 2, k: 2, frames: 4 };
        c.model = ModelConfig {
            frame_height: 32,
            frame_width: 16,
            channels: 8,
            num_identities: 2,
            ..ModelConfig::default()
        };
        c.schedule = ScheduleSection {
            schedule: Schedule {
                total_epochs: 50,
                decay_epochs: vec![30, 40],
                decay_factor: 0.1,
            },
            checkpoint_every: 0,
        };
        c.eval.frames = 4;
        c
    }

    /// Reduced setting for ablation grids: 8 identities, 32×16 frames, C=16.
    pub fn ablation() -> Self {
        let mut c = Self::default();
        c.data.gen = GenConfig {
            num_identities: 8,
            frame_height: 32,
            frame_width: 16,
            ..GenConfig::default()
        };
        c.data.sampler = SamplerConfig { p: 4, k: 4, frames: 4 };
        c.model = ModelConfig {
            frame_height: 32,
            frame_width: 16,
            channels: 16,
            num_identities: 8,
            ..ModelConfig::default()
        };
        c.schedule = ScheduleSection {
            schedule: Schedule {
                total_epochs: 40,
                decay_epochs: vec![20, 30],
                decay_factor: 0.1,
            },
            checkpoint_every: 0,
        };
        c.eval.frames = 4;
        c
    }
}
