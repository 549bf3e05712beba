//! Run configuration, stored as TOML. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::infer::DEFAULT_STEPS;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::synth::SynthConfig;
use crate::tasks::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.timesteps, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Weight initialisation.
    pub init: u64,
    /// Sample drawing during training.
    pub train: u64,
    /// Generation noise.
    pub sample: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub seeds: Seeds,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.schedule.timesteps < 2 {
            return Err(Error::Config("schedule.timesteps must be at least 2".into()));
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.schedule.timesteps {
            return Err(Error::Config(format!(
                "sampler.steps must lie in 1..={}",
                self.schedule.timesteps
            )));
        }
        if self.eval.steps == 0 || self.eval.steps > self.schedule.timesteps {
            return Err(Error::Config("eval.steps out of range".into()));
        }
        if (self.synth.image_height, self.synth.image_width) != (self.model.image_height, self.model.image_width) {
            return Err(Error::Config(format!(
                "synth renders {}x{} but the model expects {}x{}",
                self.synth.image_height, self.synth.image_width, self.model.image_height, self.model.image_width
            )));
        }
        Ok(())
    }

    /// Parses and validates. Parse errors carry the offending line and key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
