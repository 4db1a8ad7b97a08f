use std::path::{Path, PathBuf};

use fade_core::diffusion::{NoiseSchedule, PretrainConfig};
use fade_core::metrics::{EvalConfig, ProbeConfig};
use fade_core::trainer::FadeConfig;
use fade_core::world::{World, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

/// Whole-pipeline configuration. Every section except `probe` must be
/// present; unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub fade: FadeConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn default_config() -> Self {
        RunConfig {
            world: WorldConfig::default_world(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            fade: FadeConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str, e: fade_core::FadeError| CliError::Config(format!("{k}: {e}"));
        World::new(self.world.clone()).map_err(|e| key("world", e))?;
        let schedule = self.noise_schedule()?;
        self.fade.validate(schedule.steps()).map_err(|e| key("fade", e))?;
        if self.pretrain.batch == 0 || !(self.pretrain.lr > 0.0) || !(0.0..=1.0).contains(&self.pretrain.cond_dropout) {
            return Err(CliError::Config(
                "pretrain: batch must be positive, lr positive and cond_dropout in [0, 1]".into(),
            ));
        }
        if self.eval.samples_per_prompt < 100 || self.eval.reference_samples < 3 {
            return Err(CliError::Config(
                "eval: samples_per_prompt must be at least 100 and reference_samples at least 3".into(),
            ));
        }
        Ok(())
    }

    pub fn world(&self) -> Result<World> {
        World::new(self.world.clone()).map_err(|e| CliError::Config(format!("world: {e}")))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end).map_err(|e| CliError::Config(format!("schedule: {e}")))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
