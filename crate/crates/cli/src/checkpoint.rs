//! JSON checkpoints: named row-major parameter arrays plus the schedule,
//! architecture and provenance needed to rebuild a model.

use std::fs;
use std::io::Write;
use std::path::Path;

use fade_autodiff::{Mlp, ParameterStore, Tensor};
use fade_core::adversary::Discriminator;
use fade_core::diffusion::{DenoiserModel, DenoiserSpec, NoiseSchedule};
use fade_core::metrics::ProbeClassifier;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Erased,
    Discriminator,
    Probe,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Erased => "erased",
            Stage::Discriminator => "discriminator",
            Stage::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Denoiser { spec: DenoiserSpec },
    Discriminator { mlp: Mlp },
    Probe { mlp: Mlp, arities: Vec<usize>, concept_index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u64,
    pub betas: Vec<f64>,
    pub architecture: Architecture,
    pub parameters: Vec<NamedArray>,
    pub provenance: Provenance,
}

fn arrays(store: &ParameterStore) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(name, t)| NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    fn new(betas: &[f64], architecture: Architecture, store: &ParameterStore, provenance: Provenance) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            betas: betas.to_vec(),
            architecture,
            parameters: arrays(store),
            provenance,
        }
    }

    pub fn denoiser(model: &DenoiserModel, schedule: &NoiseSchedule, stage: Stage, config_hash: &str, seed: u64) -> Self {
        Self::new(
            schedule.betas(),
            Architecture::Denoiser {
                spec: model.spec.clone(),
            },
            &model.params,
            Provenance {
                config_hash: config_hash.into(),
                seed,
                stage,
            },
        )
    }

    pub fn discriminator(d: &Discriminator, schedule: &NoiseSchedule, config_hash: &str, seed: u64) -> Self {
        Self::new(
            schedule.betas(),
            Architecture::Discriminator { mlp: d.arch.clone() },
            &d.params,
            Provenance {
                config_hash: config_hash.into(),
                seed,
                stage: Stage::Discriminator,
            },
        )
    }

    pub fn probe(p: &ProbeClassifier, schedule: &NoiseSchedule, config_hash: &str, seed: u64) -> Self {
        Self::new(
            schedule.betas(),
            Architecture::Probe {
                mlp: p.arch.clone(),
                arities: p.arities.clone(),
                concept_index: p.concept_index,
            },
            &p.params,
            Provenance {
                config_hash: config_hash.into(),
                seed,
                stage: Stage::Probe,
            },
        )
    }

    pub fn stage(&self) -> Stage {
        self.provenance.stage
    }

    /// Fails unless the checkpoint carries one of `allowed`.
    pub fn require_stage(&self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self.stage()) {
            return Ok(());
        }
        Err(CliError::StageMismatch {
            found: self.stage().as_str().into(),
            expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" or "),
        })
    }

    pub fn store(&self) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for a in &self.parameters {
            let t = Tensor::new(a.shape.clone(), a.values.clone())
                .map_err(|e| CliError::CorruptCheckpoint(format!("array {}: {e}", a.name)))?;
            store
                .insert(a.name.clone(), t)
                .map_err(|e| CliError::CorruptCheckpoint(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_betas(self.betas.clone()).map_err(|e| CliError::CorruptCheckpoint(e.to_string()))
    }

    pub fn to_denoiser(&self) -> Result<DenoiserModel> {
        self.require_stage(&[Stage::Pretrained, Stage::Erased])?;
        match &self.architecture {
            Architecture::Denoiser { spec } => DenoiserModel::from_params(spec.clone(), self.store()?)
                .map_err(|e| CliError::CorruptCheckpoint(e.to_string())),
            _ => Err(CliError::CorruptCheckpoint("architecture is not a denoiser".into())),
        }
    }

    pub fn to_discriminator(&self) -> Result<Discriminator> {
        self.require_stage(&[Stage::Discriminator])?;
        match &self.architecture {
            Architecture::Discriminator { mlp } => Discriminator::from_params(mlp.clone(), self.store()?)
                .map_err(|e| CliError::CorruptCheckpoint(e.to_string())),
            _ => Err(CliError::CorruptCheckpoint("architecture is not a discriminator".into())),
        }
    }

    pub fn to_probe(&self) -> Result<ProbeClassifier> {
        self.require_stage(&[Stage::Probe])?;
        match &self.architecture {
            Architecture::Probe {
                mlp,
                arities,
                concept_index,
            } => {
                let params = self.store()?;
                mlp.forward(&params, &Tensor::zeros(&[1, mlp.input_width()]))
                    .map_err(|e| CliError::CorruptCheckpoint(e.to_string()))?;
                Ok(ProbeClassifier {
                    arch: mlp.clone(),
                    params,
                    arities: arities.clone(),
                    concept_index: *concept_index,
                })
            }
            _ => Err(CliError::CorruptCheckpoint("architecture is not a probe".into())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: u64,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| CliError::CorruptCheckpoint(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(CliError::VersionMismatch {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| CliError::CorruptCheckpoint(e.to_string()))
    }
}

/// Writes `bytes` next to `path` and renames into place, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, ckpt.to_json().as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_json(&text)
}
