use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::augcodec::{Baseline, CodecProfile, Dataset, PolicyPair, DEFAULT_NORMALIZER_SAMPLES};
use crate::error::{Error, Result};
use crate::networks::{EncoderConfig, EquiModConfig, HeadConfig, ModelConfig};
use crate::objectives::LossConfig;
use crate::trainer::{OptimizerConfig, ScheduleConfig, TrainerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Settings that affect where and how a run executes, not what it learns
/// (except `accumulation_steps`, which changes batch-norm statistics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeConfig {
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub precision: Precision,
    pub accumulation_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Train on the first `n` training images only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    pub normalizer_samples: usize,
    pub checkpoint_every_epochs: u64,
    /// Leave the run resumable after this many epochs in one session.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after_epochs: Option<u64>,
    /// Also stop after this many optimizer steps (smoke tests).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            data_root: None,
            precision: Precision::F32,
            accumulation_steps: 1,
            threads: None,
            train_subset: None,
            normalizer_samples: DEFAULT_NORMALIZER_SAMPLES,
            checkpoint_every_epochs: 1,
            stop_after_epochs: None,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: Dataset,
    pub baseline: Baseline,
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub inv_head: HeadConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub byol_predictor: Option<HeadConfig>,
    /// Absent for the plain invariance baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equimod: Option<EquiModConfig>,
    #[serde(default)]
    pub runtime: RuntimeConfig,
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name '{}' must be a non-empty path segment", self.name)));
        }
        self.encoder.validate()?;
        self.inv_head.validate("inv_head")?;
        if let Some(p) = &self.byol_predictor {
            p.validate("byol_predictor")?;
        }
        if let Some(e) = &self.equimod {
            e.equi_head.validate("equi_head")?;
            e.predictor.validate()?;
            e.aug_projector.validate()?;
        }
        self.trainer_config().validate()?;
        let acc = self.runtime.accumulation_steps;
        if self.batch_size < 2 || acc == 0 || self.batch_size % acc != 0 || self.batch_size / acc < 2 {
            return Err(Error::Config(format!(
                "batch size {} must split into {acc} micro-batches of at least 2 images",
                self.batch_size
            )));
        }
        if self.runtime.checkpoint_every_epochs == 0 || self.runtime.normalizer_samples < 2 {
            return Err(Error::Config("checkpoint_every_epochs >= 1 and normalizer_samples >= 2 required".into()));
        }
        self.policies().validate()
    }

    pub fn profile(&self) -> CodecProfile {
        CodecProfile::new(self.dataset, self.baseline)
    }

    /// Preset view policies at the encoder's input resolution.
    pub fn policies(&self) -> PolicyPair {
        PolicyPair::preset(self.profile()).with_resolution(self.encoder.resolution)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder,
            inv_head: self.inv_head,
            byol_predictor: self.byol_predictor,
            equimod: self.equimod,
            encoding_len: self.profile().encoding_len(),
        }
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            baseline: self.baseline,
            loss: self.loss,
            optimizer: self.optimizer,
            schedule: self.schedule,
            accumulation_steps: self.runtime.accumulation_steps,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runtime.output_dir.join(&self.name)
    }

    /// True when the run's objective is exactly the invariance baseline.
    pub fn is_baseline_equivalent(&self) -> bool {
        self.equimod.is_none() || self.loss.lambda == 0.0
    }

    /// Sets a dotted key (`loss.lambda`, `equimod.predictor.hidden`, ...) to
    /// a TOML literal, rejecting unknown keys and re-validating.
    pub fn set(&mut self, key: &str, literal: &str) -> Result<()> {
        let value: toml::Value = format!("v = {literal}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(literal.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("'{key}' does not name a config field")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expcli::presets::preset;

    #[test]
    fn set_overrides_nested_fields() {
        let mut c = preset("simclr-equimod-cifar10").unwrap();
        c.set("loss.lambda", "0").unwrap();
        assert_eq!(c.loss.lambda, 0.0);
        c.set("equimod.predictor.layers", "2").unwrap_err();
        c.set("equimod.predictor", "{ layers = 2, hidden = 16 }").unwrap();
        assert_eq!(c.equimod.unwrap().predictor.hidden, 16);
        c.set("runtime.output_dir", "/tmp/x").unwrap();
        assert_eq!(c.runtime.output_dir, PathBuf::from("/tmp/x"));
        assert!(c.set("loss.no_such_key", "1").is_err());
        assert!(c.set("optimizer.base_lr", "-1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut s = preset("simclr-cifar10").unwrap().to_toml().unwrap();
        s.push_str("\n[extra]\nx = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&s), Err(Error::Config(_))));
    }
}
