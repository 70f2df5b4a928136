//! Declarative experiment configuration: one JSON document describing
//! the task, mode, loss, model specs, schedule, dataset and seeds.
//! Unknown keys are hard errors so hyperparameter typos cannot pass
//! silently, and every artifact manifest records the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::DegradationSpec;
use crate::error::{Error, Result};
use crate::losses::{RecognitionLossMode, RecognitionLossSpec};
use crate::models::{ProcessorSpec, RecognizerSpec, TransformerSpec};
use crate::train::{OptimizerSchedule, TrainMode};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: DegradationSpec,
    pub mode: TrainMode,
    pub loss: RecognitionLossSpec,
    pub processor: ProcessorSpec,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transformer: Option<TransformerSpec>,
    pub recognizer: RecognizerSpec,
    /// Processor training schedule.
    pub schedule: OptimizerSchedule,
    /// Recognizer pretraining schedule.
    pub recognizer_schedule: OptimizerSchedule,
    pub dataset_root: PathBuf,
    pub seeds: Vec<u64>,
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// A runnable starting point for a task and mode; callers override
    /// fields from CLI flags.
    pub fn for_task(task: DegradationSpec, mode: TrainMode) -> Self {
        let lambda = mode.default_lambda();
        let loss = match mode {
            TrainMode::RaUnsupervised => {
                RecognitionLossSpec::unsupervised(lambda, crate::losses::Distance::L2Probs)
            }
            TrainMode::Plain => RecognitionLossSpec::supervised(0.0),
            _ => RecognitionLossSpec::supervised(lambda),
        };
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            processor: ProcessorSpec::for_task(&task),
            task,
            mode,
            loss,
            transformer: None,
            recognizer: RecognizerSpec::resnet(10),
            schedule: OptimizerSchedule::default(),
            recognizer_schedule: OptimizerSchedule {
                lr0: 1e-3,
                epochs: 10,
                decay_epochs: vec![8, 10],
                ..Default::default()
            },
            dataset_root: PathBuf::from("data"),
            seeds: vec![0],
            deterministic: true,
            output_dir: PathBuf::from("results"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        fs::write(path, body + "\n")?;
        Ok(())
    }

    /// Stable hex digest of the canonical JSON encoding; stored in every
    /// artifact manifest for config -> artifact traceability.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::ConfigError(format!(
                "config schema version {} unsupported (expected {})",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        self.task.validate()?;
        self.loss.validate()?;
        self.processor.validate()?;
        self.recognizer.validate()?;
        if let Some(t) = &self.transformer {
            t.validate()?;
        }
        if self.processor.upscale as usize != self.task.input_scale() {
            return Err(Error::ConfigError(format!(
                "processor upscale {} does not match task {} (needs {})",
                self.processor.upscale,
                self.task.kind_name(),
                self.task.input_scale()
            )));
        }
        match (self.mode, self.loss.mode) {
            (TrainMode::RaUnsupervised, RecognitionLossMode::SupervisedCe) => {
                return Err(Error::ConfigError(
                    "ra_unsupervised requires loss.mode = unsupervised".into(),
                ))
            }
            (
                TrainMode::Ra | TrainMode::RecogOnly | TrainMode::JointFinetuneR,
                RecognitionLossMode::Unsupervised,
            ) => {
                return Err(Error::ConfigError(
                    "supervised modes require loss.mode = supervised_ce".into(),
                ))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::ConfigError("at least one seed required".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn roundtrip_and_hash_stability() {
        let dir = TempDir::new().unwrap();
        let cfg = ExperimentConfig::for_task(DegradationSpec::gaussian_noise(), TrainMode::Ra);
        let path = dir.path().join("cfg.json");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());

        let mut other = cfg.clone();
        other.loss.lambda = 0.5;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let dir = TempDir::new().unwrap();
        let cfg = ExperimentConfig::for_task(DegradationSpec::jpeg(), TrainMode::Plain);
        let mut value = serde_json::to_value(&cfg).unwrap();
        value["typo_field"] = serde_json::Value::from(1);
        let path = dir.path().join("bad.json");
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(
            ExperimentConfig::load(&path),
            Err(Error::ConfigError(_))
        ));
    }

    #[test]
    fn mismatched_upscale_rejected() {
        let mut cfg =
            ExperimentConfig::for_task(DegradationSpec::super_resolution(), TrainMode::Plain);
        assert_eq!(cfg.processor.upscale, 4);
        cfg.processor.upscale = 1;
        assert!(matches!(cfg.validate(), Err(Error::ConfigError(_))));
    }

    #[test]
    fn mode_loss_consistency() {
        let mut cfg =
            ExperimentConfig::for_task(DegradationSpec::jpeg(), TrainMode::RaUnsupervised);
        assert!(cfg.validate().is_ok());
        cfg.loss = RecognitionLossSpec::supervised(1.0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            ExperimentConfig::load(Path::new("/no/such/config.json")),
            Err(Error::NotFound(_))
        ));
    }
}
