//! Experiment configuration: one JSON document wiring a task, dataset,
//! forward operator and the model/training/inference settings. Unknown
//! keys are rejected so configs cannot silently drift.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dawnfm::data::DuathlonPrior;
use dawnfm::error::{DawnError, Result};
use dawnfm::inference::InferenceConfig;
use dawnfm::model::{ModelConfig, ModelVariant};
use dawnfm::operators::{GaussianBlurOperator, LinearOperator, RadonOperator, SumOperator};
use dawnfm::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Deblur,
    Tomo,
    Duathlon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    SyntheticPhantoms {
        side: usize,
        train_count: usize,
        test_count: usize,
        max_ellipses: usize,
        seed: u64,
    },
    DuathlonPrior {
        #[serde(default)]
        prior: DuathlonPrior,
        train_count: usize,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        /// Optional cap on the number of images taken from the file.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum OperatorConfig {
    Blur { side: usize, sigma_x: f64, sigma_y: f64 },
    Radon { side: usize, n_angles: usize },
    Sum,
}

impl OperatorConfig {
    pub fn build(&self) -> Result<Box<dyn LinearOperator>> {
        Ok(match self {
            Self::Blur {
                side,
                sigma_x,
                sigma_y,
            } => Box::new(GaussianBlurOperator::new(*side, *sigma_x, *sigma_y)?),
            Self::Radon { side, n_angles } => Box::new(RadonOperator::new(*side, *n_angles)?),
            Self::Sum => Box::new(SumOperator::new()),
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| {
            DawnError::Config(format!("{}: {e}", path.as_ref().display()))
        })
    }

    fn side(&self) -> Option<usize> {
        match self {
            Self::Blur { side, .. } | Self::Radon { side, .. } => Some(*side),
            Self::Sum => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub dataset: DatasetConfig,
    pub operator: OperatorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| DawnError::Config(format!("{}: {e}", path.as_ref().display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        let dataset_side = match &self.dataset {
            DatasetConfig::SyntheticPhantoms { side, .. } => Some(*side),
            DatasetConfig::DuathlonPrior { prior, .. } => {
                prior.validate()?;
                None
            }
            DatasetConfig::Idx { images, .. } => {
                if !images.is_file() {
                    return Err(DawnError::Config(format!(
                        "idx dataset path {} does not exist",
                        images.display()
                    )));
                }
                None
            }
        };
        if let (Some(ds), Some(os)) = (dataset_side, self.operator.side()) {
            if ds != os {
                return Err(DawnError::Config(format!(
                    "dataset side {ds} does not match operator side {os}"
                )));
            }
        }
        match self.task {
            Task::Duathlon => {
                if !matches!(self.operator, OperatorConfig::Sum)
                    || !matches!(self.model.variant, ModelVariant::Mlp)
                {
                    return Err(DawnError::Config(
                        "duathlon task needs the sum operator and the mlp model".into(),
                    ));
                }
            }
            Task::Deblur => {
                if !matches!(self.operator, OperatorConfig::Blur { .. }) {
                    return Err(DawnError::Config("deblur task needs the blur operator".into()));
                }
            }
            Task::Tomo => {
                if !matches!(self.operator, OperatorConfig::Radon { .. }) {
                    return Err(DawnError::Config("tomo task needs the radon operator".into()));
                }
            }
        }
        if let Some(os) = self.operator.side() {
            if self.model.variant == ModelVariant::Unet
                && self.model.input_shape[1..] != [os, os]
            {
                return Err(DawnError::Config(format!(
                    "model input shape {:?} does not match operator side {os}",
                    self.model.input_shape
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_deblur_config() -> ExperimentConfig {
        ExperimentConfig {
            task: Task::Deblur,
            dataset: DatasetConfig::SyntheticPhantoms {
                side: 16,
                train_count: 8,
                test_count: 4,
                max_ellipses: 4,
                seed: 5,
            },
            operator: OperatorConfig::Blur {
                side: 16,
                sigma_x: 3.0,
                sigma_y: 3.0,
            },
            model: ModelConfig::unet_for_side(1, 16, true),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            output_dir: None,
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = small_deblur_config();
        let json = cfg.to_json();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let again: ExperimentConfig = serde_json::from_str(&back.to_json()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value: serde_json::Value = serde_json::from_str(&small_deblur_config().to_json()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("typo_field".into(), serde_json::json!(1));
        let parsed: std::result::Result<ExperimentConfig, _> =
            serde_json::from_value(value);
        assert!(parsed.is_err());
    }

    #[test]
    fn cross_field_validation() {
        let mut cfg = small_deblur_config();
        cfg.operator = OperatorConfig::Blur {
            side: 8,
            sigma_x: 3.0,
            sigma_y: 3.0,
        };
        assert!(cfg.validate().is_err());

        let mut cfg2 = small_deblur_config();
        cfg2.task = Task::Duathlon;
        assert!(cfg2.validate().is_err());
    }
}
