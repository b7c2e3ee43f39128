//! Experiment configuration files (TOML, one table per section).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::{self, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::profile::EnergyModel;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Directory holding the CIFAR-10 binary batches.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub eval_samples_per_class: usize,
    pub noise: f32,
    /// Side length images are presented at.
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        DataConfig {
            kind: DataKind::Synthetic,
            path: None,
            seed: 0,
            num_classes: s.num_classes,
            samples_per_class: s.samples_per_class,
            eval_samples_per_class: 20,
            noise: s.noise,
            image_size: s.image_size,
        }
    }
}

impl DataConfig {
    fn synthetic(&self, per_class: usize) -> SyntheticConfig {
        SyntheticConfig {
            num_classes: self.num_classes,
            samples_per_class: per_class,
            image_size: self.image_size,
            noise: self.noise,
        }
    }

    /// `(train, eval)` splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.kind {
            DataKind::Synthetic => Ok((
                data::synthetic(&self.synthetic(self.samples_per_class), self.seed, "train")?,
                data::synthetic(
                    &self.synthetic(self.eval_samples_per_class),
                    self.seed,
                    "eval",
                )?,
            )),
            DataKind::Cifar10 => {
                let dir = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::config("data.path", "required for cifar10"))?;
                data::load_cifar10(dir, self.image_size)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub profile: EnergyModel,
    pub data: DataConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.t_max)?;
        self.profile.validate()?;
        let d = &self.data;
        if d.kind == DataKind::Synthetic {
            if d.num_classes != self.model.num_classes {
                return Err(Error::config(
                    "data.num_classes",
                    "must equal model.num_classes",
                ));
            }
            if self.model.channels != 1 {
                return Err(Error::config(
                    "model.channels",
                    "synthetic data has one channel",
                ));
            }
            if d.eval_samples_per_class == 0 {
                return Err(Error::config(
                    "data.eval_samples_per_class",
                    "must be positive",
                ));
            }
        } else if self.model.channels != 3 || self.model.num_classes != 10 {
            return Err(Error::config(
                "model.channels",
                "cifar10 needs channels = 3 and num_classes = 10",
            ));
        }
        if d.image_size != self.model.image_size {
            return Err(Error::config(
                "data.image_size",
                "must equal model.image_size",
            ));
        }
        Ok(())
    }
}
