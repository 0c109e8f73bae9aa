use std::path::{Path, PathBuf};

use aal_core::train::EvalConfig;
use aal_core::{SmallCnnConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "AAL_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the raw files; falls back to `$AAL_DATA_DIR`.
    pub root: Option<PathBuf>,
    /// Class-balanced subset sizes, per class. `None` keeps the whole split.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; 3],
    pub attention_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = SmallCnnConfig::default();
        Self {
            widths: d.widths,
            attention_kernel: d.attention_kernel,
        }
    }
}

/// One experiment, as read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for attack in [&self.eval.fgsm, &self.eval.pgd] {
            attack.validate().map_err(|e| CliError::Config(format!("eval: {e}")))?;
        }
        if self.eval.batch_size == 0 {
            return Err(CliError::Config("eval.batch_size must be >= 1".into()));
        }
        if self.model.widths.contains(&0) {
            return Err(CliError::Config("model.widths must all be >= 1".into()));
        }
        if self.model.attention_kernel.is_multiple_of(2) {
            return Err(CliError::Config("model.attention_kernel must be odd".into()));
        }
        for (name, k) in [
            ("train_per_class", self.dataset.train_per_class),
            ("test_per_class", self.dataset.test_per_class),
        ] {
            if k == Some(0) {
                return Err(CliError::Config(format!("dataset.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Dataset root from the config, else from the environment.
    pub fn data_root(&self) -> Result<PathBuf, CliError> {
        if let Some(root) = &self.dataset.root {
            return Ok(root.clone());
        }
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            CliError::Config(format!("no dataset root: set dataset.root or {DATA_DIR_ENV}"))
        })
    }

    /// Config with every default spelled out, including the resolved data root.
    pub fn effective(&self) -> Result<Self, CliError> {
        let mut out = self.clone();
        out.dataset.root = Some(self.data_root()?);
        Ok(out)
    }

    pub fn model_config(&self, in_channels: usize, image_size: usize, num_classes: usize) -> SmallCnnConfig {
        SmallCnnConfig {
            num_classes,
            in_channels,
            image_size,
            widths: self.model.widths,
            attention_kernel: self.model.attention_kernel,
        }
    }
}
