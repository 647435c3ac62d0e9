//! Run configuration: a TOML file covering every pipeline knob plus paths,
//! the rectifier variant, and metric options. Unknown keys are rejected.

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::rectifier::RectifierTrainConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RectifierVariant {
    Identity,
    Oracle,
    Learned,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub rectifier: RectifierVariant,
    /// Checkpoint path of a trained net (learned variant); when absent a
    /// fresh identity-initialized net is used.
    pub rectifier_net: Option<PathBuf>,
    /// Inference-time bridge strength for the learned rectifier.
    pub lambda_res: f64,
    pub pipeline: PipelineConfig,
    pub rectifier_train: RectifierTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/out"),
            rectifier: RectifierVariant::Oracle,
            rectifier_net: None,
            lambda_res: 1.0,
            pipeline: PipelineConfig::default(),
            rectifier_train: RectifierTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            key: extract_toml_key(&e.to_string()),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Serialize with every default expanded, so re-running from the emitted
    /// file reproduces the run.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

fn extract_toml_key(message: &str) -> String {
    // toml errors mention the offending key in backticks
    if let (Some(start), Some(end)) = (message.find('`'), message.rfind('`')) {
        if end > start {
            return message[start + 1..end].to_string();
        }
    }
    "<config>".into()
}
