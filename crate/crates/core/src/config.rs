//! The run configuration: one JSON document with a default for every field.
//! Unknown keys are rejected so that typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::AblationConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainConfig};
use crate::pipeline::PipelineConfig;
use crate::robustness::{DiagSpec, OodSpec, SelfRetrievalSpec};

/// IDX files used instead of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first `limit` training and test samples.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    /// When set, data comes from these files and `synthetic` is ignored.
    pub idx: Option<IdxSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root of the `data/`, `checkpoints/`, `triggers/`, `reports/` layout.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: "out".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for data generation, pretraining and every benchmark.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
    pub self_retrieval: SelfRetrievalSpec,
    pub diagnostics: DiagSpec,
    pub ood: OodSpec,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pipeline.trigger.validate()?;
        self.pipeline.finetune.validate()?;
        self.self_retrieval.validate()?;
        self.diagnostics.radius.validate()?;
        self.ablation.validate()?;
        if self.data.idx.is_none() {
            let s = &self.data.synthetic;
            s.validate()?;
            if s.extents() != self.model.input_extents || s.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "model expects {:?} inputs and {} classes but synthetic data has {:?} and {}",
                    self.model.input_extents,
                    self.model.num_classes,
                    s.extents(),
                    s.num_classes
                )));
            }
        }
        if self.ood.runs == 0 || self.diagnostics.k == 0 {
            return Err(Error::Config("ood runs and diagnostics k must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(self).expect("config serializes")
    }
}

/// SHA-256 of the compact JSON encoding, hex-encoded.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}
