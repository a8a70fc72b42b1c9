use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::step::Trainer;
use crate::error::{Error, Result};
use crate::model::ModelPolicy;
use crate::params::ParamStore;
use crate::synthenv::{Dataset, DatasetStats};
use crate::tensor::AdamState;

const FORMAT: &str = "rscl-checkpoint-v1";

/// Everything needed to resume training or run the policy: the config as
/// key/value pairs, named parameters, optimizer moments and the dataset
/// statistics (which carry the view-map seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub config: Vec<(String, String)>,
    pub params: ParamStore,
    pub adam: AdamState,
    pub stats: DatasetStats,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            step: t.step,
            config: t.cfg.to_pairs(),
            params: t.params.clone(),
            adam: t.adam.clone(),
            stats: t.dataset.stats.clone(),
        }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.apply_overrides(self.config.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resumes with `dataset`, which must have the statistics recorded here.
    pub fn into_trainer(self, dataset: Dataset) -> Result<Trainer> {
        if dataset.stats != self.stats {
            return Err(Error::InvalidArgument(
                "dataset statistics differ from the ones recorded in the checkpoint".into(),
            ));
        }
        let cfg = self.config()?;
        Trainer::assemble(cfg, dataset, self.params, self.adam, self.step)
    }

    pub fn policy(&self) -> Result<ModelPolicy> {
        let cfg = self.config()?;
        Ok(ModelPolicy {
            params: self.params.clone(),
            dims: cfg.model_dims(),
            stats: self.stats.clone(),
            env: cfg.env_config(),
            denoise_steps: cfg.denoise_steps,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::format("checkpoint", e))?;
        let mut tmp: PathBuf = path.to_path_buf();
        tmp.set_extension("json.tmp");
        fs::write(&tmp, json + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&raw).map_err(|e| Error::format("checkpoint", e))?;
        if ck.format != FORMAT {
            return Err(Error::format("checkpoint", format!("unknown format `{}`", ck.format)));
        }
        Ok(ck)
    }
}
