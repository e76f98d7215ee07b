//! Single-file JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::dataio::IdMap;
use crate::error::{Error, Result};
use crate::params::{NamedTensor, ParamStore};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Best validation NDCG@10 so far.
    pub best_metric: f64,
    pub catalog_size: usize,
    pub id_map: IdMap,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, params: &ParamStore, epoch: usize, best_metric: f64, id_map: &IdMap) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            epoch,
            best_metric,
            catalog_size: id_map.items.len(),
            id_map: id_map.clone(),
            tensors: params.to_named(),
        }
    }

    pub fn params(&self) -> Result<ParamStore> {
        ParamStore::from_named(&self.tensors).map_err(Error::Checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.format_version)));
        }
        ck.config.validate()?;
        Ok(ck)
    }
}
