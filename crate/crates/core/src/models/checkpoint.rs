use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::{ParamStore, Tensor};
use crate::data::IdMaps;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Everything needed to rebuild a trained model and score new data with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub scalar: String,
    pub config: ModelConfig,
    pub num_questions: usize,
    pub num_kcs: usize,
    pub window_questions: usize,
    pub ids: IdMaps,
    pub params: Vec<SavedTensor>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, window_questions: usize, ids: IdMaps) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(_, name, t)| SavedTensor {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
                data: t.data.iter().map(|x| x.to_f64_lossy()).collect(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            scalar: T::NAME.to_string(),
            config: model.config().clone(),
            num_questions: model.num_questions(),
            num_kcs: model.num_kcs(),
            window_questions,
            ids,
            params,
        }
    }

    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut store = ParamStore::new();
        for p in &self.params {
            if p.data.len() != p.rows * p.cols {
                return Err(Error::Validation(format!("parameter {} has {} values for {}x{}", p.name, p.data.len(), p.rows, p.cols)));
            }
            store.insert(p.name.clone(), Tensor::from_vec(p.rows, p.cols, p.data.iter().map(|&x| T::lit(x)).collect()));
        }
        Model::from_params(self.config.clone(), self.num_questions, self.num_kcs, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
