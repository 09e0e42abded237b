//! JSON weight archives keyed by parameter name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| {
                let (r, c) = p.value.dim();
                (
                    p.name.clone(),
                    Tensor {
                        shape: [r, c],
                        data: p.value.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Self {
            fingerprint: model.fingerprint(),
            config: model.cfg.clone(),
            params,
        }
    }

    /// Copies every stored weight into `model`, refusing a checkpoint built
    /// for a different architecture.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let expected = model.fingerprint();
        if self.fingerprint != expected {
            return Err(Error::Fingerprint {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter '{name}'")))?;
            let value = Mat::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
                .map_err(|e| Error::Shape(format!("parameter '{name}': {e}")))?;
            if value.dim() != model.store.value(id).dim() {
                return Err(Error::Shape(format!(
                    "parameter '{name}' is {:?} in the checkpoint, {:?} in the model",
                    value.dim(),
                    model.store.value(id).dim()
                )));
            }
            *model.store.value_mut(id) = value;
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored config.
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::new(&self.config)?;
        self.apply(&mut model)?;
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, &e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, &e))
    }
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).write(path)
}

pub fn load(path: &Path) -> Result<Model> {
    Checkpoint::read(path)?.into_model()
}
