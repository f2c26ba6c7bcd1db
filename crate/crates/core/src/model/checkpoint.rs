//! Versioned JSON checkpoints: the architecture plus every parameter tensor as
//! shape and flat values. Floats round-trip exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, ParamGroup};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub groups: Vec<ParamGroup>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            groups: model.groups().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        Model::from_parts(self.spec, self.groups)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, Checkpoint::from_model(self).to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Checkpoint::from_json(&fs::read_to_string(path)?)?.into_model()
    }
}
