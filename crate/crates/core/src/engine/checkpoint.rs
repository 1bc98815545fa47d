//! Versioned model checkpoints: architecture header plus flat parameter
//! vectors. JSON round-trips f64 exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, SplitModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub num_clients: usize,
    /// The shared client parameters; replicas are identical by invariant.
    pub client_params: Vec<f64>,
    pub server_params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &SplitModel) -> Result<Self> {
        if !model.replicas_identical() {
            return Err(Error::ClientDesync);
        }
        Ok(Self {
            version: CHECKPOINT_VERSION,
            architecture: model.architecture().clone(),
            num_clients: model.num_clients(),
            client_params: model.client_params(0).to_vec(),
            server_params: model.server_params().to_vec(),
        })
    }

    pub fn into_model(self) -> Result<SplitModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion(self.version));
        }
        SplitModel::from_parts(
            self.architecture,
            self.client_params,
            self.server_params,
            self.num_clients,
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}
