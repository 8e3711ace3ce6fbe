use std::path::Path;

use sha2::{Digest, Sha256};
use twm_core::actor::WorldModel;
use twm_core::encoders::ActionSpace;
use twm_core::policy::ConstraintSet;
use twm_core::training::Checkpoint;

use crate::{Limits, ServiceConfig, ServiceError};

/// Immutable snapshot shared by every request handler.
#[derive(Debug)]
pub struct ServiceState {
    pub model: WorldModel,
    /// Hex SHA-256 of the checkpoint file bytes.
    pub checkpoint_hash: String,
    pub checkpoint_version: u32,
    pub constraints: ConstraintSet,
    pub space: ActionSpace,
    pub limits: Limits,
}

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, ServiceError> {
    std::fs::read(path).map_err(|source| ServiceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a JSON constraint table.
pub fn load_constraints(path: &Path) -> Result<ConstraintSet, ServiceError> {
    let bytes = read_file(path)?;
    let set: ConstraintSet = serde_json::from_slice(&bytes).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
    set.validate()?;
    Ok(set)
}

impl ServiceState {
    /// Builds the snapshot from checkpoint bytes; the hash covers exactly
    /// these bytes.
    pub fn from_checkpoint_bytes(bytes: &[u8], constraints: ConstraintSet, limits: Limits) -> Result<Self, ServiceError> {
        let text = std::str::from_utf8(bytes).map_err(|e| ServiceError::Config(format!("checkpoint is not UTF-8: {e}")))?;
        let checkpoint = Checkpoint::from_json(text)?;
        let model = checkpoint.to_model()?;
        constraints.validate()?;
        Ok(ServiceState {
            model,
            checkpoint_hash: content_hash(bytes),
            checkpoint_version: checkpoint.format_version,
            constraints,
            space: ActionSpace::full(),
            limits,
        })
    }

    /// Loads everything named by `config`; any failure aborts startup.
    pub fn load(config: &ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        let bytes = read_file(&config.checkpoint)?;
        let constraints = match &config.constraints {
            Some(p) => load_constraints(p)?,
            None => ConstraintSet::default(),
        };
        Self::from_checkpoint_bytes(&bytes, constraints, config.limits).map_err(|e| match e {
            ServiceError::Train(source) => ServiceError::CheckpointFile {
                path: config.checkpoint.clone(),
                source,
            },
            other => other,
        })
    }
}
