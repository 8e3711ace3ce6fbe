use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EpochRecord, TrainConfig, TrainError};
use crate::actor::{ActorConfig, WorldModel};
use crate::encoders::HASH_SEED;
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "twm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed encoder settings, recorded so a reader can detect a mismatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderRecord {
    pub text_dim: usize,
    pub hash_seed: u64,
    pub time_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub seed: u64,
    /// Epochs completed; 0 for an untrained model.
    pub epochs: usize,
    pub train_config: Option<TrainConfig>,
    pub final_epoch: Option<EpochRecord>,
}

/// Self-describing model file: configuration, named parameter tensors as
/// nested arrays and training metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub actor: ActorConfig,
    pub encoders: EncoderRecord,
    pub parameters: BTreeMap<String, Value>,
    pub metadata: TrainingMetadata,
}

fn nest(shape: &[usize], data: &[f64]) -> Value {
    match shape {
        [] => Value::from(data[0]),
        [_] => Value::Array(data.iter().map(|&x| Value::from(x)).collect()),
        [n, rest @ ..] => {
            let stride = data.len() / n;
            Value::Array(data.chunks(stride).map(|c| nest(rest, c)).collect())
        }
    }
}

fn flatten(name: &str, v: &Value, depth: usize, shape: &mut Vec<usize>, out: &mut Vec<f64>) -> Result<(), TrainError> {
    match v {
        Value::Number(n) => {
            if depth != shape.len() {
                return Err(TrainError::Format(format!("{name}: ragged nesting")));
            }
            out.push(
                n.as_f64()
                    .ok_or_else(|| TrainError::Format(format!("{name}: number out of range")))?,
            );
        }
        Value::Array(items) => {
            if depth == shape.len() {
                if !out.is_empty() {
                    return Err(TrainError::Format(format!("{name}: ragged nesting")));
                }
                shape.push(items.len());
            } else if shape[depth] != items.len() {
                return Err(TrainError::Format(format!("{name}: ragged array at depth {depth}")));
            }
            for item in items {
                flatten(name, item, depth + 1, shape, out)?;
            }
        }
        _ => return Err(TrainError::Format(format!("{name}: expected numbers"))),
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_model(model: &WorldModel, metadata: TrainingMetadata) -> Self {
        let cfg = *model.config();
        let parameters = model
            .params()
            .iter()
            .map(|(_, name, t)| (name.to_string(), nest(t.shape(), t.data())))
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            actor: cfg,
            encoders: EncoderRecord {
                text_dim: cfg.text_dim,
                hash_seed: HASH_SEED,
                time_dim: cfg.time_dim,
            },
            parameters,
            metadata,
        }
    }

    pub fn to_model(&self) -> Result<WorldModel, TrainError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(TrainError::Format(format!("unknown format {:?}", self.format)));
        }
        if self.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: self.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let expected = EncoderRecord {
            text_dim: self.actor.text_dim,
            hash_seed: HASH_SEED,
            time_dim: self.actor.time_dim,
        };
        if self.encoders != expected {
            return Err(TrainError::Format(format!(
                "encoder settings {:?} do not match {:?}",
                self.encoders, expected
            )));
        }
        let tensors = self
            .parameters
            .iter()
            .map(|(name, v)| {
                let (mut shape, mut data) = (vec![], vec![]);
                flatten(name, v, 0, &mut shape, &mut data)?;
                Ok((name.clone(), Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(WorldModel::from_named_tensors(self.actor, tensors)?)
    }

    /// Deterministic JSON text (sorted parameter names, shortest round-trip
    /// float formatting).
    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and checks the format tag and version before the body.
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let raw: Value = serde_json::from_str(text)?;
        match raw.get("format").and_then(Value::as_str) {
            Some(CHECKPOINT_FORMAT) => {}
            other => return Err(TrainError::Format(format!("unknown format {other:?}"))),
        }
        let found = raw
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| TrainError::Format("missing format_version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(TrainError::Version {
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
