//! Conditioning embeddings: elapsed time, clinical profile and therapy action.

pub mod action;
mod clinical;
mod profile;
mod temporal;
mod text;

use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub use action::{
    ActionSpace, AddAgent, Agent, Chemo, ChemoAgent, ImmunoAgent, Radio, RadioKind, TherapyAction,
    CYCLES, DOSE_LEVELS, INTERVAL_GRID,
};
pub use clinical::ClinicalMlp;
pub use profile::{ClinicalProfile, Sex, BIOMARKERS};
pub use temporal::{encode_time, TemporalConfig};
pub use text::{HashEmbedder, TextEmbedder, HASH_SEED};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("invalid action: {}", .0.join("; "))]
    InvalidAction(Vec<String>),
    #[error("invalid profile: {}", .0.join("; "))]
    InvalidProfile(Vec<String>),
    #[error("cannot parse canonical action: {0}")]
    Parse(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Unit-norm drug embedding: the canonical action text embedded per token,
/// mean-pooled and renormalised.
pub fn embed_action(action: &TherapyAction, emb: &dyn TextEmbedder) -> Result<Tensor, EncodeError> {
    action.validate()?;
    Ok(Tensor::vector(emb.embed(&action.canonical_text())?)?)
}

/// Clinical embedding `MLP(embed(canonical profile text))`.
pub fn embed_clinical(
    profile: &ClinicalProfile,
    emb: &dyn TextEmbedder,
    mlp: &ClinicalMlp,
    store: &crate::numerics::ParamStore,
) -> Result<Tensor, EncodeError> {
    profile.validate()?;
    let u = emb.embed(&profile.canonical_text())?;
    let mut g = crate::numerics::Graph::new(store);
    let x = g.constant(Tensor::matrix(1, u.len(), u)?);
    let out = mlp.forward(&mut g, x)?;
    let t = g.value(out)?;
    Ok(t.reshape(vec![t.numel()])?)
}
