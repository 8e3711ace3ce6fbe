//! Treatment-conditioned latent predictor, two-way cross-attention survival
//! head and the composed action scorer.

mod blocks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{
    embed_action, encode_time, ClinicalMlp, ClinicalProfile, EncodeError, HashEmbedder, TemporalConfig,
    TextEmbedder, TherapyAction,
};
use crate::numerics::{normal_tensor, sigmoid, Graph, Linear, NumericsError, ParamId, ParamStore, Tensor, Var};
use blocks::Block;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActorError {
    #[error("invalid actor configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorConfig {
    /// Self-attention layers of the latent predictor.
    pub predictor_depth: usize,
    /// Cross-attention layers per survival branch.
    pub survival_depth: usize,
    pub latent_tokens: usize,
    pub width: usize,
    /// Width of the text embeddings (action and profile).
    pub text_dim: usize,
    pub clinical_dim: usize,
    pub time_dim: usize,
}

impl Default for ActorConfig {
    fn default() -> Self {
        ActorConfig {
            predictor_depth: 4,
            survival_depth: 4,
            latent_tokens: 4,
            width: 16,
            text_dim: 64,
            clinical_dim: 64,
            time_dim: 64,
        }
    }
}

impl ActorConfig {
    pub fn validate(&self) -> Result<(), ActorError> {
        let fields = [
            ("predictor_depth", self.predictor_depth),
            ("survival_depth", self.survival_depth),
            ("latent_tokens", self.latent_tokens),
            ("width", self.width),
            ("text_dim", self.text_dim),
            ("clinical_dim", self.clinical_dim),
            ("time_dim", self.time_dim),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ActorError::Config(format!("{name} must be positive")));
        }
        TemporalConfig::new(self.time_dim)?;
        Ok(())
    }
}

/// A patient's disease state as `latent_tokens × width` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatent", into = "RawLatent")]
pub struct LatentState {
    tokens: Tensor,
    timestamp: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLatent {
    tokens: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamp: Option<f64>,
}

impl TryFrom<RawLatent> for LatentState {
    type Error = ActorError;
    fn try_from(raw: RawLatent) -> Result<Self, ActorError> {
        LatentState::from_rows(&raw.tokens, raw.timestamp)
    }
}

impl From<LatentState> for RawLatent {
    fn from(z: LatentState) -> Self {
        RawLatent {
            tokens: z.tokens.to_rows(),
            timestamp: z.timestamp,
        }
    }
}

impl LatentState {
    pub fn new(tokens: Tensor, timestamp: Option<f64>) -> Result<Self, ActorError> {
        if tokens.shape().len() != 2 {
            return Err(ActorError::Shape(format!(
                "latent tokens must be a matrix, got shape {:?}",
                tokens.shape()
            )));
        }
        if let Some(t) = timestamp {
            if !t.is_finite() {
                return Err(ActorError::Shape("latent timestamp must be finite".into()));
            }
        }
        Ok(LatentState { tokens, timestamp })
    }

    pub fn from_rows(rows: &[Vec<f64>], timestamp: Option<f64>) -> Result<Self, ActorError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(ActorError::Shape("latent needs at least one token of positive width".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != rows[0].len()) {
            return Err(ActorError::Shape(format!(
                "latent token {i} has width {}, expected {}",
                rows[i].len(),
                rows[0].len()
            )));
        }
        Self::new(Tensor::from_rows(rows)?, timestamp)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.timestamp
    }

    pub fn with_timestamp(mut self, t: Option<f64>) -> Self {
        self.timestamp = t;
        self
    }

    pub fn check(&self, cfg: &ActorConfig) -> Result<(), ActorError> {
        let want = [cfg.latent_tokens, cfg.width];
        if self.tokens.shape() != want {
            return Err(ActorError::Shape(format!(
                "latent has shape {:?}, model expects {:?}",
                self.tokens.shape(),
                want
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalOutput {
    /// Predicted probability of death within one year.
    pub p_1y: f64,
    /// Unbounded risk score; higher means worse.
    pub r: f64,
}

/// Fixed (parameter-free) conditioning inputs of one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Profile text embedding, `1 × text_dim`.
    pub profile_text: Tensor,
    /// Time embedding, `1 × time_dim`.
    pub time: Tensor,
    /// Drug embedding, `1 × text_dim`.
    pub drug: Tensor,
}

#[derive(Clone, Debug)]
struct Predictor {
    positions: ParamId,
    clinical: ClinicalMlp,
    clinical_in: Linear,
    time_in: Linear,
    drug_in: Linear,
    blocks: Vec<Block>,
    readout: Linear,
}

#[derive(Clone, Debug)]
struct SurvivalHead {
    pre_queries: Vec<Block>,
    post_queries: Vec<Block>,
    hidden: Linear,
    out: Linear,
}

/// The learned world model: parameters, architecture and the fixed encoders.
#[derive(Clone, Debug)]
pub struct WorldModel {
    config: ActorConfig,
    store: ParamStore,
    predictor: Predictor,
    survival: SurvivalHead,
    embedder: HashEmbedder,
}

impl WorldModel {
    /// Randomly initialised model; identical seeds give identical parameters.
    pub fn new(config: ActorConfig, seed: u64) -> Result<Self, ActorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let w = config.width;
        let residual_gain = 0.5 / (config.predictor_depth as f64).sqrt();

        let positions = s.add("predictor.positions", normal_tensor(rng, &[config.latent_tokens, w], 0.5)?)?;
        let clinical = ClinicalMlp::register(s, "clinical", config.text_dim, config.text_dim, config.clinical_dim, rng)?;
        let clinical_in = Linear::register(s, "predictor.clinical_in", config.clinical_dim, w, 1.0, rng)?;
        let time_in = Linear::register(s, "predictor.time_in", config.time_dim, w, 1.0, rng)?;
        let drug_in = Linear::register(s, "predictor.drug_in", config.text_dim, w, 1.0, rng)?;
        let blocks = (0..config.predictor_depth)
            .map(|i| Block::register(s, &format!("predictor.block{i}"), w, false, residual_gain, rng))
            .collect::<Result<Vec<_>, _>>()?;
        let readout = Linear::register(s, "predictor.readout", w, w, 0.0, rng)?;
        let predictor = Predictor {
            positions,
            clinical,
            clinical_in,
            time_in,
            drug_in,
            blocks,
            readout,
        };

        let survival_gain = 0.5 / (config.survival_depth as f64).sqrt();
        let mut branch = |name: &str, s: &mut ParamStore| {
            (0..config.survival_depth)
                .map(|i| Block::register(s, &format!("survival.{name}.block{i}"), w, true, survival_gain, rng))
                .collect::<Result<Vec<_>, _>>()
        };
        let pre_queries = branch("pre_queries", s)?;
        let post_queries = branch("post_queries", s)?;
        let hidden = Linear::register(s, "survival.head.hidden", w, w, 1.0, rng)?;
        let out = Linear::register(s, "survival.head.out", w, 2, 1.0, rng)?;
        let survival = SurvivalHead {
            pre_queries,
            post_queries,
            hidden,
            out,
        };
        Ok(WorldModel {
            config,
            store,
            predictor,
            survival,
            embedder: HashEmbedder::new(config.text_dim)?,
        })
    }

    /// Model with every parameter set to zero.
    pub fn zeroed(config: ActorConfig) -> Result<Self, ActorError> {
        let mut m = Self::new(config, 0)?;
        let ids: Vec<(ParamId, Vec<usize>)> = m.store.iter().map(|(id, _, t)| (id, t.shape().to_vec())).collect();
        for (id, shape) in ids {
            m.store.set(id, Tensor::zeros(&shape)?)?;
        }
        Ok(m)
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// architecture of `config` exactly.
    pub fn from_named_tensors(
        config: ActorConfig,
        tensors: impl IntoIterator<Item = (String, Tensor)>,
    ) -> Result<Self, ActorError> {
        let mut m = Self::new(config, 0)?;
        let mut seen = vec![false; m.store.len()];
        for (name, t) in tensors {
            let id = m
                .store
                .id(&name)
                .ok_or_else(|| ActorError::Config(format!("unexpected parameter {name}")))?;
            m.store.set(id, t)?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ActorError::Config(format!(
                "missing parameter {}",
                m.store.name(ParamId(i))
            )));
        }
        Ok(m)
    }

    pub fn config(&self) -> &ActorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedder(&self) -> &HashEmbedder {
        &self.embedder
    }

    pub fn temporal(&self) -> TemporalConfig {
        TemporalConfig { dim: self.config.time_dim }
    }

    pub fn conditioning(
        &self,
        profile: &ClinicalProfile,
        dt: f64,
        action: &TherapyAction,
    ) -> Result<Conditioning, ActorError> {
        Ok(Conditioning {
            profile_text: self.profile_text(profile)?,
            time: self.time_row(dt)?,
            drug: self.drug_row(action)?,
        })
    }

    pub fn profile_text(&self, profile: &ClinicalProfile) -> Result<Tensor, ActorError> {
        profile.validate()?;
        let u = self.embedder.embed(&profile.canonical_text())?;
        Ok(Tensor::matrix(1, u.len(), u)?)
    }

    pub fn time_row(&self, dt: f64) -> Result<Tensor, ActorError> {
        Ok(encode_time(dt, self.temporal())?.reshape(vec![1, self.config.time_dim])?)
    }

    pub fn drug_row(&self, action: &TherapyAction) -> Result<Tensor, ActorError> {
        Ok(embed_action(action, &self.embedder)?.reshape(vec![1, self.config.text_dim])?)
    }

    /// Clinical embedding of a profile under the current parameters.
    pub fn embed_clinical(&self, profile: &ClinicalProfile) -> Result<Tensor, ActorError> {
        Ok(crate::encoders::embed_clinical(
            profile,
            &self.embedder,
            &self.predictor.clinical,
            &self.store,
        )?)
    }

    /// Records the predictor on `g`: `[L latent ∥ clinical ∥ time ∥ drug]`
    /// tokens through the self-attention stack, read out at the latent
    /// positions and added to `z_pre`.
    pub fn predict_post_on(&self, g: &mut Graph<'_>, z_pre: Var, cond: &Conditioning) -> Result<Var, ActorError> {
        let p = &self.predictor;
        let l = self.config.latent_tokens;
        let pos = g.p(p.positions);
        let latent = g.add(z_pre, pos)?;
        let u = g.constant(cond.profile_text.clone());
        let h_clin = p.clinical.forward(g, u)?;
        let clin = p.clinical_in.forward(g, h_clin)?;
        let t = g.constant(cond.time.clone());
        let time = p.time_in.forward(g, t)?;
        let d = g.constant(cond.drug.clone());
        let drug = p.drug_in.forward(g, d)?;
        let mut x = g.concat_rows(&[latent, clin, time, drug])?;
        for block in &p.blocks {
            x = block.forward(g, x, None)?;
        }
        let head = g.slice_rows(x, 0, l)?;
        let delta = p.readout.forward(g, head)?;
        Ok(g.add(z_pre, delta)?)
    }

    /// Records the survival head; returns `(logit_1y, r)` scalars.
    pub fn predict_survival_on(&self, g: &mut Graph<'_>, z_pre: Var, z_post: Var) -> Result<(Var, Var), ActorError> {
        let s = &self.survival;
        let mut a = z_pre;
        for block in &s.pre_queries {
            a = block.forward(g, a, Some(z_post))?;
        }
        let mut b = z_post;
        for block in &s.post_queries {
            b = block.forward(g, b, Some(z_pre))?;
        }
        let pa = g.mean_rows(a)?;
        let pb = g.mean_rows(b)?;
        let pooled = g.add(pa, pb)?;
        let h = s.hidden.forward(g, pooled)?;
        let h = g.gelu(h)?;
        let out = s.out.forward(g, h)?;
        Ok((g.select(out, 0)?, g.select(out, 1)?))
    }

    pub fn predict_post(&self, z_pre: &LatentState, cond: &Conditioning) -> Result<LatentState, ActorError> {
        z_pre.check(&self.config)?;
        let mut g = Graph::new(&self.store);
        let z = g.constant(z_pre.tokens.clone());
        let out = self.predict_post_on(&mut g, z, cond)?;
        LatentState::new(g.value(out)?.clone(), None)
    }

    pub fn predict_survival(&self, z_pre: &LatentState, z_post: &LatentState) -> Result<SurvivalOutput, ActorError> {
        z_pre.check(&self.config)?;
        z_post.check(&self.config)?;
        let mut g = Graph::new(&self.store);
        let a = g.constant(z_pre.tokens.clone());
        let b = g.constant(z_post.tokens.clone());
        let (logit, r) = self.predict_survival_on(&mut g, a, b)?;
        Ok(SurvivalOutput {
            p_1y: sigmoid(g.scalar(logit)?),
            r: g.scalar(r)?,
        })
    }

    /// Predicted post-treatment latent and survival output of one transition.
    pub fn transition(
        &self,
        z_pre: &LatentState,
        cond: &Conditioning,
    ) -> Result<(LatentState, SurvivalOutput), ActorError> {
        let post = self.predict_post(z_pre, cond)?;
        let out = self.predict_survival(z_pre, &post)?;
        Ok((post, out))
    }

    /// Survival output of applying `action` to `z_pre` for `dt` days.
    pub fn score_action(
        &self,
        z_pre: &LatentState,
        profile: &ClinicalProfile,
        dt: f64,
        action: &TherapyAction,
    ) -> Result<SurvivalOutput, ActorError> {
        let cond = self.conditioning(profile, dt, action)?;
        Ok(self.transition(z_pre, &cond)?.1)
    }
}

#[cfg(test)]
mod tests;
