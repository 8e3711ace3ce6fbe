//! Joint optimisation of the latent predictor and survival head, patient
//! level splits and checkpoints.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorConfig, ActorError, Conditioning, WorldModel};
use crate::losses::{self, LossComponents, LossError, LossWeights};
use crate::metrics::{c_index, MetricsError};
use crate::numerics::{sigmoid, Graph, NumericsError, Tensor, Var};
use crate::synthcohort::{Cohort, VisitPair};

pub use checkpoint::{Checkpoint, TrainingMetadata, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{adaptive_step, AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("cannot split cohort: {0}")]
    Split(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss in epoch {epoch}, batch {batch}: {source}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        #[source]
        source: LossError,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Seeds initialisation, the split and batch shuffling.
    pub seed: u64,
    /// Fraction of patients on the training side.
    pub train_fraction: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            train_fraction: 0.8,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(TrainError::Config(format!(
                "train fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        self.adam().validate()?;
        self.weights.validate()?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

/// Patient indices (into `Cohort::patients`) on each side of a split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl PatientSplit {
    pub fn train_ids(&self, cohort: &Cohort) -> Vec<String> {
        self.train.iter().map(|&i| cohort.patients[i].id.clone()).collect()
    }

    pub fn validation_ids(&self, cohort: &Cohort) -> Vec<String> {
        self.validation.iter().map(|&i| cohort.patients[i].id.clone()).collect()
    }
}

/// Shuffles patients under `seed` and puts `round(n · train_fraction)` of
/// them on the training side; each side keeps cohort order.
pub fn split_patients(cohort: &Cohort, train_fraction: f64, seed: u64) -> Result<PatientSplit, TrainError> {
    let n = cohort.patients.len();
    if n < 5 {
        return Err(TrainError::Split(format!("need at least 5 patients, got {n}")));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(TrainError::Split(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    Ok(PatientSplit { train, validation })
}

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

/// A visit pair with its conditioning precomputed.
struct Prepared {
    z_pre: Tensor,
    z_post: Tensor,
    cond: Conditioning,
    time: f64,
    event: bool,
    one_year: Option<bool>,
}

fn prepare(model: &WorldModel, pairs: &[VisitPair]) -> Result<Vec<Prepared>, TrainError> {
    pairs
        .iter()
        .map(|p| {
            Ok(Prepared {
                z_pre: p.z_pre.tokens().clone(),
                z_post: p.z_post.tokens().clone(),
                cond: model.conditioning(&p.profile, p.dt, &p.action)?,
                time: p.time,
                event: p.event,
                one_year: p.one_year,
            })
        })
        .collect()
}

/// Records the weighted objective of one minibatch. The survival head reads
/// the predicted post latent with its gradient stopped, so the predictor is
/// supervised by the latent and contrastive terms only.
fn batch_objective(
    model: &WorldModel,
    g: &mut Graph<'_>,
    items: &[&Prepared],
    weights: &LossWeights,
) -> Result<(Var, LossComponents, bool), TrainError> {
    let cfg = model.config();
    let flat = cfg.latent_tokens * cfg.width;
    let (mut hats, mut targets, mut flats, mut drugs, mut logits, mut risks) =
        (vec![], vec![], vec![], vec![], vec![], vec![]);
    for item in items {
        let z_pre = g.constant(item.z_pre.clone());
        let z_hat = model.predict_post_on(g, z_pre, &item.cond)?;
        let frozen = g.value(z_hat)?.clone();
        let detached = g.constant(frozen);
        let (logit, r) = model.predict_survival_on(g, z_pre, detached)?;
        targets.push(g.constant(item.z_post.clone()));
        flats.push(g.reshape(z_hat, vec![1, flat])?);
        drugs.push(g.constant(item.cond.drug.clone()));
        hats.push(z_hat);
        logits.push(g.reshape(logit, vec![1, 1])?);
        risks.push(g.reshape(r, vec![1, 1])?);
    }
    let z_hat = g.concat_rows(&hats)?;
    let z = g.concat_rows(&targets)?;
    let latent = losses::latent_l1(g, z_hat, z)?;
    let z_flat = g.concat_rows(&flats)?;
    let us = g.concat_rows(&drugs)?;
    let contrastive = losses::soft_contrastive(g, z_flat, us, weights.tau1, weights.tau2)?;
    let logit = g.concat_rows(&logits)?;
    let p = g.sigmoid(logit)?;
    let labels: Vec<Option<bool>> = items.iter().map(|i| i.one_year).collect();
    let brier = losses::brier(g, p, &labels)?;
    let r = g.concat_rows(&risks)?;
    let times: Vec<f64> = items.iter().map(|i| i.time).collect();
    let events: Vec<bool> = items.iter().map(|i| i.event).collect();
    let cox = losses::cox_partial(g, r, &times, &events)?;

    let mut components = LossComponents {
        latent: g.scalar(latent)?,
        contrastive: g.scalar(contrastive)?,
        ..LossComponents::default()
    };
    let scaled = g.scale(latent, weights.lambda1)?;
    let mut total = g.add(scaled, contrastive)?;
    if let Some(b) = brier {
        components.brier = g.scalar(b)?;
        let b = g.scale(b, weights.lambda2)?;
        total = g.add(total, b)?;
    }
    if let Some(c) = cox {
        components.cox = g.scalar(c)?;
        total = g.add(total, c)?;
    }
    Ok((total, components, cox.is_some()))
}

/// Mean loss components over one epoch of minibatches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossComponents,
    pub train_total: f64,
    /// Minibatches whose Cox term was skipped for lack of events.
    pub skipped_cox: usize,
    pub validation: Option<EvalSummary>,
}

/// Held-out quality of a model on a set of visit pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub pairs: usize,
    pub latent_l1: f64,
    /// Over pairs with a defined one-year label; `None` if there are none.
    pub brier: Option<f64>,
    /// `None` when no pair is comparable.
    pub c_index: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub risks: Vec<f64>,
    pub p_1y: Vec<f64>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

/// Scores every pair with the model's own predicted post latent.
pub fn evaluate(model: &WorldModel, pairs: &[VisitPair]) -> Result<Evaluation, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Config("no pairs to evaluate".into()));
    }
    let prepared = prepare(model, pairs)?;
    let (mut l1, mut brier_sum, mut brier_n) = (0.0, 0.0, 0usize);
    let mut risks = Vec::with_capacity(pairs.len());
    let mut p_1y = Vec::with_capacity(pairs.len());
    for item in &prepared {
        let mut g = Graph::new(model.params());
        let z_pre = g.constant(item.z_pre.clone());
        let z_hat = model.predict_post_on(&mut g, z_pre, &item.cond)?;
        let (logit, r) = model.predict_survival_on(&mut g, z_pre, z_hat)?;
        let z = g.constant(item.z_post.clone());
        let l = losses::latent_l1(&mut g, z_hat, z)?;
        l1 += g.scalar(l)?;
        let p = sigmoid(g.scalar(logit)?);
        if let Some(y) = item.one_year {
            brier_sum += (p - f64::from(u8::from(y))).powi(2);
            brier_n += 1;
        }
        risks.push(g.scalar(r)?);
        p_1y.push(p);
    }
    let times: Vec<f64> = prepared.iter().map(|p| p.time).collect();
    let events: Vec<bool> = prepared.iter().map(|p| p.event).collect();
    let c = match c_index(&risks, &times, &events) {
        Ok(c) => Some(c),
        Err(MetricsError::Undefined(_)) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Evaluation {
        summary: EvalSummary {
            pairs: pairs.len(),
            latent_l1: l1 / pairs.len() as f64,
            brier: (brier_n > 0).then(|| brier_sum / brier_n as f64),
            c_index: c,
        },
        risks,
        p_1y,
        times,
        events,
    })
}

pub struct TrainOutcome {
    pub model: WorldModel,
    pub split: PatientSplit,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            TrainingMetadata {
                seed: config.seed,
                epochs: self.history.len(),
                train_config: Some(config.clone()),
                final_epoch: self.history.last().copied(),
            },
        )
    }
}

/// Splits `cohort` at patient level, initialises a model from `config.seed`
/// and runs Adam over shuffled minibatches of training pairs.
pub fn train(cohort: &Cohort, actor: ActorConfig, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    cohort.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if (cohort.latent_tokens, cohort.token_width) != (actor.latent_tokens, actor.width) {
        return Err(TrainError::Config(format!(
            "cohort latents are {}×{} but the actor expects {}×{}",
            cohort.latent_tokens, cohort.token_width, actor.latent_tokens, actor.width
        )));
    }
    let split = split_patients(cohort, config.train_fraction, config.seed)?;
    let model = WorldModel::new(actor, config.seed)?;
    let train_pairs = cohort.pairs_of(&split.train);
    let val_pairs = cohort.pairs_of(&split.validation);
    let (model, history) = fit(model, &train_pairs, &val_pairs, config)?;
    Ok(TrainOutcome { model, split, history })
}

/// Optimises `model` on `train_pairs`, evaluating on `val_pairs` (if any)
/// after every epoch.
pub fn fit(
    mut model: WorldModel,
    train_pairs: &[VisitPair],
    val_pairs: &[VisitPair],
    config: &TrainConfig,
) -> Result<(WorldModel, Vec<EpochRecord>), TrainError> {
    config.validate()?;
    if train_pairs.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least 2 training pairs, got {}",
            train_pairs.len()
        )));
    }
    let prepared = prepare(&model, train_pairs)?;
    let adam = config.adam();
    let mut state = AdamState::new(model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let n = batches.len();
            batches[n - 1] = &order[(n - 1) * config.batch_size..];
        }
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        let mut skipped = 0;
        for (b, batch) in batches.iter().enumerate() {
            let items: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let grads = {
                let mut g = Graph::new(model.params());
                let (loss, c, has_cox) = batch_objective(&model, &mut g, &items, &config.weights)?;
                let t = losses::total_loss(&c, &config.weights)
                    .map_err(|source| TrainError::NonFiniteLoss { epoch, batch: b, source })?;
                if !has_cox {
                    skipped += 1;
                    tracing::warn!(epoch, batch = b, "no event in minibatch; Cox term skipped");
                }
                sum.latent += c.latent;
                sum.contrastive += c.contrastive;
                sum.brier += c.brier;
                sum.cox += c.cox;
                total += t;
                g.backward(loss)?
            };
            adaptive_step(model.params_mut(), &grads, &mut state, &adam)?;
        }
        let nb = batches.len() as f64;
        let mean = LossComponents {
            latent: sum.latent / nb,
            contrastive: sum.contrastive / nb,
            brier: sum.brier / nb,
            cox: sum.cox / nb,
        };
        let validation = if val_pairs.is_empty() {
            None
        } else {
            Some(evaluate(&model, val_pairs)?.summary)
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train: mean,
            train_total: total / nb,
            skipped_cox: skipped,
            validation,
        };
        tracing::info!(
            epoch = record.epoch,
            total = record.train_total,
            latent = mean.latent,
            val_l1 = validation.map(|v| v.latent_l1),
            val_c = validation.and_then(|v| v.c_index),
            "epoch finished"
        );
        history.push(record);
    }
    Ok((model, history))
}
