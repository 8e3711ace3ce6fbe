use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numerics::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if !ok {
            return Err(TrainError::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient. Nothing is modified if any gradient entry is
/// non-finite.
pub fn adaptive_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if state.m.len() != store.len() {
        return Err(TrainError::Config(format!(
            "optimizer state holds {} parameters, store holds {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in grads.params() {
        if id.0 >= store.len() || g.numel() != state.m[id.0].len() {
            return Err(TrainError::Config(format!("gradient shape mismatch for parameter {}", id.0)));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let g = grads.param(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let w = store.entry_mut(id);
        for k in 0..w.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            w[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
