//! Training objectives and their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cox_value, Graph, NumericsError, Tensor, Var};

/// Floor applied inside the logarithms of the contrastive loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{0}")]
    Domain(String),
    #[error("loss component {component} is not finite ({value})")]
    NonFinite { component: &'static str, value: f64 },
    #[error("invalid loss weights: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the latent L1 term.
    pub lambda1: f64,
    /// Weight of the Brier term.
    pub lambda2: f64,
    /// Temperature of the action-embedding similarities.
    pub tau1: f64,
    /// Temperature of the predicted-latent similarities.
    pub tau2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5.0,
            lambda2: 1.0,
            tau1: 0.1,
            tau2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.tau1 > 0.0 && self.tau2 > 0.0;
        if ok && [self.lambda1, self.lambda2, self.tau1, self.tau2].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LossError::Config(format!("{self:?}")))
        }
    }
}

/// Survival labels of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalBatchLabels {
    /// Observed times in days, all positive.
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    /// One-year death label; `None` when censored before one year.
    pub one_year: Vec<Option<bool>>,
}

impl SurvivalBatchLabels {
    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.times.len();
        if self.events.len() != n || self.one_year.len() != n {
            return Err(LossError::Domain(format!(
                "label lengths differ: {} times, {} events, {} one-year labels",
                n,
                self.events.len(),
                self.one_year.len()
            )));
        }
        if let Some(t) = self.times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(LossError::Domain(format!("observed time must be positive, got {t}")));
        }
        Ok(())
    }

    pub fn has_events(&self) -> bool {
        self.events.iter().any(|&e| e)
    }
}

/// Mean absolute difference over all entries.
pub fn latent_l1(g: &mut Graph<'_>, z_hat: Var, z: Var) -> Result<Var, LossError> {
    let d = g.sub(z_hat, z)?;
    let a = g.abs(d)?;
    Ok(g.mean(a)?)
}

/// Symmetric soft-label cross-entropy between action-embedding similarities
/// `p` (rows of `us`, temperature `tau1`) and predicted-latent similarities
/// `q` (rows of `z_hats`, temperature `tau2`). Both are cosine similarities
/// softmax-normalised per row with the self-pair excluded.
pub fn soft_contrastive(
    g: &mut Graph<'_>,
    z_hats: Var,
    us: Var,
    tau1: f64,
    tau2: f64,
) -> Result<Var, LossError> {
    let b = g.value(z_hats)?.rows();
    if b < 2 || g.value(us)?.rows() != b {
        return Err(LossError::Domain(format!(
            "contrastive loss needs at least two paired rows, got {b} latents and {} embeddings",
            g.value(us)?.rows()
        )));
    }
    if !(tau1 > 0.0 && tau2 > 0.0) {
        return Err(LossError::Config(format!("temperatures must be positive: {tau1}, {tau2}")));
    }
    let p = similarity_distribution(g, us, tau1)?;
    let q = similarity_distribution(g, z_hats, tau2)?;
    let log_p = g.log_clamped(p, LOG_FLOOR)?;
    let log_q = g.log_clamped(q, LOG_FLOOR)?;
    let a = g.mul(p, log_q)?;
    let c = g.mul(q, log_p)?;
    let both = g.add(a, c)?;
    let s = g.sum(both)?;
    Ok(g.scale(s, -1.0)?)
}

fn similarity_distribution(g: &mut Graph<'_>, x: Var, tau: f64) -> Result<Var, LossError> {
    let n = g
        .normalize_rows(x)
        .map_err(|e| LossError::Domain(format!("cosine similarity undefined: {e}")))?;
    let sim = g.matmul_nt(n, n)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    Ok(g.softmax_off_diagonal(logits)?)
}

/// Mean squared error between predicted one-year probabilities `p` and the
/// valid labels; `None` when no label in the batch is valid.
pub fn brier(g: &mut Graph<'_>, p: Var, labels: &[Option<bool>]) -> Result<Option<Var>, LossError> {
    let pv = g.value(p)?;
    if pv.numel() != labels.len() {
        return Err(LossError::Domain(format!(
            "{} probabilities for {} labels",
            pv.numel(),
            labels.len()
        )));
    }
    if let Some(x) = pv.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(LossError::Domain(format!("probability {x} outside [0, 1]")));
    }
    let valid = labels.iter().filter(|l| l.is_some()).count();
    if valid == 0 {
        return Ok(None);
    }
    let shape = pv.shape().to_vec();
    let y: Vec<f64> = labels.iter().map(|l| if l == &Some(true) { 1.0 } else { 0.0 }).collect();
    let mask: Vec<f64> = labels.iter().map(|l| if l.is_some() { 1.0 } else { 0.0 }).collect();
    let y = g.constant(Tensor::new(shape.clone(), y)?);
    let mask = g.constant(Tensor::new(shape, mask)?);
    let d = g.sub(p, y)?;
    let d = g.mul(d, mask)?;
    let sq = g.dot(d, d)?;
    Ok(Some(g.scale(sq, 1.0 / valid as f64)?))
}

/// Negative Cox partial log-likelihood (Breslow ties). `None` when the batch
/// holds no event, in which case the term is skipped.
pub fn cox_partial(
    g: &mut Graph<'_>,
    r: Var,
    times: &[f64],
    events: &[bool],
) -> Result<Option<Var>, LossError> {
    if !events.iter().any(|&e| e) {
        return Ok(None);
    }
    Ok(Some(g.cox_partial(r, times, events)?))
}

/// Value-only Cox loss; 0 and `false` when there are no events.
pub fn cox_partial_value(r: &[f64], times: &[f64], events: &[bool]) -> Result<(f64, bool), LossError> {
    if r.len() != times.len() || r.len() != events.len() {
        return Err(LossError::Domain("cox: length mismatch".into()));
    }
    Ok((cox_value(r, times, events), events.iter().any(|&e| e)))
}

/// Value-only Brier score `(p - y)²` averaged over the pairs.
pub fn brier_value(p: &[f64], y: &[bool]) -> Result<f64, LossError> {
    if p.len() != y.len() || p.is_empty() {
        return Err(LossError::Domain("brier: empty or mismatched inputs".into()));
    }
    if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(LossError::Domain(format!("probability {x} outside [0, 1]")));
    }
    Ok(p.iter()
        .zip(y)
        .map(|(p, &y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum::<f64>()
        / p.len() as f64)
}

/// Per-component loss values of one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub latent: f64,
    pub contrastive: f64,
    pub brier: f64,
    pub cox: f64,
}

impl LossComponents {
    pub fn check_finite(&self) -> Result<(), LossError> {
        for (component, value) in [
            ("latent", self.latent),
            ("contrastive", self.contrastive),
            ("brier", self.brier),
            ("cox", self.cox),
        ] {
            if !value.is_finite() {
                return Err(LossError::NonFinite { component, value });
            }
        }
        Ok(())
    }
}

/// `lambda1·latent + contrastive + lambda2·brier + cox`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64, LossError> {
    c.check_finite()?;
    w.validate()?;
    Ok(w.lambda1 * c.latent + c.contrastive + w.lambda2 * c.brier + c.cox)
}
