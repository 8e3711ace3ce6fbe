//! Synthetic longitudinal cohorts with known dynamics and hazards, and the
//! line-delimited cohort file format shared with ingested data.

mod dynamics;
mod generate;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorError, LatentState};
use crate::encoders::{ClinicalProfile, EncodeError, TherapyAction};

pub use dynamics::{AgentEffect, SyntheticDynamics, ONE_YEAR_DAYS};
pub use generate::{generate_cohort, true_optimal_action, PlanningCase};
pub use io::{export_cohort, import_cohort, read_cohort, validate_cohort_file, write_cohort, CohortSummary, COHORT_SCHEMA, COHORT_VERSION};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid dynamics: {0}")]
    Config(String),
    #[error("invalid patient record {patient}: {reason}")]
    Record { patient: String, reason: String },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("cohort schema version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Visit {
    /// Days on the patient's own clock.
    pub day: f64,
    pub latent: LatentState,
}

/// Death or censoring, on the same clock as the visits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalLabel {
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub id: String,
    /// Baseline profile; its history holds treatments before the first visit.
    pub profile: ClinicalProfile,
    pub visits: Vec<Visit>,
    /// `actions[k]` is administered between `visits[k]` and `visits[k + 1]`.
    pub actions: Vec<TherapyAction>,
    pub survival: SurvivalLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub latent_tokens: usize,
    pub token_width: usize,
    pub patients: Vec<PatientRecord>,
}

/// One consecutive visit pair with its survival label, ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct VisitPair {
    /// Index of the patient in the cohort.
    pub patient: usize,
    /// Profile whose history also lists the record's earlier actions.
    pub profile: ClinicalProfile,
    pub z_pre: LatentState,
    pub z_post: LatentState,
    pub dt: f64,
    pub action: TherapyAction,
    /// Days from the post visit to death or censoring.
    pub time: f64,
    pub event: bool,
    /// Death within one year of the post visit; `None` if censored earlier.
    pub one_year: Option<bool>,
}

impl PatientRecord {
    pub fn violations(&self, latent_tokens: usize, token_width: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.id.is_empty() {
            out.push("empty patient id".into());
        }
        out.extend(self.profile.violations());
        if self.visits.is_empty() {
            out.push("no visits".into());
        }
        if self.actions.len() + 1 != self.visits.len() {
            out.push(format!(
                "{} actions for {} visits (expected visits - 1)",
                self.actions.len(),
                self.visits.len()
            ));
        }
        for (i, v) in self.visits.iter().enumerate() {
            if !v.day.is_finite() {
                out.push(format!("visit {i} day is not finite"));
            }
            if i > 0 && !(v.day > self.visits[i - 1].day) {
                out.push(format!("visit {i} day {} does not follow {}", v.day, self.visits[i - 1].day));
            }
            if v.latent.tokens().shape() != [latent_tokens, token_width] {
                out.push(format!(
                    "visit {i} latent shape {:?}, cohort declares [{latent_tokens}, {token_width}]",
                    v.latent.tokens().shape()
                ));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            out.extend(a.violations().into_iter().map(|v| format!("action {i}: {v}")));
        }
        if let Some(last) = self.visits.last() {
            if !(self.survival.time > last.day) || !self.survival.time.is_finite() {
                out.push(format!(
                    "survival time {} must follow the last visit (day {})",
                    self.survival.time, last.day
                ));
            }
        }
        out
    }

    pub fn validate(&self, latent_tokens: usize, token_width: usize) -> Result<(), CohortError> {
        let v = self.violations(latent_tokens, token_width);
        if v.is_empty() {
            Ok(())
        } else {
            Err(CohortError::Record {
                patient: self.id.clone(),
                reason: v.join("; "),
            })
        }
    }

    /// Baseline profile plus the record's actions before visit `k`.
    pub fn profile_at(&self, k: usize) -> ClinicalProfile {
        let mut p = self.profile.clone();
        p.treatment_history.extend_from_slice(&self.actions[..k.min(self.actions.len())]);
        p
    }

    pub fn pairs(&self, patient: usize) -> Vec<VisitPair> {
        (0..self.actions.len())
            .map(|k| {
                let pre = &self.visits[k];
                let post = &self.visits[k + 1];
                let time = self.survival.time - post.day;
                let one_year = if self.survival.event && time <= ONE_YEAR_DAYS {
                    Some(true)
                } else if time > ONE_YEAR_DAYS {
                    Some(false)
                } else {
                    None
                };
                VisitPair {
                    patient,
                    profile: self.profile_at(k),
                    z_pre: pre.latent.clone(),
                    z_post: post.latent.clone(),
                    dt: post.day - pre.day,
                    action: self.actions[k],
                    time,
                    event: self.survival.event,
                    one_year,
                }
            })
            .collect()
    }
}

impl Cohort {
    pub fn validate(&self) -> Result<(), CohortError> {
        let mut ids = std::collections::HashSet::new();
        for p in &self.patients {
            p.validate(self.latent_tokens, self.token_width)?;
            if !ids.insert(p.id.as_str()) {
                return Err(CohortError::Record {
                    patient: p.id.clone(),
                    reason: "duplicate patient id".into(),
                });
            }
        }
        Ok(())
    }

    /// All consecutive visit pairs of the given patients, in order.
    pub fn pairs_of(&self, patients: &[usize]) -> Vec<VisitPair> {
        patients.iter().flat_map(|&i| self.patients[i].pairs(i)).collect()
    }
}

#[cfg(test)]
mod tests;
