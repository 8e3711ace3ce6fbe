use std::fmt;

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::encoders::{Agent, ClinicalProfile, TherapyAction};

/// Cap on the cumulative exposure to one agent, history included.
/// Exposure is `dose_level·cycles` for chemotherapy, `dose_level` for
/// radiotherapy and 1 per administration otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoseCap {
    pub agent: Agent,
    pub max_exposure: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryRule {
    /// No radiotherapy (external or brachy) when the history contains any.
    NoReirradiation,
}

/// Safety constraints every emitted action must satisfy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    pub forbidden_pairs: Vec<(Agent, Agent)>,
    pub dose_caps: Vec<DoseCap>,
    pub history_rules: Vec<HistoryRule>,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            forbidden_pairs: vec![(Agent::Bevacizumab, Agent::Tmz)],
            dose_caps: vec![DoseCap {
                agent: Agent::Tmz,
                max_exposure: 12,
            }],
            history_rules: vec![HistoryRule::NoReirradiation],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ForbiddenPair { first: Agent, second: Agent },
    DoseCap { agent: Agent, exposure: u32, cap: u32 },
    Reirradiation,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ForbiddenPair { first, second } => {
                write!(f, "{first} and {second} must not be co-administered")
            }
            Violation::DoseCap { agent, exposure, cap } => {
                write!(f, "cumulative {agent} exposure {exposure} exceeds cap {cap}")
            }
            Violation::Reirradiation => f.write_str("re-irradiation after prior radiotherapy"),
        }
    }
}

fn exposure(a: &TherapyAction, agent: Agent) -> u32 {
    if let Some(c) = a.chemo.filter(|c| c.agent.agent() == agent) {
        return u32::from(c.dose_level) * u32::from(c.cycles);
    }
    if let Some(r) = a.radio.filter(|r| r.kind.agent() == agent) {
        return u32::from(r.dose_level);
    }
    u32::from(a.uses(agent))
}

fn irradiates(a: &TherapyAction) -> bool {
    a.radio.is_some() || a.brachy
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if let Some(c) = self.dose_caps.iter().find(|c| c.max_exposure == 0) {
            return Err(PolicyError::Config(format!("cap for {} must be positive", c.agent)));
        }
        if let Some((a, b)) = self.forbidden_pairs.iter().find(|(a, b)| a == b) {
            return Err(PolicyError::Config(format!("forbidden pair ({a}, {b}) names one agent twice")));
        }
        Ok(())
    }

    /// Every violated rule, in rule order.
    pub fn check(&self, a: &TherapyAction, profile: &ClinicalProfile) -> Vec<Violation> {
        let mut out = Vec::new();
        for &(x, y) in &self.forbidden_pairs {
            if a.uses(x) && a.uses(y) {
                out.push(Violation::ForbiddenPair { first: x, second: y });
            }
        }
        for cap in &self.dose_caps {
            let now = exposure(a, cap.agent);
            if now == 0 {
                continue;
            }
            let total = now
                + profile
                    .treatment_history
                    .iter()
                    .map(|h| exposure(h, cap.agent))
                    .sum::<u32>();
            if total > cap.max_exposure {
                out.push(Violation::DoseCap {
                    agent: cap.agent,
                    exposure: total,
                    cap: cap.max_exposure,
                });
            }
        }
        for rule in &self.history_rules {
            match rule {
                HistoryRule::NoReirradiation => {
                    if irradiates(a) && profile.treatment_history.iter().any(irradiates) {
                        out.push(Violation::Reirradiation);
                    }
                }
            }
        }
        out
    }

    pub fn allows(&self, a: &TherapyAction, profile: &ClinicalProfile) -> bool {
        self.check(a, profile).is_empty()
    }
}
