use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EncodeError, TherapyAction};

/// Biomarker names accepted in a profile, in canonical order.
pub const BIOMARKERS: [&str; 4] = ["idh1_2", "atrx", "codeletion_1p19q", "mgmt_methylation"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn name(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalProfile {
    /// Years.
    pub age: f64,
    pub sex: Sex,
    #[serde(default)]
    pub biomarkers: BTreeMap<String, f64>,
    #[serde(default)]
    pub treatment_history: Vec<TherapyAction>,
}

impl ClinicalProfile {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.age.is_finite() || self.age < 0.0 {
            out.push(format!("age must be finite and >= 0, got {}", self.age));
        }
        for (name, value) in &self.biomarkers {
            if !BIOMARKERS.contains(&name.as_str()) {
                out.push(format!("unknown biomarker {name:?}"));
            }
            if !value.is_finite() {
                out.push(format!("biomarker {name} is not finite"));
            }
        }
        for (i, a) in self.treatment_history.iter().enumerate() {
            for v in a.violations() {
                out.push(format!("treatment_history[{i}]: {v}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(EncodeError::InvalidProfile(v))
        }
    }

    /// `age=<a> sex=<s> <biomarker>=<v>... history=<n> prior=<agent>...`
    ///
    /// Biomarkers follow [`BIOMARKERS`] order and are omitted when absent;
    /// prior agents are listed per historical action in order.
    pub fn canonical_text(&self) -> String {
        let mut parts = vec![format!("age={}", self.age), format!("sex={}", self.sex.name())];
        for name in BIOMARKERS {
            if let Some(v) = self.biomarkers.get(name) {
                parts.push(format!("{name}={v}"));
            }
        }
        parts.push(format!("history={}", self.treatment_history.len()));
        for a in &self.treatment_history {
            for agent in a.agents() {
                parts.push(format!("prior={agent}"));
            }
        }
        parts.join(" ")
    }
}
