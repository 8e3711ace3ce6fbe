//! Candidate generation: safety constraints, survival feedback, agents and
//! local perturbations.

mod agent;
mod constraints;
mod feedback;
mod perturb;

use thiserror::Error;

use crate::encoders::EncodeError;

pub use agent::{AgentRequestDocument, AgentResponseDocument, ProposalRequest, RuleBasedAgent, TherapyAgent};
pub use constraints::{ConstraintSet, DoseCap, HistoryRule, Violation};
pub use feedback::{format_feedback, FeedbackEntry, FeedbackIteration, FeedbackLog, FEEDBACK_HEADER};
pub use perturb::{neighbors, perturb};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("no admissible action: {}", .reasons.join("; "))]
    Exhausted { reasons: Vec<String> },
    #[error("invalid policy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}
