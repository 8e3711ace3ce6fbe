use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{format_feedback, neighbors, ConstraintSet, FeedbackLog, PolicyError};
use crate::encoders::{ActionSpace, ClinicalProfile, TherapyAction};

/// Everything an agent may condition a proposal on.
#[derive(Clone, Copy, Debug)]
pub struct ProposalRequest<'a> {
    /// Free-text goal; interpreted only by external agents.
    pub goal: &'a str,
    pub profile: &'a ClinicalProfile,
    pub feedback: &'a FeedbackLog,
    /// Maximum number of actions to return.
    pub count: usize,
    pub constraints: &'a ConstraintSet,
    pub seed: u64,
}

/// Source of candidate actions for the planner.
pub trait TherapyAgent: Send + Sync {
    /// Between 1 and `count` grammar-valid actions.
    fn propose(&self, request: &ProposalRequest<'_>) -> Result<Vec<TherapyAction>, PolicyError>;

    /// The action space the agent draws from, when it is a fixed finite set.
    /// The planner keeps perturbations inside it and stops once all of its
    /// admissible actions have been scored.
    fn space(&self) -> Option<&ActionSpace> {
        None
    }
}

/// Deterministic reference agent over a fixed action space.
///
/// With empty feedback it samples the space stratified by (chemo option,
/// radio option); when `count` covers every admissible action it returns all
/// of them. Afterwards it keeps the ⌈count/2⌉ lowest-risk actions seen and
/// fills up with unexplored neighbors of the best one.
#[derive(Clone, Debug)]
pub struct RuleBasedAgent {
    space: ActionSpace,
}

impl RuleBasedAgent {
    pub fn new(space: ActionSpace) -> Self {
        RuleBasedAgent { space }
    }

    fn admissible(&self, req: &ProposalRequest<'_>) -> Result<Vec<TherapyAction>, PolicyError> {
        let ok: Vec<TherapyAction> = self
            .space
            .actions()
            .iter()
            .filter(|a| req.constraints.allows(a, req.profile))
            .copied()
            .collect();
        if ok.is_empty() {
            let mut reasons: Vec<String> = self
                .space
                .actions()
                .iter()
                .flat_map(|a| req.constraints.check(a, req.profile))
                .map(|v| v.to_string())
                .collect();
            reasons.sort();
            reasons.dedup();
            return Err(PolicyError::Exhausted { reasons });
        }
        Ok(ok)
    }

    fn initial(&self, admissible: Vec<TherapyAction>, count: usize, rng: &mut ChaCha8Rng) -> Vec<TherapyAction> {
        if count >= admissible.len() {
            return admissible;
        }
        let stratum = |a: &TherapyAction| (a.chemo.map(|c| c.agent), a.radio.map(|r| r.kind));
        let mut strata: Vec<(_, Vec<TherapyAction>)> = Vec::new();
        for a in admissible {
            let key = stratum(&a);
            match strata.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(a),
                None => strata.push((key, vec![a])),
            }
        }
        strata.shuffle(rng);
        for (_, v) in strata.iter_mut() {
            v.shuffle(rng);
        }
        let mut out = Vec::with_capacity(count.min(64));
        let mut round = 0;
        while out.len() < count {
            for (_, v) in &strata {
                if let Some(a) = v.get(round) {
                    out.push(*a);
                    if out.len() == count {
                        break;
                    }
                }
            }
            round += 1;
        }
        out
    }

    fn refine(
        &self,
        req: &ProposalRequest<'_>,
        admissible: Vec<TherapyAction>,
        rng: &mut ChaCha8Rng,
    ) -> Vec<TherapyAction> {
        let allowed: HashSet<TherapyAction> = admissible.iter().copied().collect();
        let keep = req.count.div_ceil(2);
        let mut out: Vec<TherapyAction> = Vec::with_capacity(req.count.min(admissible.len()));
        for e in req.feedback.ranked() {
            if out.len() == keep {
                break;
            }
            if allowed.contains(&e.action) && !out.contains(&e.action) {
                out.push(e.action);
            }
        }
        let fresh = |a: &TherapyAction, out: &[TherapyAction]| {
            allowed.contains(a) && !req.feedback.contains(a) && !out.contains(a)
        };
        if let Some(best) = req.feedback.best() {
            let mut near = neighbors(&best.action);
            near.shuffle(rng);
            for a in near {
                if out.len() == req.count {
                    break;
                }
                if fresh(&a, &out) {
                    out.push(a);
                }
            }
        }
        if out.len() < req.count {
            let mut rest = admissible;
            rest.shuffle(rng);
            for a in rest {
                if out.len() == req.count {
                    break;
                }
                if fresh(&a, &out) {
                    out.push(a);
                }
            }
        }
        out
    }
}

impl TherapyAgent for RuleBasedAgent {
    fn space(&self) -> Option<&ActionSpace> {
        Some(&self.space)
    }

    fn propose(&self, req: &ProposalRequest<'_>) -> Result<Vec<TherapyAction>, PolicyError> {
        if req.count == 0 {
            return Err(PolicyError::Config("proposal count must be at least 1".into()));
        }
        tracing::debug!(goal = req.goal, count = req.count, "rule-based proposal");
        let admissible = self.admissible(req)?;
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(req.feedback.iterations().len() as u64);
        let out = if req.feedback.is_empty() {
            self.initial(admissible, req.count, &mut rng)
        } else {
            self.refine(req, admissible, &mut rng)
        };
        Ok(out)
    }
}

/// Request document sent to an external (hosted) agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRequestDocument {
    pub goal: String,
    pub profile: ClinicalProfile,
    /// Canonical profile text.
    pub profile_text: String,
    /// Output of [`format_feedback`].
    pub feedback: String,
    pub count: usize,
    pub constraints: ConstraintSet,
}

/// Response document expected from an external agent: canonical action texts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentResponseDocument {
    pub actions: Vec<String>,
}

impl AgentRequestDocument {
    pub fn from_request(req: &ProposalRequest<'_>) -> Self {
        AgentRequestDocument {
            goal: req.goal.to_string(),
            profile: req.profile.clone(),
            profile_text: req.profile.canonical_text(),
            feedback: format_feedback(req.feedback),
            count: req.count,
            constraints: req.constraints.clone(),
        }
    }
}

impl AgentResponseDocument {
    /// Parses every action; the first malformed one is an error.
    pub fn into_actions(self) -> Result<Vec<TherapyAction>, PolicyError> {
        self.actions
            .iter()
            .map(|s| TherapyAction::parse_canonical(s).map_err(PolicyError::from))
            .collect()
    }
}
