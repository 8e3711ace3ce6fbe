//! Iterative inverse survival evaluation and schedule rollout.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actor::{ActorError, Conditioning, LatentState, SurvivalOutput, WorldModel};
use crate::encoders::{ClinicalProfile, TherapyAction};
use crate::policy::{perturb, ConstraintSet, FeedbackEntry, FeedbackLog, PolicyError, ProposalRequest, TherapyAgent};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("no admissible candidate: {}", .reasons.join("; "))]
    Exhausted { reasons: Vec<String>, partial: FeedbackLog },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Actor(#[from] ActorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Maximum number of refinement iterations after the initial scoring.
    pub k: usize,
    /// Stop once the best risk improves by less than this.
    pub epsilon: f64,
    /// Proposals requested from the agent per iteration.
    pub m: usize,
    pub seed: u64,
    pub goal: String,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            k: 3,
            epsilon: 1e-4,
            m: 8,
            seed: 0,
            goal: "minimise predicted risk".into(),
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.k == 0 {
            return Err(PlannerError::Config("k must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(PlannerError::Config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.m == 0 {
            return Err(PlannerError::Config("m must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub a_star: TherapyAction,
    pub best_risk: f64,
    pub best_p_1y: f64,
    /// Iteration 0 holds the direct scores of the initial proposal set.
    pub feedback: FeedbackLog,
    /// Refinement iterations run, excluding the initial scoring.
    pub iterations: usize,
    /// Number of distinct actions scored.
    pub candidates: usize,
}

/// Scores actions for one (latent, profile, horizon) triple, reusing the
/// action-independent conditioning and caching by action.
struct Scorer<'a> {
    model: &'a WorldModel,
    z_pre: &'a LatentState,
    profile_text: crate::numerics::Tensor,
    time: crate::numerics::Tensor,
    cache: HashMap<TherapyAction, SurvivalOutput>,
}

impl<'a> Scorer<'a> {
    fn new(model: &'a WorldModel, z_pre: &'a LatentState, profile: &ClinicalProfile, dt: f64) -> Result<Self, PlannerError> {
        z_pre.check(model.config())?;
        Ok(Scorer {
            model,
            z_pre,
            profile_text: model.profile_text(profile)?,
            time: model.time_row(dt)?,
            cache: HashMap::new(),
        })
    }

    /// Scores `actions` not seen before, in parallel, and returns their
    /// entries in input order.
    fn score_new(&mut self, actions: &[TherapyAction]) -> Result<Vec<FeedbackEntry>, PlannerError> {
        let fresh: Vec<TherapyAction> = actions.iter().filter(|a| !self.cache.contains_key(a)).copied().collect();
        let scored: Vec<Result<SurvivalOutput, ActorError>> = fresh
            .par_iter()
            .map(|a| {
                let cond = Conditioning {
                    profile_text: self.profile_text.clone(),
                    time: self.time.clone(),
                    drug: self.model.drug_row(a)?,
                };
                Ok(self.model.transition(self.z_pre, &cond)?.1)
            })
            .collect();
        let mut out = Vec::with_capacity(fresh.len());
        for (a, s) in fresh.into_iter().zip(scored) {
            let s = s?;
            self.cache.insert(a, s);
            out.push(FeedbackEntry {
                action: a,
                r: s.r,
                p_1y: s.p_1y,
            });
        }
        Ok(out)
    }
}

fn dedup_in_order(actions: impl IntoIterator<Item = TherapyAction>) -> Vec<TherapyAction> {
    let mut seen = std::collections::HashSet::new();
    actions.into_iter().filter(|a| seen.insert(*a)).collect()
}

/// Runs the propose, perturb, filter, score, feedback loop and returns the
/// lowest-risk action over every candidate scored.
///
/// The agent's first proposal is scored directly and becomes the initial
/// feedback. Each of the following `k` iterations asks the agent again,
/// expands every proposal with its perturbations, drops anything violating
/// `constraints`, scores the new survivors and appends them to the log. The
/// loop stops early when an iteration after the first improves the best risk
/// by less than `epsilon`, or when every admissible action of the agent's
/// space has been scored.
pub fn inverse_evaluate(
    z_pre: &LatentState,
    profile: &ClinicalProfile,
    dt: f64,
    agent: &dyn TherapyAgent,
    model: &WorldModel,
    constraints: &ConstraintSet,
    config: &PlanConfig,
) -> Result<PlanResult, PlannerError> {
    config.validate()?;
    constraints.validate()?;
    let mut scorer = Scorer::new(model, z_pre, profile, dt)?;
    let in_space = |a: &TherapyAction| agent.space().is_none_or(|s| s.contains(a));
    let admissible = agent
        .space()
        .map(|s| s.actions().iter().filter(|a| constraints.allows(a, profile)).count());
    let mut log = FeedbackLog::new();

    let exhausted = |e: PolicyError, log: &FeedbackLog| match e {
        PolicyError::Exhausted { reasons } => PlannerError::Exhausted {
            reasons,
            partial: log.clone(),
        },
        other => PlannerError::Policy(other),
    };
    let propose = |log: &FeedbackLog| {
        agent.propose(&ProposalRequest {
            goal: &config.goal,
            profile,
            feedback: log,
            count: config.m,
            constraints,
            seed: config.seed,
        })
    };

    let initial = propose(&log).map_err(|e| exhausted(e, &log))?;
    let initial = dedup_in_order(initial.into_iter().filter(|a| constraints.allows(a, profile)));
    if initial.is_empty() {
        return Err(PlannerError::Exhausted {
            reasons: vec!["agent proposed no admissible action".into()],
            partial: log,
        });
    }
    let entries = scorer.score_new(&initial)?;
    log.push_iteration(entries);

    let mut iterations = 0;
    for k in 1..=config.k {
        let before = log.best().map(|b| b.r).unwrap_or(f64::INFINITY);
        let proposed = propose(&log).map_err(|e| exhausted(e, &log))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k as u64);
        let mut expanded = Vec::new();
        for a in &proposed {
            expanded.push(*a);
            expanded.extend(perturb(a, &mut rng));
        }
        let survivors = dedup_in_order(
            expanded
                .into_iter()
                .filter(|a| in_space(a) && constraints.allows(a, profile)),
        );
        let entries = scorer.score_new(&survivors)?;
        log.push_iteration(entries);
        iterations = k;
        let after = log.best().map(|b| b.r).unwrap_or(f64::INFINITY);
        tracing::debug!(iteration = k, best = after, scored = scorer.cache.len(), "planner iteration");
        let explored = admissible == Some(scorer.cache.len());
        if explored || (k > 1 && before - after < config.epsilon) {
            break;
        }
    }

    let best = *log.best().expect("initial iteration scored at least one action");
    Ok(PlanResult {
        a_star: best.action,
        best_risk: best.r,
        best_p_1y: best.p_1y,
        candidates: scorer.cache.len(),
        feedback: log,
        iterations,
    })
}

/// Actions at strictly increasing days. Entry `(t_i, a_i)` means `a_i` is
/// administered from the previous time point until day `t_i`; the first
/// interval starts at the initial latent's timestamp, or day 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schedule {
    steps: Vec<ScheduleStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub day: f64,
    pub action: TherapyAction,
}

impl Schedule {
    pub fn new(steps: Vec<ScheduleStep>) -> Result<Self, PlannerError> {
        let s = Schedule { steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if self.steps.is_empty() {
            return Err(PlannerError::Schedule("schedule is empty".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if !s.day.is_finite() {
                return Err(PlannerError::Schedule(format!("step {i}: day is not finite")));
            }
            if i > 0 && s.day <= self.steps[i - 1].day {
                return Err(PlannerError::Schedule(format!(
                    "step {i}: day {} does not follow day {}",
                    s.day,
                    self.steps[i - 1].day
                )));
            }
            s.action
                .validate()
                .map_err(|e| PlannerError::Schedule(format!("step {i}: {e}")))?;
        }
        Ok(())
    }

    pub fn steps(&self) -> &[ScheduleStep] {
        &self.steps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPoint {
    pub day: f64,
    pub action: TherapyAction,
    /// Predicted latent at `day`.
    pub latent: LatentState,
    /// Survival output of the transition ending at `day`.
    pub p_1y: f64,
    pub r: f64,
}

/// Applies the transition model recursively along `schedule`; one point per
/// step. The clinical profile is held fixed over the rollout.
pub fn rollout(
    z0: &LatentState,
    profile: &ClinicalProfile,
    schedule: &Schedule,
    model: &WorldModel,
) -> Result<Vec<RolloutPoint>, PlannerError> {
    schedule.validate()?;
    z0.check(model.config())?;
    let start = z0.timestamp().unwrap_or(0.0);
    if schedule.steps[0].day <= start {
        return Err(PlannerError::Schedule(format!(
            "step 0: day {} does not follow the initial time {start}",
            schedule.steps[0].day
        )));
    }
    let profile_text = model.profile_text(profile)?;
    let mut z = z0.clone().with_timestamp(None);
    let mut t = start;
    let mut out = Vec::with_capacity(schedule.steps.len());
    for step in &schedule.steps {
        let cond = Conditioning {
            profile_text: profile_text.clone(),
            time: model.time_row(step.day - t)?,
            drug: model.drug_row(&step.action)?,
        };
        let (post, s) = model.transition(&z, &cond)?;
        out.push(RolloutPoint {
            day: step.day,
            action: step.action,
            latent: post.clone().with_timestamp(Some(step.day)),
            p_1y: s.p_1y,
            r: s.r,
        });
        z = post;
        t = step.day;
    }
    Ok(out)
}
