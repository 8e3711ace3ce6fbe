use serde::{Deserialize, Serialize};

use crate::encoders::TherapyAction;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub action: TherapyAction,
    pub r: f64,
    pub p_1y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackIteration {
    pub iteration: usize,
    pub entries: Vec<FeedbackEntry>,
    /// Lowest risk seen up to and including this iteration.
    pub best_so_far: Option<FeedbackEntry>,
}

/// Append-only record of scored actions, grouped by planner iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLog {
    iterations: Vec<FeedbackIteration>,
}

/// Fixed first line of [`format_feedback`].
pub const FEEDBACK_HEADER: &str = "# survival feedback, lowest risk first";

impl FeedbackLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one iteration; earlier iterations are never modified.
    pub fn push_iteration(&mut self, entries: Vec<FeedbackEntry>) -> &FeedbackIteration {
        let mut best = self.best().copied();
        for e in &entries {
            if best.is_none_or(|b| e.r < b.r) {
                best = Some(*e);
            }
        }
        self.iterations.push(FeedbackIteration {
            iteration: self.iterations.len(),
            entries,
            best_so_far: best,
        });
        self.iterations.last().expect("just pushed")
    }

    pub fn iterations(&self) -> &[FeedbackIteration] {
        &self.iterations
    }

    pub fn entries(&self) -> impl Iterator<Item = &FeedbackEntry> {
        self.iterations.iter().flat_map(|i| i.entries.iter())
    }

    pub fn is_empty(&self) -> bool {
        self.entries().next().is_none()
    }

    pub fn best(&self) -> Option<&FeedbackEntry> {
        self.iterations.last().and_then(|i| i.best_so_far.as_ref())
    }

    pub fn contains(&self, a: &TherapyAction) -> bool {
        self.entries().any(|e| &e.action == a)
    }

    /// Entries sorted by risk, ties by canonical text.
    pub fn ranked(&self) -> Vec<FeedbackEntry> {
        let mut all: Vec<FeedbackEntry> = self.entries().copied().collect();
        all.sort_by(|a, b| {
            a.r.total_cmp(&b.r)
                .then_with(|| a.action.canonical_text().cmp(&b.action.canonical_text()))
        });
        all
    }
}

/// Header line followed by one `r=<risk> p_1y=<prob> | <action>` line per
/// entry, lowest risk first, four decimals.
pub fn format_feedback(log: &FeedbackLog) -> String {
    let mut out = String::from(FEEDBACK_HEADER);
    out.push('\n');
    for e in log.ranked() {
        out.push_str(&format!("r={:.4} p_1y={:.4} | {}\n", e.r, e.p_1y, e.action.canonical_text()));
    }
    out
}
