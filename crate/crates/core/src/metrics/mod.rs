//! Survival and recommendation metrics: concordance, Kaplan-Meier, log-rank
//! and component-level precision/recall.

mod gamma;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{Agent, TherapyAction};

pub use gamma::{chi_square_upper_tail, regularized_gamma_q};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid input: {0}")]
    Domain(String),
}

fn check_survival(times: &[f64], events: &[bool]) -> Result<(), MetricsError> {
    if times.len() != events.len() {
        return Err(MetricsError::Domain(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    if let Some(t) = times.iter().find(|t| !t.is_finite() || **t <= 0.0) {
        return Err(MetricsError::Domain(format!("survival times must be finite and > 0, got {t}")));
    }
    Ok(())
}

/// Fenwick tree over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, i: usize) {
        let mut i = i + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, i: usize) -> u64 {
        let mut i = i;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's concordance index: over pairs with `T_i < T_j` and `δ_i = 1`,
/// the fraction where `r_i > r_j`, counting risk ties as one half.
/// Runs in O(n log n).
pub fn c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64, MetricsError> {
    check_survival(times, events)?;
    if risks.len() != times.len() {
        return Err(MetricsError::Domain(format!("{} risks but {} times", risks.len(), times.len())));
    }
    if let Some(r) = risks.iter().find(|r| !r.is_finite()) {
        return Err(MetricsError::Domain(format!("risk {r} is not finite")));
    }
    let mut sorted: Vec<f64> = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|x| *x < r);

    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick(vec![0; sorted.len() + 1]);
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let t = times[order[start]];
        let end = start + order[start..].iter().take_while(|&&i| times[i] == t).count();
        for &i in &order[start..end] {
            if events[i] {
                let k = rank(risks[i]);
                let lower = tree.below(k);
                let lower_or_equal = tree.below(k + 1);
                concordant += lower;
                tied += lower_or_equal - lower;
                comparable += inserted;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(MetricsError::Undefined("no comparable pairs".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

/// Product-limit survival estimate with a 95% Greenwood band. The first
/// point is `(0, 1)`; one further point per distinct event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

const Z_95: f64 = 1.959_963_984_540_054;

pub fn km_curve(times: &[f64], events: &[bool]) -> Result<KmCurve, MetricsError> {
    check_survival(times, events)?;
    if times.is_empty() {
        return Err(MetricsError::Domain("no observations".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve {
        times: vec![0.0],
        survival: vec![1.0],
        at_risk: vec![times.len()],
        events: vec![0],
        lower: vec![1.0],
        upper: vec![1.0],
    };
    let (mut s, mut greenwood) = (1.0f64, 0.0f64);
    let mut n = times.len();
    let mut start = 0;
    while start < order.len() {
        let t = times[order[start]];
        let group = order[start..].iter().take_while(|&&i| times[i] == t).count();
        let d = order[start..start + group].iter().filter(|&&i| events[i]).count();
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
            let (lo, hi) = if d < n {
                greenwood += d as f64 / (n as f64 * (n - d) as f64);
                let half = Z_95 * s * greenwood.sqrt();
                ((s - half).max(0.0), (s + half).min(1.0))
            } else {
                (0.0, 0.0)
            };
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(n);
            curve.events.push(d);
            curve.lower.push(lo);
            curve.upper.push(hi);
        }
        n -= group;
        start += group;
    }
    Ok(curve)
}

impl KmCurve {
    /// Step-function value at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        let i = self.times.partition_point(|x| *x <= t);
        self.survival[i.saturating_sub(1)]
    }

    /// Columnar text: header line then one comma-separated row per point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,survival,lower,upper,at_risk,events\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.times[i], self.survival[i], self.lower[i], self.upper[i], self.at_risk[i], self.events[i]
            ));
        }
        out
    }
}

/// One labelled group of survival observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalGroup {
    pub label: String,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRankResult {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Log-rank statistic `U' V⁻¹ U` over the first `g − 1` groups, with the
/// chi-square upper tail on `g − 1` degrees of freedom.
pub fn log_rank(groups: &[SurvivalGroup]) -> Result<LogRankResult, MetricsError> {
    if groups.len() < 2 {
        return Err(MetricsError::Domain("log-rank needs at least two groups".into()));
    }
    for g in groups {
        check_survival(&g.times, &g.events)?;
        if g.times.is_empty() {
            return Err(MetricsError::Domain(format!("group {} is empty", g.label)));
        }
    }
    let k = groups.len() - 1;
    let mut all: Vec<(f64, usize, bool)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| g.times.iter().zip(&g.events).map(move |(&t, &e)| (t, gi, e)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut at_risk: Vec<f64> = groups.iter().map(|g| g.times.len() as f64).collect();
    let mut u = vec![0.0; k];
    let mut v = vec![vec![0.0; k]; k];
    let mut start = 0;
    while start < all.len() {
        let t = all[start].0;
        let end = start + all[start..].iter().take_while(|x| x.0 == t).count();
        let mut d = vec![0.0; groups.len()];
        let mut leaving = vec![0.0; groups.len()];
        for &(_, gi, e) in &all[start..end] {
            leaving[gi] += 1.0;
            if e {
                d[gi] += 1.0;
            }
        }
        let d_total: f64 = d.iter().sum();
        let n: f64 = at_risk.iter().sum();
        if d_total > 0.0 {
            let spread = if n > 1.0 { d_total * (n - d_total) / (n - 1.0) } else { 0.0 };
            for i in 0..k {
                u[i] += d[i] - d_total * at_risk[i] / n;
                for j in 0..k {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    v[i][j] += spread * at_risk[i] / n * (delta - at_risk[j] / n);
                }
            }
        }
        for (r, l) in at_risk.iter_mut().zip(&leaving) {
            *r -= l;
        }
        start = end;
    }
    let statistic = quadratic_form_inverse(&v, &u).max(0.0);
    Ok(LogRankResult {
        statistic,
        degrees_of_freedom: k,
        p_value: chi_square_upper_tail(statistic, k as f64),
    })
}

/// `uᵀ V⁻¹ u` by Gaussian elimination with partial pivoting; a singular `V`
/// (no information) yields 0.
fn quadratic_form_inverse(v: &[Vec<f64>], u: &[f64]) -> f64 {
    let k = u.len();
    let mut a: Vec<Vec<f64>> = v.iter().zip(u).map(|(row, &ui)| row.iter().copied().chain([ui]).collect()).collect();
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return 0.0;
        }
        a.swap(col, pivot);
        for row in col + 1..k {
            let f = a[row][col] / a[col][col];
            for c in col..=k {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let s: f64 = (row + 1..k).map(|c| a[row][c] * x[c]).sum();
        x[row] = (a[row][k] - s) / a[row][row];
    }
    u.iter().zip(&x).map(|(a, b)| a * b).sum()
}

/// Splits subjects at the median risk: `true` marks the high-risk stratum
/// (`r > median`).
pub fn median_split(risks: &[f64]) -> Vec<bool> {
    if risks.is_empty() {
        return vec![];
    }
    let mut s = risks.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    risks.iter().map(|r| *r > median).collect()
}

/// Active treatment components of an action.
pub fn components(a: &TherapyAction) -> BTreeSet<Agent> {
    a.agents().into_iter().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf1_counts(hit: usize, predicted: usize, truth: usize) -> Result<Prf1, MetricsError> {
    if predicted == 0 || truth == 0 {
        return Err(MetricsError::Undefined("empty component set".into()));
    }
    let precision = hit as f64 / predicted as f64;
    let recall = hit as f64 / truth as f64;
    let f1 = if hit == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 { precision, recall, f1 })
}

/// Component-set precision, recall and F1 of one recommendation.
pub fn prf1(predicted: &TherapyAction, truth: &TherapyAction) -> Result<Prf1, MetricsError> {
    let (p, g) = (components(predicted), components(truth));
    prf1_counts(p.intersection(&g).count(), p.len(), g.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationReport {
    /// Micro-averaged over all component decisions of the cohort.
    pub micro: Prf1,
    /// Fraction of recommendations equal to the truth in every field.
    pub exact_match: f64,
    pub n: usize,
}

pub fn recommendation_report(pairs: &[(TherapyAction, TherapyAction)]) -> Result<RecommendationReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Undefined("no recommendations".into()));
    }
    let (mut hit, mut np, mut ng, mut exact) = (0, 0, 0, 0);
    for (p, g) in pairs {
        let (p_set, g_set) = (components(p), components(g));
        hit += p_set.intersection(&g_set).count();
        np += p_set.len();
        ng += g_set.len();
        exact += usize::from(p == g);
    }
    Ok(RecommendationReport {
        micro: prf1_counts(hit, np, ng)?,
        exact_match: exact as f64 / pairs.len() as f64,
        n: pairs.len(),
    })
}

#[cfg(test)]
mod tests;
