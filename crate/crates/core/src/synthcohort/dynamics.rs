use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CohortError;
use crate::encoders::{Agent, ClinicalProfile, TherapyAction, BIOMARKERS};

pub const ONE_YEAR_DAYS: f64 = 365.0;

/// Effect of one agent at unit intensity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEffect {
    /// Fractional shrink of every latent token.
    pub shrink: f64,
    /// Yearly drift along the hazard direction.
    pub drift: f64,
    /// Yearly drift along the agent's own orthogonal signature direction.
    pub signature: f64,
}

/// Token-shared linear-Gaussian dynamics.
///
/// Over an interval of `dt` days under action `a`, every latent token moves as
/// `z ← s_a·z + (b_a + c_p)·dt/365 + N(0, σ²)` with scalar `s_a = Π_c (1 −
/// shrink_c·m_c(a))`, drift `b_a = base_drift + Σ_c m_c(a)·(drift_c·u +
/// signature_c·v_c)` and clinical offset `c_p = Σ_k biomarker_k·offset_k·u`.
/// The linear map of the flattened state is therefore `s_a·I`.
///
/// Component intensities `m_c`: chemotherapy `dose/3·(1/2 + cycles/12)·f`,
/// radiotherapy `dose/3`, brachytherapy 1, immunotherapy and the additional
/// agent `f`, where `f = (28/interval_days)^interval_exponent`.
///
/// Hazard per day: `baseline_hazard·exp(w_h·z)` with `w_h = tile(κ·u)/L`,
/// so `w_h·z = κ·mean_l(u·z_l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDynamics {
    pub latent_tokens: usize,
    pub token_width: usize,
    /// Unit hazard direction `u` within a token.
    pub hazard_direction: Vec<f64>,
    /// `κ`.
    pub hazard_scale: f64,
    /// Per-day hazard at `w_h·z = 0`.
    pub baseline_hazard: f64,
    /// Untreated yearly drift along `u`.
    pub base_drift: f64,
    pub effects: BTreeMap<Agent, AgentEffect>,
    /// Unit signature directions `v_c`, one per agent.
    pub signatures: BTreeMap<Agent, Vec<f64>>,
    pub interval_exponent: f64,
    /// Yearly offset along `u` per unit biomarker value.
    pub biomarker_offsets: BTreeMap<String, f64>,
    /// `σ`.
    pub noise: f64,
    /// Initial disease burden `u·z` is drawn uniformly from this range.
    pub initial_burden: (f64, f64),
    /// Per-coordinate standard deviation of the initial off-direction spread.
    pub initial_spread: f64,
    /// Censoring delay after the last visit, uniform over this range (days).
    pub censoring: (f64, f64),
    pub seed: u64,
}

impl SyntheticDynamics {
    /// Reference dynamics used by the CLI and the acceptance suite.
    pub fn reference(latent_tokens: usize, token_width: usize, noise: f64, seed: u64) -> Self {
        let hazard_direction = unit((0..token_width).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect());
        let mut effects = BTreeMap::new();
        let mut e = |a, shrink, drift, signature| {
            effects.insert(a, AgentEffect { shrink, drift, signature });
        };
        e(Agent::Tmz, 0.30, -0.40, 0.10);
        e(Agent::Ccnu, 0.18, -0.25, 0.10);
        e(Agent::EbrtStandard, 0.45, 0.50, 0.10);
        e(Agent::EbrtHypofractionated, 0.30, 0.10, 0.10);
        e(Agent::Brachytherapy, 0.15, 0.25, 0.10);
        e(Agent::Pembrolizumab, 0.0, -0.30, 0.10);
        e(Agent::Bevacizumab, 0.10, -0.20, 0.10);
        let signatures = Agent::ALL
            .iter()
            .enumerate()
            .map(|(k, &a)| (a, signature_direction(&hazard_direction, k)))
            .collect();
        let biomarker_offsets = [
            ("idh1_2", -0.15),
            ("atrx", 0.05),
            ("codeletion_1p19q", -0.10),
            ("mgmt_methylation", -0.10),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        SyntheticDynamics {
            latent_tokens,
            token_width,
            hazard_direction,
            hazard_scale: 2.0,
            baseline_hazard: std::f64::consts::LN_2 / ONE_YEAR_DAYS,
            base_drift: 0.6,
            effects,
            signatures,
            interval_exponent: 0.5,
            biomarker_offsets,
            noise,
            initial_burden: (0.2, 2.2),
            initial_spread: 0.1,
            censoring: (180.0, 1460.0),
            seed,
        }
    }

    /// Dynamics under which nothing ever changes.
    pub fn identity(latent_tokens: usize, token_width: usize, seed: u64) -> Self {
        let mut d = Self::reference(latent_tokens, token_width, 0.0, seed);
        d.base_drift = 0.0;
        d.effects.values_mut().for_each(|e| *e = AgentEffect { shrink: 0.0, drift: 0.0, signature: 0.0 });
        d.biomarker_offsets.values_mut().for_each(|v| *v = 0.0);
        d
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        let err = |m: String| Err(CohortError::Config(m));
        if self.latent_tokens == 0 || self.token_width == 0 {
            return err("latent dimensions must be positive".into());
        }
        if self.hazard_direction.len() != self.token_width {
            return err("hazard direction width differs from token width".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return err(format!("noise scale must be >= 0, got {}", self.noise));
        }
        if !(self.baseline_hazard > 0.0) {
            return err("baseline hazard must be positive".into());
        }
        let (lo, hi) = self.censoring;
        if !(lo > 0.0 && hi >= lo) {
            return err(format!("censoring range ({lo}, {hi}) invalid"));
        }
        if !(self.initial_burden.1 >= self.initial_burden.0) || !(self.initial_spread >= 0.0) {
            return err("initial latent ranges invalid".into());
        }
        for a in Agent::ALL {
            if !self.effects.contains_key(&a) {
                return err(format!("no effect declared for {a}"));
            }
            match self.signatures.get(&a) {
                Some(v) if v.len() == self.token_width => {}
                _ => return err(format!("signature of {a} missing or of wrong width")),
            }
        }
        for k in self.biomarker_offsets.keys() {
            if !BIOMARKERS.contains(&k.as_str()) {
                return err(format!("unknown biomarker {k}"));
            }
        }
        let worst = self.max_spectral_radius();
        if worst > 1.05 {
            return err(format!("spectral radius {worst} exceeds 1.05"));
        }
        Ok(())
    }

    /// Largest `|s_a|` over the grammar.
    pub fn max_spectral_radius(&self) -> f64 {
        TherapyAction::grammar()
            .iter()
            .map(|a| self.scale(a).abs())
            .fold(0.0, f64::max)
    }

    fn interval_factor(&self, a: &TherapyAction) -> f64 {
        (28.0 / a.interval_days as f64).powf(self.interval_exponent)
    }

    /// `(agent, intensity)` of every active component.
    pub fn intensities(&self, a: &TherapyAction) -> Vec<(Agent, f64)> {
        let f = self.interval_factor(a);
        let mut out = Vec::with_capacity(5);
        if let Some(c) = a.chemo {
            let m = c.dose_level as f64 / 3.0 * (0.5 + c.cycles as f64 / 12.0) * f;
            out.push((c.agent.agent(), m));
        }
        if let Some(r) = a.radio {
            out.push((r.kind.agent(), r.dose_level as f64 / 3.0));
        }
        if a.brachy {
            out.push((Agent::Brachytherapy, 1.0));
        }
        if a.immuno.is_some() {
            out.push((Agent::Pembrolizumab, f));
        }
        if a.add.is_some() {
            out.push((Agent::Bevacizumab, f));
        }
        out
    }

    /// `s_a`.
    pub fn scale(&self, a: &TherapyAction) -> f64 {
        self.intensities(a)
            .iter()
            .map(|(agent, m)| 1.0 - self.effects[agent].shrink * m)
            .product()
    }

    /// Yearly drift of one token, `b_a + c_p`.
    pub fn drift(&self, a: &TherapyAction, profile: &ClinicalProfile) -> Vec<f64> {
        let mut along_u = self.base_drift;
        for (k, v) in &profile.biomarkers {
            along_u += self.biomarker_offsets.get(k).copied().unwrap_or(0.0) * v;
        }
        let mut out = vec![0.0; self.token_width];
        for (agent, m) in self.intensities(a) {
            let e = self.effects[&agent];
            along_u += m * e.drift;
            for (o, s) in out.iter_mut().zip(&self.signatures[&agent]) {
                *o += m * e.signature * s;
            }
        }
        for (o, u) in out.iter_mut().zip(&self.hazard_direction) {
            *o += along_u * u;
        }
        out
    }

    /// Noise-free transition of a full latent (rows are tokens).
    pub fn step(&self, z: &[Vec<f64>], a: &TherapyAction, profile: &ClinicalProfile, dt: f64) -> Vec<Vec<f64>> {
        let s = self.scale(a);
        let b = self.drift(a, profile);
        let tau = dt / ONE_YEAR_DAYS;
        z.iter()
            .map(|tok| tok.iter().zip(&b).map(|(x, d)| s * x + d * tau).collect())
            .collect()
    }

    /// `w_h·z`.
    pub fn log_hazard(&self, z: &[Vec<f64>]) -> f64 {
        let total: f64 = z
            .iter()
            .map(|tok| tok.iter().zip(&self.hazard_direction).map(|(x, u)| x * u).sum::<f64>())
            .sum();
        self.hazard_scale * total / z.len() as f64
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A unit vector orthogonal to `u`, distinct for each agent index.
fn signature_direction(u: &[f64], k: usize) -> Vec<f64> {
    let w = u.len();
    let mut v: Vec<f64> = (0..w)
        .map(|i| ((i * 7 + k * 13 + 1) as f64 * 0.618_033_988_749_895).fract() - 0.5)
        .collect();
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
    if v.iter().all(|x| x.abs() < 1e-12) {
        return vec![0.0; w];
    }
    unit(v)
}
