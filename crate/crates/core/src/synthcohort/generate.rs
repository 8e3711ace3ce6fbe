use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

use super::{Cohort, CohortError, PatientRecord, SurvivalLabel, SyntheticDynamics, Visit};
use crate::actor::LatentState;
use crate::encoders::{ActionSpace, ClinicalProfile, Sex, TherapyAction};

/// Inputs of one planning problem: current latent, profile with full history
/// and the horizon in days.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanningCase {
    pub z_pre: LatentState,
    pub profile: ClinicalProfile,
    pub dt: f64,
}

impl PlanningCase {
    /// Plans from the record's last visit.
    pub fn from_record(record: &PatientRecord, dt: f64) -> Self {
        let last = record.visits.len() - 1;
        PlanningCase {
            z_pre: record.visits[last].latent.clone(),
            profile: record.profile_at(last),
            dt,
        }
    }
}

/// Deterministic in `(n, dynamics, seed)`. Patient `i` draws its structure
/// from stream `i` of `seed` and its noise from stream `i` of
/// `dynamics.seed`, so patients are independent of each other.
pub fn generate_cohort(n: usize, dynamics: &SyntheticDynamics, seed: u64) -> Result<Cohort, CohortError> {
    if n < 5 {
        return Err(CohortError::Config(format!("need at least 5 patients, got {n}")));
    }
    dynamics.validate()?;
    let grammar = TherapyAction::grammar();
    let patients = (0..n)
        .map(|i| generate_patient(i, dynamics, seed, &grammar))
        .collect::<Result<Vec<_>, _>>()?;
    let cohort = Cohort {
        latent_tokens: dynamics.latent_tokens,
        token_width: dynamics.token_width,
        patients,
    };
    cohort.validate()?;
    Ok(cohort)
}

fn generate_patient(
    index: usize,
    dyn_: &SyntheticDynamics,
    seed: u64,
    grammar: &[TherapyAction],
) -> Result<PatientRecord, CohortError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(dyn_.seed);
    noise_rng.set_stream(index as u64);

    let profile = sample_profile(&mut rng, grammar);
    let (l, w) = (dyn_.latent_tokens, dyn_.token_width);
    let burden = rng.random_range(dyn_.initial_burden.0..=dyn_.initial_burden.1);
    let spread = Normal::new(0.0, dyn_.initial_spread).map_err(|e| CohortError::Config(e.to_string()))?;
    let mut z: Vec<Vec<f64>> = (0..l)
        .map(|t| {
            let weight = if l > 1 { 1.0 + 0.4 * (t as f64 / (l - 1) as f64 - 0.5) } else { 1.0 };
            dyn_.hazard_direction
                .iter()
                .map(|u| burden * weight * u + spread.sample(&mut rng))
                .collect()
        })
        .collect();
    debug_assert_eq!(z[0].len(), w);

    let n_visits = rng.random_range(2..=4);
    let noise = Normal::new(0.0, dyn_.noise).map_err(|e| CohortError::Config(e.to_string()))?;
    let mut day = 0.0;
    let mut visits = vec![Visit {
        day,
        latent: LatentState::from_rows(&z, Some(day))?,
    }];
    let mut actions = Vec::with_capacity(n_visits - 1);
    for _ in 1..n_visits {
        let dt = rng.random_range(30..=365) as f64;
        let a = *grammar.choose(&mut rng).expect("grammar is not empty");
        z = dyn_.step(&z, &a, &profile, dt);
        if dyn_.noise > 0.0 {
            for x in z.iter_mut().flatten() {
                *x += noise.sample(&mut noise_rng);
            }
        }
        day += dt;
        actions.push(a);
        visits.push(Visit {
            day,
            latent: LatentState::from_rows(&z, Some(day))?,
        });
    }

    let rate = dyn_.baseline_hazard * dyn_.log_hazard(&z).exp();
    let death = Exp::new(rate)
        .map_err(|e| CohortError::Config(format!("hazard rate {rate}: {e}")))?
        .sample(&mut rng);
    let censor = rng.random_range(dyn_.censoring.0..=dyn_.censoring.1);
    // Guard against a zero draw so the label strictly follows the last visit.
    let delay = death.min(censor).max(1e-6);
    Ok(PatientRecord {
        id: format!("p{index:05}"),
        profile,
        visits,
        actions,
        survival: SurvivalLabel {
            time: day + delay,
            event: death <= censor,
        },
    })
}

fn sample_profile(rng: &mut ChaCha8Rng, grammar: &[TherapyAction]) -> ClinicalProfile {
    let age = rng.random_range(25..=80) as f64;
    let sex = if rng.random_bool(0.5) { Sex::Female } else { Sex::Male };
    let flag = |rng: &mut ChaCha8Rng, p: f64| if rng.random_bool(p) { 1.0 } else { 0.0 };
    let biomarkers = [
        ("idh1_2".to_string(), flag(rng, 0.3)),
        ("atrx".to_string(), flag(rng, 0.3)),
        ("codeletion_1p19q".to_string(), flag(rng, 0.2)),
        ("mgmt_methylation".to_string(), rng.random_range(0..=10) as f64 / 10.0),
    ]
    .into_iter()
    .collect();
    let treatment_history = if rng.random_bool(0.3) {
        vec![*grammar.choose(rng).expect("grammar is not empty")]
    } else {
        Vec::new()
    };
    ClinicalProfile {
        age,
        sex,
        biomarkers,
        treatment_history,
    }
}

/// The candidate with the lowest noise-free post-treatment hazard; ties go to
/// the earliest candidate.
pub fn true_optimal_action(case: &PlanningCase, dynamics: &SyntheticDynamics, candidates: &ActionSpace) -> TherapyAction {
    let z = case.z_pre.tokens().to_rows();
    let mut best: Option<(f64, TherapyAction)> = None;
    for a in candidates.actions() {
        let h = dynamics.log_hazard(&dynamics.step(&z, a, &case.profile, case.dt));
        if best.is_none_or(|(b, _)| h < b) {
            best = Some((h, *a));
        }
    }
    best.expect("action spaces are never empty").1
}
