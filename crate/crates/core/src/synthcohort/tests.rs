use super::*;
use crate::encoders::{ActionSpace, Agent, Chemo, ChemoAgent, Sex};

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        for (k, i) in idx.into_iter().enumerate() {
            r[i] = k as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
    let var: f64 = ra.iter().map(|x| (x - mean).powi(2)).sum();
    cov / var
}

#[test]
fn generation_is_deterministic() {
    let d = SyntheticDynamics::reference(4, 8, 0.05, 3);
    let a = generate_cohort(20, &d, 7).unwrap();
    assert_eq!(a, generate_cohort(20, &d, 7).unwrap());
    assert_ne!(a, generate_cohort(20, &d, 8).unwrap());
    for p in &a.patients {
        assert!((2..=4).contains(&p.visits.len()));
        for w in p.visits.windows(2) {
            let dt = w[1].day - w[0].day;
            assert!((30.0..=365.0).contains(&dt));
        }
    }
}

#[test]
fn small_cohorts_are_refused() {
    let d = SyntheticDynamics::reference(2, 4, 0.0, 0);
    assert!(matches!(generate_cohort(4, &d, 0), Err(CohortError::Config(_))));
}

#[test]
fn identity_dynamics_keep_trajectories_constant() {
    let d = SyntheticDynamics::identity(3, 6, 1);
    let c = generate_cohort(15, &d, 2).unwrap();
    for p in &c.patients {
        for v in &p.visits {
            assert_eq!(v.latent.tokens(), p.visits[0].latent.tokens());
        }
    }
}

#[test]
fn expanding_dynamics_are_rejected() {
    let mut d = SyntheticDynamics::reference(2, 4, 0.0, 0);
    d.effects.get_mut(&Agent::Tmz).unwrap().shrink = -0.2;
    assert!(d.max_spectral_radius() > 1.05);
    assert!(matches!(d.validate(), Err(CohortError::Config(_))));
    assert!(SyntheticDynamics::reference(4, 16, 0.0, 0).max_spectral_radius() <= 1.0);
}

#[test]
fn higher_hazard_means_shorter_survival() {
    let d = SyntheticDynamics::reference(4, 8, 0.0, 0);
    let c = generate_cohort(200, &d, 0).unwrap();
    let (mut hazard, mut time) = (Vec::new(), Vec::new());
    for p in &c.patients {
        let last = p.visits.last().unwrap();
        hazard.push(d.log_hazard(&last.latent.tokens().to_rows()));
        time.push(p.survival.time - last.day);
    }
    let rho = spearman(&hazard, &time);
    assert!(rho < -0.5, "rho = {rho}");
}

fn tmz(dose: u8, cycles: u8) -> TherapyAction {
    TherapyAction {
        chemo: Some(Chemo {
            agent: ChemoAgent::Tmz,
            dose_level: dose,
            cycles,
        }),
        radio: None,
        brachy: false,
        immuno: None,
        add: None,
        interval_days: 28,
    }
}

fn case(d: &SyntheticDynamics, burden: f64) -> generate::PlanningCase {
    let rows: Vec<Vec<f64>> = (0..d.latent_tokens)
        .map(|_| d.hazard_direction.iter().map(|u| burden * u).collect())
        .collect();
    generate::PlanningCase {
        z_pre: crate::actor::LatentState::from_rows(&rows, None).unwrap(),
        profile: crate::encoders::ClinicalProfile {
            age: 50.0,
            sex: Sex::Female,
            biomarkers: Default::default(),
            treatment_history: vec![],
        },
        dt: 180.0,
    }
}

#[test]
fn oracle_over_a_single_action() {
    let d = SyntheticDynamics::reference(2, 4, 0.0, 0);
    let only = ActionSpace::restricted(vec![tmz(1, 1)]).unwrap();
    assert_eq!(true_optimal_action(&case(&d, 1.0), &d, &only), tmz(1, 1));
}

#[test]
fn oracle_prefers_a_norm_halving_agent() {
    let mut d = SyntheticDynamics::identity(2, 4, 0);
    d.effects.get_mut(&Agent::Tmz).unwrap().shrink = 0.5;
    let best = true_optimal_action(&case(&d, 1.5), &d, &ActionSpace::full());
    assert_eq!(best.chemo.map(|c| c.agent), Some(ChemoAgent::Tmz), "{best}");
}

#[test]
fn oracle_ignores_the_noise_seed() {
    let space = ActionSpace::full();
    let a = SyntheticDynamics::reference(2, 4, 0.3, 1);
    let b = SyntheticDynamics::reference(2, 4, 0.3, 99);
    for burden in [0.3, 1.0, 2.0] {
        assert_eq!(
            true_optimal_action(&case(&a, burden), &a, &space),
            true_optimal_action(&case(&b, burden), &b, &space)
        );
    }
}

#[test]
fn pairs_carry_labels_and_history() {
    let d = SyntheticDynamics::reference(2, 4, 0.0, 0);
    let c = generate_cohort(30, &d, 5).unwrap();
    for (i, p) in c.patients.iter().enumerate() {
        let pairs = p.pairs(i);
        assert_eq!(pairs.len(), p.visits.len() - 1);
        for (k, pair) in pairs.iter().enumerate() {
            assert!(pair.time > 0.0);
            assert_eq!(pair.profile.treatment_history.len(), p.profile.treatment_history.len() + k);
            match pair.one_year {
                Some(true) => assert!(pair.event && pair.time <= 365.0),
                Some(false) => assert!(pair.time > 365.0),
                None => assert!(!pair.event && pair.time <= 365.0),
            }
        }
    }
}

#[test]
fn file_round_trip_is_lossless() {
    let d = SyntheticDynamics::reference(3, 5, 0.1, 4);
    let c = generate_cohort(12, &d, 9).unwrap();
    let mut buf = Vec::new();
    write_cohort(&c, &mut buf).unwrap();
    assert_eq!(read_cohort(buf.as_slice()).unwrap(), c);
}

#[test]
fn truncated_file_reports_the_line() {
    let d = SyntheticDynamics::reference(2, 3, 0.0, 0);
    let c = generate_cohort(6, &d, 1).unwrap();
    let mut buf = Vec::new();
    write_cohort(&c, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let cut = &text[..text.len() - 40];
    match read_cohort(cut.as_bytes()) {
        Err(CohortError::Line { line, .. }) => assert_eq!(line, 7),
        other => panic!("{other:?}"),
    }
}

#[test]
fn version_mismatch_is_explicit() {
    let text = "{\"schema\":\"twm-cohort\",\"version\":2,\"latent_tokens\":1,\"token_width\":1}\n";
    assert!(matches!(
        read_cohort(text.as_bytes()),
        Err(CohortError::Version { found: 2, expected: 1 })
    ));
}
