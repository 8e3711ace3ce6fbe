use super::*;
use crate::encoders::{Chemo, ChemoAgent, Radio, RadioKind, Sex};
use crate::numerics::finite_diff_check;
use rand::Rng;

fn small() -> ActorConfig {
    ActorConfig {
        predictor_depth: 2,
        survival_depth: 2,
        latent_tokens: 3,
        width: 8,
        text_dim: 16,
        clinical_dim: 8,
        time_dim: 8,
    }
}

fn random_latent(cfg: &ActorConfig, seed: u64) -> LatentState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..cfg.latent_tokens)
        .map(|_| (0..cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    LatentState::from_rows(&rows, None).unwrap()
}

fn profile() -> ClinicalProfile {
    ClinicalProfile {
        age: 61.0,
        sex: Sex::Male,
        biomarkers: [("mgmt_methylation".to_string(), 0.7)].into_iter().collect(),
        treatment_history: vec![],
    }
}

fn action(dose: u8) -> TherapyAction {
    TherapyAction {
        chemo: Some(Chemo {
            agent: ChemoAgent::Tmz,
            dose_level: dose,
            cycles: 3,
        }),
        radio: Some(Radio {
            kind: RadioKind::EbrtStandard,
            dose_level: 2,
        }),
        brachy: false,
        immuno: None,
        add: None,
        interval_days: 28,
    }
}

#[test]
fn zero_weights_give_residual_identity() {
    let cfg = ActorConfig::default();
    let m = WorldModel::zeroed(cfg).unwrap();
    let z = random_latent(&cfg, 1);
    let cond = m.conditioning(&profile(), 120.0, &action(2)).unwrap();
    let post = m.predict_post(&z, &cond).unwrap();
    assert_eq!(post.tokens().data(), z.tokens().data());
}

#[test]
fn output_shape_is_fixed_by_config() {
    let cfg = small();
    let m = WorldModel::new(cfg, 5).unwrap();
    for (dt, dose) in [(0.0, 1), (400.0, 3)] {
        let cond = m.conditioning(&profile(), dt, &action(dose)).unwrap();
        let post = m.predict_post(&random_latent(&cfg, dt as u64), &cond).unwrap();
        assert_eq!(post.tokens().shape(), &[cfg.latent_tokens, cfg.width]);
    }
    let wrong = LatentState::from_rows(&vec![vec![0.0; 4]; 2], None).unwrap();
    let cond = m.conditioning(&profile(), 1.0, &action(1)).unwrap();
    assert!(matches!(m.predict_post(&wrong, &cond), Err(ActorError::Shape(_))));
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let cfg = small();
    let m = WorldModel::new(cfg, 11).unwrap();
    let z = random_latent(&cfg, 2);
    let cond = m.conditioning(&profile(), 90.0, &action(2)).unwrap();
    let rep = finite_diff_check(m.params(), 1e-5, |g| -> Result<Var, ActorError> {
        let zv = g.constant(z.tokens().clone());
        let post = m.predict_post_on(g, zv, &cond)?;
        Ok(g.dot(post, post)?)
    })
    .unwrap();
    assert!(rep.max_relative_error < 1e-4, "{rep:?}");
}

#[test]
fn composite_actor_gradient_matches_finite_differences() {
    let cfg = small();
    for seed in 0..3 {
        let m = WorldModel::new(cfg, seed).unwrap();
        let z = random_latent(&cfg, seed + 50);
        let cond = m.conditioning(&profile(), 90.0, &action(2)).unwrap();
        let rep = finite_diff_check(m.params(), 1e-5, |g| -> Result<Var, ActorError> {
            let zv = g.constant(z.tokens().clone());
            let post = m.predict_post_on(g, zv, &cond)?;
            let (logit, r) = m.predict_survival_on(g, zv, post)?;
            let sq = g.dot(post, post)?;
            let head = g.add(logit, r)?;
            Ok(g.add(sq, head)?)
        })
        .unwrap();
        assert!(rep.max_relative_error < 1e-4, "seed {seed}: {rep:?}");
    }
}

#[test]
fn survival_outputs() {
    let cfg = small();
    let m = WorldModel::new(cfg, 3).unwrap();
    for seed in 0..20 {
        let a = random_latent(&cfg, seed);
        let b = random_latent(&cfg, seed + 100);
        let o = m.predict_survival(&a, &b).unwrap();
        assert!(o.p_1y > 0.0 && o.p_1y < 1.0 && o.r.is_finite());
        let swapped = m.predict_survival(&b, &a).unwrap();
        assert_ne!(o, swapped, "branches must not be symmetric");
    }
    let mut zero_head = m.clone();
    for id in [m.survival.out.weight, m.survival.out.bias] {
        let shape = zero_head.params().get(id).shape().to_vec();
        zero_head.params_mut().set(id, Tensor::zeros(&shape).unwrap()).unwrap();
    }
    let o = zero_head
        .predict_survival(&random_latent(&cfg, 1), &random_latent(&cfg, 2))
        .unwrap();
    assert_eq!(o, SurvivalOutput { p_1y: 0.5, r: 0.0 });
}

#[test]
fn score_action_is_deterministic_and_degenerate_when_zeroed() {
    let cfg = small();
    let m = WorldModel::new(cfg, 8).unwrap();
    let z = random_latent(&cfg, 4);
    let a = m.score_action(&z, &profile(), 60.0, &action(1)).unwrap();
    assert_eq!(a, m.score_action(&z, &profile(), 60.0, &action(1)).unwrap());
    let zero = WorldModel::zeroed(cfg).unwrap();
    let r1 = zero.score_action(&z, &profile(), 60.0, &action(1)).unwrap();
    let r3 = zero.score_action(&z, &profile(), 60.0, &action(3)).unwrap();
    assert_eq!(r1, r3);
    assert_eq!(r1.r, 0.0);
}

#[test]
fn named_tensor_round_trip() {
    let cfg = small();
    let m = WorldModel::new(cfg, 21).unwrap();
    let named: Vec<(String, Tensor)> = m.params().iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    let back = WorldModel::from_named_tensors(cfg, named.clone()).unwrap();
    let z = random_latent(&cfg, 9);
    assert_eq!(
        m.score_action(&z, &profile(), 33.0, &action(2)).unwrap(),
        back.score_action(&z, &profile(), 33.0, &action(2)).unwrap()
    );
    assert!(WorldModel::from_named_tensors(cfg, named[1..].to_vec()).is_err());
}

#[test]
fn latent_json_uses_nested_arrays() {
    let z = LatentState::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]], Some(10.0)).unwrap();
    let s = serde_json::to_string(&z).unwrap();
    assert_eq!(s, r#"{"tokens":[[1.0,2.0],[3.0,4.5]],"timestamp":10.0}"#);
    assert_eq!(serde_json::from_str::<LatentState>(&s).unwrap(), z);
    assert!(serde_json::from_str::<LatentState>(r#"{"tokens":[[1.0],[2.0,3.0]]}"#).is_err());
}
