use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use twm_core::encoders::ChemoAgent::{Ccnu, Tmz};
use twm_core::encoders::RadioKind::{EbrtHypofractionated, EbrtStandard};
use twm_core::encoders::{AddAgent, Agent, Chemo, ChemoAgent, ClinicalProfile, ImmunoAgent, Radio, RadioKind, TherapyAction};
use twm_core::planner::PlanConfig;
use twm_core::policy::{ConstraintSet, DoseCap};
use twm_core::synthcohort::{import_cohort, PatientRecord};
use twm_service::api::{LatentInput, PlanResponse};
use twm_service::cli::{plan_patient, PatientArgs, PlanArgs};
use twm_service::{content_hash, reference_plan, router, Limits, ServiceConfig, ServiceState};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn state_with(constraints: ConstraintSet) -> Arc<ServiceState> {
    let cfg = ServiceConfig::load(&fixture("service.toml")).unwrap();
    let bytes = std::fs::read(&cfg.checkpoint).unwrap();
    Arc::new(ServiceState::from_checkpoint_bytes(&bytes, constraints, cfg.limits).unwrap())
}

fn state() -> Arc<ServiceState> {
    state_with(ConstraintSet::default())
}

fn patient() -> PatientRecord {
    import_cohort(&fixture("golden_cohort.jsonl")).unwrap().patients[3].clone()
}

/// Last-visit latent and profile of the fixture patient.
fn case() -> (Value, ClinicalProfile, twm_core::actor::LatentState) {
    let p = patient();
    let last = p.visits.len() - 1;
    let z = p.visits[last].latent.clone();
    let latent = serde_json::to_value(LatentInput::from(&z)).unwrap();
    (latent, p.profile_at(last), z)
}

fn act(
    chemo: Option<(ChemoAgent, u8, u8)>,
    radio: Option<(RadioKind, u8)>,
    brachy: bool,
    immuno: bool,
    add: bool,
    interval_days: u32,
) -> TherapyAction {
    TherapyAction {
        chemo: chemo.map(|(agent, dose_level, cycles)| Chemo { agent, dose_level, cycles }),
        radio: radio.map(|(kind, dose_level)| Radio { kind, dose_level }),
        brachy,
        immuno: immuno.then_some(ImmunoAgent::Pembrolizumab),
        add: add.then_some(AddAgent::Bevacizumab),
        interval_days,
    }
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body.map(|b| serde_json::to_vec(&b).unwrap())).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn fields(v: &Value) -> Vec<String> {
    v["fields"]
        .as_array()
        .map(|a| a.iter().map(|f| f["field"].as_str().unwrap().to_string()).collect())
        .unwrap_or_default()
}

#[tokio::test]
async fn health_reports_the_checkpoint_content_hash() {
    let app = router(state());
    let (status, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let bytes = std::fs::read(fixture("golden_checkpoint.json")).unwrap();
    assert_eq!(v["checkpoint_hash"], content_hash(&bytes));
    assert_eq!(v["checkpoint_hash"].as_str().unwrap().len(), 64);
    assert_eq!(v["api_version"], "v1");
    assert_eq!(v["checkpoint_format_version"], 1);
    assert_eq!(v["actor"]["latent_tokens"], 2);
}

#[tokio::test]
async fn grammar_lists_the_domains_and_default_constraints() {
    let app = router(state());
    let (status, v) = call(&app, "GET", "/v1/grammar", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["action_count"], TherapyAction::grammar().len());
    assert_eq!(v["latent_shape"], json!([2, 8]));
    assert_eq!(v["interval_days"], json!([14, 28, 42]));
    assert_eq!(v["chemo"]["cycles"], json!([1, 2, 3, 4, 5, 6]));
    assert_eq!(v["constraints"]["forbidden_pairs"], json!([["bevacizumab", "tmz"]]));
    let round: ConstraintSet = serde_json::from_value(v["constraints"].clone()).unwrap();
    assert_eq!(round, ConstraintSet::default());
}

#[tokio::test]
async fn score_matches_the_model() {
    let s = state();
    let app = router(s.clone());
    let (latent, profile, z) = case();
    let a = act(Some((Tmz, 2, 3)), Some((EbrtStandard, 2)), false, false, false, 28);
    let (status, v) = call(
        &app,
        "POST",
        "/v1/score",
        Some(json!({"latent": latent, "profile": profile, "dt": 120.0, "action": a})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let want = s.model.score_action(&z, &profile, 120.0, &a).unwrap();
    assert_eq!(v["r"].as_f64().unwrap(), want.r);
    assert_eq!(v["p_1y"].as_f64().unwrap(), want.p_1y);
}

#[tokio::test]
async fn score_equals_cli_plan_initial_scores() {
    let app = router(state());
    let (latent, profile, _) = case();
    let args = PlanArgs {
        patient: PatientArgs {
            patient: fixture("golden_cohort.jsonl"),
            id: Some(patient().id),
            checkpoint: fixture("golden_checkpoint.json"),
        },
        dt: 180.0,
        k: 3,
        m: 8,
        seed: 0,
        epsilon: 1e-4,
        constraints: None,
        json: true,
    };
    let (_, result) = plan_patient(&args).unwrap();
    let initial = &result.feedback.iterations()[0].entries;
    assert!(!initial.is_empty());
    for e in initial {
        let (status, v) = call(
            &app,
            "POST",
            "/v1/score",
            Some(json!({"latent": latent, "profile": profile, "dt": 180.0, "action": e.action})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["r"].as_f64().unwrap(), e.r);
        assert_eq!(v["p_1y"].as_f64().unwrap(), e.p_1y);
    }
}

#[tokio::test]
async fn candidates_keep_request_order_and_flag_violations() {
    let app = router(state());
    let (latent, profile, _) = case();
    let actions = [
        act(None, Some((EbrtHypofractionated, 1)), false, false, false, 14),
        act(Some((Tmz, 1, 1)), None, false, false, true, 28),
        act(None, None, false, true, false, 42),
    ];
    let (status, v) = call(
        &app,
        "POST",
        "/v1/candidates",
        Some(json!({"latent": latent, "profile": profile, "dt": 90.0, "actions": actions})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    for (r, a) in results.iter().zip(&actions) {
        assert_eq!(serde_json::from_value::<TherapyAction>(r["action"].clone()).unwrap(), *a);
        let (_, single) = call(
            &app,
            "POST",
            "/v1/score",
            Some(json!({"latent": latent, "profile": profile, "dt": 90.0, "action": a})),
        )
        .await;
        assert_eq!(r["r"], single["r"]);
        assert_eq!(r["p_1y"], single["p_1y"]);
    }
    assert_eq!(results[1]["admissible"], false);
    assert_eq!(results[1]["violations"][0]["kind"], "forbidden_pair");
    assert_eq!(results[2]["admissible"], true);
    assert_eq!(results[2]["violations"], json!([]));
}

#[tokio::test]
async fn plan_matches_the_library_and_defaults_to_three_iterations() {
    let s = state();
    let app = router(s.clone());
    let (latent, profile, z) = case();
    let (status, v) = call(&app, "POST", "/v1/plan", Some(json!({"latent": latent, "profile": profile, "dt": 180.0}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let resp: PlanResponse = serde_json::from_value(v).unwrap();
    assert_eq!(resp.config.k, 3);
    assert_eq!(resp.config.m, 8);
    let direct = reference_plan(&s.model, &z, &profile, 180.0, &s.constraints, &PlanConfig::default()).unwrap();
    assert_eq!(resp.result, direct);
    assert!(resp.feedback_text.starts_with("# survival feedback"));
    for e in resp.result.feedback.entries() {
        assert!(s.constraints.allows(&e.action, &profile));
    }

    let (status, v) = call(
        &app,
        "POST",
        "/v1/plan",
        Some(json!({"latent": latent, "profile": profile, "dt": 180.0, "K": 1, "M": 4, "seed": 7})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["config"]["k"], 1);
    assert_eq!(v["result"]["iterations"], 1);
}

#[tokio::test]
async fn exhausted_constraints_answer_422_with_a_report() {
    let caps = Agent::ALL
        .iter()
        .map(|&agent| DoseCap { agent, max_exposure: 1 })
        .collect();
    let app = router(state_with(ConstraintSet {
        dose_caps: caps,
        ..ConstraintSet::default()
    }));
    let (latent, mut profile, _) = case();
    profile.treatment_history = vec![
        act(Some((Tmz, 1, 1)), Some((EbrtStandard, 1)), true, true, true, 28),
        act(Some((Ccnu, 1, 1)), Some((EbrtHypofractionated, 1)), false, false, false, 28),
    ];
    let (status, v) = call(&app, "POST", "/v1/plan", Some(json!({"latent": latent, "profile": profile, "dt": 180.0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["code"], "constraints_exhausted");
    assert!(!v["reasons"].as_array().unwrap().is_empty());
    assert!(v["partial"].is_object());
}

#[tokio::test]
async fn single_step_rollout_equals_score() {
    let app = router(state());
    let (mut latent, profile, _) = case();
    latent["timestamp"] = json!(100.0);
    let a = act(Some((Ccnu, 3, 2)), None, true, false, false, 42);
    let (status, roll) = call(
        &app,
        "POST",
        "/v1/rollout",
        Some(json!({"latent": latent, "profile": profile, "schedule": [{"day": 250.0, "action": a}]})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{roll}");
    let (_, score) = call(
        &app,
        "POST",
        "/v1/score",
        Some(json!({"latent": latent, "profile": profile, "dt": 150.0, "action": a})),
    )
    .await;
    let traj = roll["trajectory"].as_array().unwrap();
    assert_eq!(traj.len(), 1);
    assert_eq!(traj[0]["r"], score["r"]);
    assert_eq!(traj[0]["p_1y"], score["p_1y"]);
    assert_eq!(traj[0]["latent"]["timestamp"], 250.0);

    let (status, v) = call(
        &app,
        "POST",
        "/v1/rollout",
        Some(json!({"latent": latent, "profile": profile, "schedule": [
            {"day": 150.0, "action": a}, {"day": 150.0, "action": a}, {"day": 300.0, "action": a}
        ]})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["schedule[1].day"]);
}

#[tokio::test]
async fn validation_failures_name_the_field() {
    let app = router(state());
    let (latent, profile, _) = case();
    let a = act(None, None, false, true, false, 14);

    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": latent, "profile": profile, "dt": "soon", "action": a}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["dt"]);

    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": latent, "profile": profile, "dt": -3.0, "action": a}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["dt"]);

    let mut ragged = latent.clone();
    ragged["tokens"][1] = json!([1.0, 2.0]);
    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": ragged, "profile": profile, "dt": 30.0, "action": a}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["latent.tokens[1]"]);

    let mut declared = latent.clone();
    declared["shape"] = json!([4, 16]);
    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": declared, "profile": profile, "dt": 30.0, "action": a}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["latent.shape"]);

    let mut bad_action = serde_json::to_value(a).unwrap();
    bad_action["interval_days"] = json!(20);
    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": latent, "profile": profile, "dt": 30.0, "action": bad_action}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["action"]);

    let mut bad_sex = serde_json::to_value(&profile).unwrap();
    bad_sex["sex"] = json!("other");
    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": latent, "profile": bad_sex, "dt": 30.0, "action": a}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["profile.sex"]);

    let (status, v) = call(&app, "POST", "/v1/score", Some(json!({"latent": latent, "profile": profile, "action": a}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["message"].as_str().unwrap().contains("dt"), "{v}");

    let (status, v) = call(&app, "POST", "/v1/plan", Some(json!({"latent": latent, "profile": profile, "dt": 30.0, "M": 1000}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(fields(&v), vec!["m"]);

    let (status, _) = send(&app, "POST", "/v1/score", Some(b"{not json".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, v) = call(&app, "GET", "/v1/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
}

#[tokio::test]
async fn oversized_requests_answer_413() {
    let s = state();
    let app = router(s.clone());
    let (latent, profile, _) = case();

    let padding = "x".repeat(s.limits.max_body_bytes + 1);
    let (status, _) = call(
        &app,
        "POST",
        "/v1/score",
        Some(json!({"latent": latent, "profile": profile, "dt": 30.0, "pad": padding})),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    let many = vec![act(None, None, false, true, false, 14); s.limits.max_candidates + 1];
    let (status, v) = call(
        &app,
        "POST",
        "/v1/candidates",
        Some(json!({"latent": latent, "profile": profile, "dt": 30.0, "actions": many})),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(v["code"], "too_large");

    let a = act(None, None, false, true, false, 14);
    let steps: Vec<Value> = (1..=s.limits.max_schedule_steps + 1)
        .map(|i| json!({"day": i as f64 * 10.0, "action": a}))
        .collect();
    let (status, _) = call(
        &app,
        "POST",
        "/v1/rollout",
        Some(json!({"latent": latent, "profile": profile, "schedule": steps})),
    )
    .await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_identical_requests_return_identical_bodies() {
    let app = router(state());
    let (latent, profile, _) = case();
    let body = serde_json::to_vec(&json!({"latent": latent, "profile": profile, "dt": 180.0, "M": 6, "seed": 3})).unwrap();
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            let body = body.clone();
            tokio::spawn(async move { send(&app, "POST", "/v1/plan", Some(body)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for t in tasks {
        let (status, bytes) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(bytes);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn requests_leave_the_checkpoint_untouched() {
    let path = fixture("golden_checkpoint.json");
    let before = content_hash(&std::fs::read(&path).unwrap());
    let app = router(state());
    let (latent, profile, _) = case();
    for _ in 0..2 {
        let (status, _) = call(&app, "POST", "/v1/plan", Some(json!({"latent": latent, "profile": profile, "dt": 60.0}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, health) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(health["checkpoint_hash"], before);
    assert_eq!(content_hash(&std::fs::read(&path).unwrap()), before);
}

#[test]
fn startup_fails_without_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let missing = ServiceConfig::new(dir.path().join("absent.json"));
    assert!(ServiceState::load(&missing).is_err());

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\"format\":\"twm-checkpoint\",\"format_version\":9}").unwrap();
    assert!(ServiceState::load(&ServiceConfig::new(&broken)).is_err());

    let mut zero = ServiceConfig::new(fixture("golden_checkpoint.json"));
    zero.limits = Limits {
        max_candidates: 0,
        ..Limits::default()
    };
    assert!(ServiceState::load(&zero).is_err());
}

#[tokio::test]
async fn serves_over_loopback() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(twm_service::serve(listener, state()));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream
        .write_all(b"GET /v1/health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).await.unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"checkpoint_hash\""));
    server.abort();
}
