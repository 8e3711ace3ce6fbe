//! The `/v1` HTTP interface.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use twm_core::actor::{ActorConfig, LatentState, SurvivalOutput};
use twm_core::encoders::{
    Agent, ClinicalProfile, TherapyAction, ChemoAgent, RadioKind, CYCLES, DOSE_LEVELS, INTERVAL_GRID,
};
use twm_core::planner::{rollout, PlanConfig, PlanResult, PlannerError, RolloutPoint, Schedule, ScheduleStep};
use twm_core::policy::{format_feedback, ConstraintSet, FeedbackLog, Violation};

use crate::{reference_plan, ServiceState};

pub const API_VERSION: &str = "v1";

/// Builds the `/v1` router over one immutable snapshot.
pub fn router(state: Arc<ServiceState>) -> Router {
    let limit = state.limits.max_body_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/grammar", get(grammar))
        .route("/v1/score", post(score))
        .route("/v1/candidates", post(candidates))
        .route("/v1/plan", post(plan))
        .route("/v1/rollout", post(rollout_handler))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    /// Dotted path into the request body; `.` for the body itself.
    pub field: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
    /// Constraint report of an exhausted plan.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial: Option<FeedbackLog>,
}

#[derive(Debug)]
pub enum ApiError {
    Invalid(Vec<FieldError>),
    TooLarge(String),
    Exhausted { reasons: Vec<String>, partial: FeedbackLog },
    NotFound,
    Internal(String),
}

impl ApiError {
    fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError::Invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }
}

impl From<PlannerError> for ApiError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::Exhausted { reasons, partial } => ApiError::Exhausted { reasons, partial },
            PlannerError::Config(m) => ApiError::field(".", m),
            PlannerError::Schedule(m) => ApiError::field("schedule", m),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = |code: &str, message: String| ErrorBody {
            code: code.into(),
            message,
            fields: Vec::new(),
            reasons: Vec::new(),
            partial: None,
        };
        let (status, body) = match self {
            ApiError::Invalid(fields) => {
                let message = fields
                    .iter()
                    .map(|f| format!("{}: {}", f.field, f.message))
                    .collect::<Vec<_>>()
                    .join("; ");
                (StatusCode::BAD_REQUEST, ErrorBody { fields, ..body("invalid_request", message) })
            }
            ApiError::TooLarge(m) => (StatusCode::PAYLOAD_TOO_LARGE, body("too_large", m)),
            ApiError::Exhausted { reasons, partial } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                ErrorBody {
                    reasons,
                    partial: Some(partial),
                    ..body("constraints_exhausted", "no candidate action satisfies the constraints".into())
                },
            ),
            ApiError::NotFound => (StatusCode::NOT_FOUND, body("not_found", "no such endpoint".into())),
            ApiError::Internal(m) => {
                tracing::error!(error = %m, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, body("internal", m))
            }
        };
        (status, Json(body)).into_response()
    }
}

/// JSON body extractor whose errors name the offending field.
pub struct ValidJson<T>(pub T);

impl<S, T> FromRequest<S> for ValidJson<T>
where
    S: Send + Sync,
    T: DeserializeOwned,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let bytes = Bytes::from_request(req, state).await.map_err(|rej| {
            if rej.status() == StatusCode::PAYLOAD_TOO_LARGE {
                ApiError::TooLarge(rej.body_text())
            } else {
                ApiError::field(".", rej.body_text())
            }
        })?;
        let mut de = serde_json::Deserializer::from_slice(&bytes);
        let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let field = e.path().to_string();
            ApiError::field(field, e.into_inner().to_string())
        })?;
        de.end().map_err(|e| ApiError::field(".", e.to_string()))?;
        Ok(ValidJson(value))
    }
}

/// Latent as nested rows (`latent_tokens × token_width`), optionally with a
/// declared shape that must agree with the rows and the loaded model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentInput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
    pub tokens: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl From<&LatentState> for LatentInput {
    fn from(z: &LatentState) -> Self {
        LatentInput {
            shape: None,
            tokens: z.tokens().to_rows(),
            timestamp: z.timestamp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub latent: LatentInput,
    pub profile: ClinicalProfile,
    pub dt: f64,
    pub action: TherapyAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidatesRequest {
    pub latent: LatentInput,
    pub profile: ClinicalProfile,
    pub dt: f64,
    pub actions: Vec<TherapyAction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub latent: LatentInput,
    pub profile: ClinicalProfile,
    pub dt: f64,
    #[serde(default, alias = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, alias = "M", skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRequest {
    pub latent: LatentInput,
    pub profile: ClinicalProfile,
    pub schedule: Vec<ScheduleStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub api_version: String,
    pub checkpoint_hash: String,
    pub checkpoint_format_version: u32,
    pub actor: ActorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub action: TherapyAction,
    pub p_1y: f64,
    pub r: f64,
    pub admissible: bool,
    /// Constraint violations under the service's table; empty when admissible.
    pub violations: Vec<Violation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidatesResponse {
    /// In request order.
    pub results: Vec<CandidateScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResponse {
    pub config: PlanConfig,
    pub result: PlanResult,
    /// Canonical text rendering of the feedback log.
    pub feedback_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResponse {
    pub trajectory: Vec<RolloutPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChemoOptions {
    pub agents: Vec<ChemoAgent>,
    pub dose_levels: Vec<u8>,
    pub cycles: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadioOptions {
    pub kinds: Vec<RadioKind>,
    pub dose_levels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarResponse {
    pub api_version: String,
    /// `[latent_tokens, token_width]` expected by the loaded model.
    pub latent_shape: [usize; 2],
    pub chemo: ChemoOptions,
    pub radio: RadioOptions,
    pub brachy: Vec<bool>,
    pub immuno: Vec<String>,
    pub add: Vec<String>,
    pub interval_days: Vec<u32>,
    /// Structural rules beyond the per-field domains.
    pub rules: Vec<String>,
    pub action_count: usize,
    pub agents: Vec<Agent>,
    pub constraints: ConstraintSet,
}

type Shared = State<Arc<ServiceState>>;

async fn not_found() -> ApiError {
    ApiError::NotFound
}

async fn health(State(s): Shared) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        api_version: API_VERSION.into(),
        checkpoint_hash: s.checkpoint_hash.clone(),
        checkpoint_format_version: s.checkpoint_version,
        actor: *s.model.config(),
    })
}

async fn grammar(State(s): Shared) -> Json<GrammarResponse> {
    let cfg = s.model.config();
    Json(GrammarResponse {
        api_version: API_VERSION.into(),
        latent_shape: [cfg.latent_tokens, cfg.width],
        chemo: ChemoOptions {
            agents: ChemoAgent::ALL.to_vec(),
            dose_levels: DOSE_LEVELS.collect(),
            cycles: CYCLES.collect(),
        },
        radio: RadioOptions {
            kinds: RadioKind::ALL.to_vec(),
            dose_levels: DOSE_LEVELS.collect(),
        },
        brachy: vec![false, true],
        immuno: vec![Agent::Pembrolizumab.name().into()],
        add: vec![Agent::Bevacizumab.name().into()],
        interval_days: INTERVAL_GRID.to_vec(),
        rules: vec!["at least one component must be active".into()],
        action_count: s.space.len(),
        agents: Agent::ALL.to_vec(),
        constraints: s.constraints.clone(),
    })
}

/// Collects field errors so one response reports all of them.
#[derive(Default)]
struct Checks(Vec<FieldError>);

impl Checks {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    fn latent(&mut self, input: &LatentInput, cfg: &ActorConfig) -> Option<LatentState> {
        let before = self.0.len();
        let want = [cfg.latent_tokens, cfg.width];
        if let Some(shape) = input.shape {
            if shape != want {
                self.push("latent.shape", format!("declared shape {shape:?}, model expects {want:?}"));
            }
        }
        if input.tokens.len() != cfg.latent_tokens {
            self.push(
                "latent.tokens",
                format!("{} tokens, model expects {}", input.tokens.len(), cfg.latent_tokens),
            );
        }
        for (i, row) in input.tokens.iter().enumerate() {
            if row.len() != cfg.width {
                self.push(
                    format!("latent.tokens[{i}]"),
                    format!("width {}, model expects {}", row.len(), cfg.width),
                );
            }
        }
        if let Some(t) = input.timestamp {
            if !t.is_finite() {
                self.push("latent.timestamp", "must be finite");
            }
        }
        if self.0.len() > before {
            return None;
        }
        match LatentState::from_rows(&input.tokens, input.timestamp) {
            Ok(z) => Some(z),
            Err(e) => {
                self.push("latent", e.to_string());
                None
            }
        }
    }

    fn profile(&mut self, p: &ClinicalProfile) {
        for v in p.violations() {
            self.push("profile", v);
        }
    }

    fn dt(&mut self, dt: f64) {
        if !(dt.is_finite() && dt > 0.0) {
            self.push("dt", format!("must be a positive number of days, got {dt}"));
        }
    }

    fn action(&mut self, field: String, a: &TherapyAction) {
        for v in a.violations() {
            self.push(field.clone(), v);
        }
    }

    fn finish(self) -> Result<(), ApiError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(ApiError::Invalid(self.0))
        }
    }
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

async fn score(State(s): Shared, ValidJson(req): ValidJson<ScoreRequest>) -> Result<Json<SurvivalOutput>, ApiError> {
    let mut c = Checks::default();
    let z = c.latent(&req.latent, s.model.config());
    c.profile(&req.profile);
    c.dt(req.dt);
    c.action("action".into(), &req.action);
    c.finish()?;
    let z = z.expect("checked");
    blocking(move || {
        s.model
            .score_action(&z, &req.profile, req.dt, &req.action)
            .map(Json)
            .map_err(internal)
    })
    .await
}

async fn candidates(
    State(s): Shared,
    ValidJson(req): ValidJson<CandidatesRequest>,
) -> Result<Json<CandidatesResponse>, ApiError> {
    if req.actions.len() > s.limits.max_candidates {
        return Err(ApiError::TooLarge(format!(
            "{} actions exceed the limit of {}",
            req.actions.len(),
            s.limits.max_candidates
        )));
    }
    let mut c = Checks::default();
    let z = c.latent(&req.latent, s.model.config());
    c.profile(&req.profile);
    c.dt(req.dt);
    if req.actions.is_empty() {
        c.push("actions", "at least one action is required");
    }
    for (i, a) in req.actions.iter().enumerate() {
        c.action(format!("actions[{i}]"), a);
    }
    c.finish()?;
    let z = z.expect("checked");
    blocking(move || {
        let results = req
            .actions
            .iter()
            .map(|a| {
                let out = s.model.score_action(&z, &req.profile, req.dt, a).map_err(internal)?;
                let violations = s.constraints.check(a, &req.profile);
                Ok(CandidateScore {
                    action: *a,
                    p_1y: out.p_1y,
                    r: out.r,
                    admissible: violations.is_empty(),
                    violations,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()?;
        Ok(Json(CandidatesResponse { results }))
    })
    .await
}

async fn plan(State(s): Shared, ValidJson(req): ValidJson<PlanRequest>) -> Result<Json<PlanResponse>, ApiError> {
    let mut c = Checks::default();
    let z = c.latent(&req.latent, s.model.config());
    c.profile(&req.profile);
    c.dt(req.dt);
    let defaults = PlanConfig::default();
    let config = PlanConfig {
        k: req.k.unwrap_or(defaults.k),
        m: req.m.unwrap_or(defaults.m),
        seed: req.seed.unwrap_or(defaults.seed),
        epsilon: req.epsilon.unwrap_or(defaults.epsilon),
        goal: req.goal.clone().unwrap_or(defaults.goal),
    };
    if config.k == 0 || config.k > s.limits.max_iterations {
        c.push("k", format!("must be in 1..={}", s.limits.max_iterations));
    }
    if config.m == 0 || config.m > s.limits.max_proposals {
        c.push("m", format!("must be in 1..={}", s.limits.max_proposals));
    }
    if !(config.epsilon.is_finite() && config.epsilon >= 0.0) {
        c.push("epsilon", "must be finite and >= 0");
    }
    c.finish()?;
    let z = z.expect("checked");
    blocking(move || {
        let result = reference_plan(&s.model, &z, &req.profile, req.dt, &s.constraints, &config)?;
        let feedback_text = format_feedback(&result.feedback);
        Ok(Json(PlanResponse {
            config,
            result,
            feedback_text,
        }))
    })
    .await
}

async fn rollout_handler(
    State(s): Shared,
    ValidJson(req): ValidJson<RolloutRequest>,
) -> Result<Json<RolloutResponse>, ApiError> {
    if req.schedule.len() > s.limits.max_schedule_steps {
        return Err(ApiError::TooLarge(format!(
            "{} schedule steps exceed the limit of {}",
            req.schedule.len(),
            s.limits.max_schedule_steps
        )));
    }
    let mut c = Checks::default();
    let z = c.latent(&req.latent, s.model.config());
    c.profile(&req.profile);
    if req.schedule.is_empty() {
        c.push("schedule", "at least one step is required");
    }
    let mut previous = req.latent.timestamp.unwrap_or(0.0);
    for (i, step) in req.schedule.iter().enumerate() {
        if !step.day.is_finite() || step.day <= previous {
            c.push(
                format!("schedule[{i}].day"),
                format!("must be finite and later than {previous}, got {}", step.day),
            );
        }
        if step.day.is_finite() {
            previous = previous.max(step.day);
        }
        c.action(format!("schedule[{i}].action"), &step.action);
    }
    c.finish()?;
    let z = z.expect("checked");
    blocking(move || {
        let schedule = Schedule::new(req.schedule)?;
        let trajectory = rollout(&z, &req.profile, &schedule, &s.model)?;
        Ok(Json(RolloutResponse { trajectory }))
    })
    .await
}
