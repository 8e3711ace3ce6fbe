//! Command-line workflows and the `/v1` HTTP service over a trained
//! treatment world model.

pub mod api;
pub mod cli;
mod config;
mod error;
mod state;

use std::sync::Arc;

use twm_core::actor::{LatentState, WorldModel};
use twm_core::encoders::{ActionSpace, ClinicalProfile};
use twm_core::planner::{inverse_evaluate, PlanConfig, PlanResult, PlannerError};
use twm_core::policy::{ConstraintSet, RuleBasedAgent};

pub use api::router;
pub use config::{Limits, ServiceConfig};
pub use error::ServiceError;
pub use state::{content_hash, load_constraints, ServiceState};

/// Plans with the rule-based agent over the full action grammar. The CLI and
/// the service both go through here.
pub fn reference_plan(
    model: &WorldModel,
    z_pre: &LatentState,
    profile: &ClinicalProfile,
    dt: f64,
    constraints: &ConstraintSet,
    config: &PlanConfig,
) -> Result<PlanResult, PlannerError> {
    let agent = RuleBasedAgent::new(ActionSpace::full());
    inverse_evaluate(z_pre, profile, dt, &agent, model, constraints, config)
}

/// Serves `state` on `listener` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<ServiceState>) -> Result<(), ServiceError> {
    let addr = listener.local_addr().map_err(|e| ServiceError::Server(e.to_string()))?;
    tracing::info!(%addr, checkpoint = %state.checkpoint_hash, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Server(e.to_string()))
}

/// Installs a global subscriber once; later calls are ignored.
pub fn init_tracing(filter: &str) {
    let filter = tracing_subscriber::EnvFilter::try_new(filter).unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
