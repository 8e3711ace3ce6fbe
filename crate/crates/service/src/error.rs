use std::path::PathBuf;

use thiserror::Error;
use twm_core::actor::ActorError;
use twm_core::metrics::MetricsError;
use twm_core::planner::PlannerError;
use twm_core::policy::PolicyError;
use twm_core::synthcohort::CohortError;
use twm_core::training::TrainError;

/// Failures of the command-line workflows and of service startup.
#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{}: {source}", path.display())]
    CohortFile {
        path: PathBuf,
        #[source]
        source: CohortError,
    },
    #[error("{}: {source}", path.display())]
    CheckpointFile {
        path: PathBuf,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("server: {0}")]
    Server(String),
}
