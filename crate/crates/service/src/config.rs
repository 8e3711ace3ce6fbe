use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Per-request limits. Bodies over `max_body_bytes` and candidate or
/// schedule lists over their limits are answered with 413; `K` and `M` over
/// their limits with 400.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub max_body_bytes: usize,
    /// Actions per `/v1/candidates` request.
    pub max_candidates: usize,
    /// Steps per `/v1/rollout` schedule.
    pub max_schedule_steps: usize,
    /// Upper bound on `M` in `/v1/plan`.
    pub max_proposals: usize,
    /// Upper bound on `K` in `/v1/plan`.
    pub max_iterations: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_body_bytes: 1 << 20,
            max_candidates: 1024,
            max_schedule_steps: 256,
            max_proposals: 64,
            max_iterations: 16,
        }
    }
}

/// Settings of `twm serve`, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_bind")]
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    /// JSON constraint table; the built-in default when absent.
    #[serde(default)]
    pub constraints: Option<PathBuf>,
    #[serde(default)]
    pub limits: Limits,
    /// `tracing` filter directive such as `info` or `twm_service=debug`.
    #[serde(default = "default_log_level")]
    pub log_level: String,
}

fn default_bind() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_log_level() -> String {
    "info".into()
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            bind: default_bind(),
            checkpoint: checkpoint.into(),
            constraints: None,
            limits: Limits::default(),
            log_level: default_log_level(),
        }
    }

    /// Reads a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|source| ServiceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ServiceConfig = toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.checkpoint.is_relative() {
            cfg.checkpoint = base.join(&cfg.checkpoint);
        }
        if let Some(c) = cfg.constraints.as_mut() {
            if c.is_relative() {
                *c = base.join(&*c);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let l = &self.limits;
        let limits = [
            ("max_body_bytes", l.max_body_bytes),
            ("max_candidates", l.max_candidates),
            ("max_schedule_steps", l.max_schedule_steps),
            ("max_proposals", l.max_proposals),
            ("max_iterations", l.max_iterations),
        ];
        if let Some((name, _)) = limits.iter().find(|(_, v)| *v == 0) {
            return Err(ServiceError::Config(format!("limits.{name} must be positive")));
        }
        Ok(())
    }
}
