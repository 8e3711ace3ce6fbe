use serde::{Deserialize, Serialize};

use super::EncodeError;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalConfig {
    pub dim: usize,
}

impl TemporalConfig {
    pub fn new(dim: usize) -> Result<Self, EncodeError> {
        let cfg = TemporalConfig { dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(EncodeError::Config(format!(
                "time embedding width must be even and >= 2, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Interleaved `[sin(w_i dt), cos(w_i dt)]` for `i = 1..=dim/2`, with
/// `w_i = 10000^(-2i/dim)` and `dt` in days.
pub fn encode_time(dt: f64, cfg: TemporalConfig) -> Result<Tensor, EncodeError> {
    cfg.validate()?;
    if !dt.is_finite() || dt < 0.0 {
        return Err(EncodeError::Domain(format!("elapsed time must be finite and >= 0, got {dt}")));
    }
    let half = cfg.dim / 2;
    let mut out = Vec::with_capacity(cfg.dim);
    for i in 1..=half {
        let omega = 10000f64.powf(-2.0 * i as f64 / cfg.dim as f64);
        let (s, c) = (omega * dt).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(Tensor::vector(out)?)
}
