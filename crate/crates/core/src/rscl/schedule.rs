use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine decay of the contrastive weight from 1 at step 0 to 0 at `max_steps`.
pub fn lambda_schedule(step: u64, max_steps: u64) -> Result<f64> {
    if max_steps == 0 {
        return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
    }
    if step > max_steps {
        return Err(Error::InvalidArgument(format!("step {step} exceeds max_steps {max_steps}")));
    }
    Ok(0.5 * (1.0 + (PI * step as f64 / max_steps as f64).cos()))
}
