use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Momentum buffer. Starts empty and is sized on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `g' = g + wd*w; v = mu*v + g'; w = w - lr*v`.
pub fn sgd_step(model: &mut Model, grads: &[f64], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    cfg.validate()?;
    sgd_update(model.params_mut(), grads, cfg, state)
}

/// [`sgd_step`] on a bare parameter slice.
pub fn sgd_update(params: &mut [f64], grads: &[f64], cfg: &SgdConfig, state: &mut SgdState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    if state.velocity.len() != params.len() {
        state.velocity = vec![0.0; params.len()];
    }
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        let g = if cfg.weight_decay > 0.0 {
            g + cfg.weight_decay * *w
        } else {
            g
        };
        *v = if cfg.momentum > 0.0 { cfg.momentum * *v + g } else { g };
        *w -= cfg.lr * *v;
    }
    Ok(())
}
