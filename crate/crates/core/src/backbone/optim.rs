//! Momentum SGD with in-step weight decay, and the EMA shadow update.

use serde::{Deserialize, Serialize};

use super::{check_same_layout, is_decayed, ModelState, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimiserConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
}

impl Default for OptimiserConfig {
    fn default() -> Self {
        Self {
            lr: 0.0075,
            momentum: 0.9,
            weight_decay: 7.5e-4,
            ema_momentum: 0.99,
        }
    }
}

impl OptimiserConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum must be in [0,1), got {}",
                self.ema_momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// `v <- momentum * v + g + wd * theta` (wd only on conv/linear weights),
/// then `theta <- theta - lr * v`. Nothing is modified when any gradient is
/// non-finite.
pub fn sgd_step(state: &mut ModelState, grads: &ParamSet, cfg: &OptimiserConfig) -> Result<()> {
    check_same_layout(&state.params, grads, "gradients")?;
    for (name, g) in grads {
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{i}] = {} at step {}",
                g.data[i], state.step_count
            )));
        }
    }
    let (lr, mom) = (cfg.lr as f32, cfg.momentum as f32);
    for (name, theta) in state.params.iter_mut() {
        let wd = if is_decayed(name) { cfg.weight_decay as f32 } else { 0.0 };
        let v = &mut state.velocity.get_mut(name).expect("layout checked").data;
        let g = &grads[name].data;
        for ((t, v), g) in theta.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = mom * *v + *g + wd * *t;
            *t -= lr * *v;
        }
    }
    state.step_count += 1;
    Ok(())
}

/// `ema <- d * ema + (1 - d) * theta`; running statistics are copied.
pub fn ema_update(state: &mut ModelState, cfg: &OptimiserConfig) -> Result<()> {
    check_same_layout(&state.params, &state.ema, "ema")?;
    check_same_layout(&state.stats, &state.ema_stats, "ema stats")?;
    let d = cfg.ema_momentum;
    for (name, shadow) in state.ema.iter_mut() {
        let theta = &state.params[name].data;
        for (e, &t) in shadow.data.iter_mut().zip(theta) {
            *e = (d * *e as f64 + (1.0 - d) * t as f64) as f32;
        }
    }
    state.ema_stats.clone_from(&state.stats);
    Ok(())
}
