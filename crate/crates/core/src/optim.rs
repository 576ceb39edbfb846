//! AdamW with global-norm clipping, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// global gradient-norm cap; `None` disables clipping
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, max_grad_norm: Some(1.0) }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("adam eps must be > 0 and weight_decay ≥ 0".into()));
        }
        if let Some(m) = self.max_grad_norm {
            if !(m > 0.0) {
                return Err(Error::Config("max_grad_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// One AdamW update of `theta` in place.
pub fn optimizer_step(
    theta: &mut [f64],
    grad: &GradientVector,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<StepInfo> {
    if grad.len() != theta.len() || state.m.len() != theta.len() {
        return Err(Error::Internal(format!(
            "optimizer shapes differ: theta {}, grad {}, state {}",
            theta.len(),
            grad.len(),
            state.m.len()
        )));
    }
    grad.check_finite("gradient")?;
    let grad_norm = grad.norm();
    let clip_scale = match cfg.max_grad_norm {
        Some(max) if grad_norm > max => max / grad_norm,
        _ => 1.0,
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..theta.len() {
        let g = grad.0[i] * clip_scale;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        theta[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(StepInfo { grad_norm, clip_scale })
}

/// Linear warmup to `lr` over `warmup_steps`, then cosine decay to 0 at
/// `final_step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub final_step: usize,
}

impl Schedule {
    /// Schedule for `updates` optimizer steps; update `i` (0-based) uses
    /// `lr_at(i + 1)`, so the last update still has a positive rate.
    pub fn for_updates(lr: f64, warmup_steps: usize, updates: usize) -> Self {
        Schedule { lr, warmup_steps, final_step: updates.max(warmup_steps) + 1 }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.final_step {
            return 0.0;
        }
        let span = (self.final_step - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn lr_for_update(&self, i: usize) -> f64 {
        self.lr_at(i + 1)
    }
}
