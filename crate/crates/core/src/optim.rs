//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm bound applied before the update; `None` disables clipping.
    pub clip: Option<f64>,
}

impl AdamConfig {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Scale `grad` in place so its global norm is at most `bound`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], bound: f64) -> f64 {
    let n = norm(grad);
    if n > bound && n > 0.0 {
        let s = bound / n;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    n
}

/// One Adam update of `params` in place. The gradient is clipped first.
pub fn adam_step(
    cfg: &AdamConfig,
    state: &mut AdamState,
    params: &mut [f64],
    grad: &mut [f64],
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if let Some(bound) = cfg.clip {
        clip_global_norm(grad, bound);
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}
