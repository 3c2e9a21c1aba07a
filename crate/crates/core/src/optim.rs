//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, keyed like the parameters they track.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// Single-tensor Adam update. `step` is the 1-based step count after
/// increment.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(TensorError::Contract(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(TensorError::Contract(format!(
                "gradient shape {:?} does not match parameter `{name}` {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        if m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(TensorError::Contract(format!("optimizer state for `{name}` has wrong shape")));
        }
        adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), state.step, cfg);
    }
    Ok(())
}
