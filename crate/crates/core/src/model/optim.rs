use serde::{Deserialize, Serialize};

use super::network::{Gradients, Mpnn};
use crate::error::{invalid, AmqError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Mpnn) -> Self {
        Self { m: model.zero_grads(), v: model.zero_grads(), t: 0 }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW update of every weight and bias.
pub fn adam_step(
    model: &mut Mpnn,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if grads.0.len() != model.layers.len() || state.m.0.len() != model.layers.len() {
        return Err(AmqError::Shape("optimizer state does not match the model".into()));
    }
    if !grads.is_finite() {
        return Err(AmqError::NonFinite("gradients"));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * cfg.weight_decay * *p;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    };
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let (m, v) = (&mut state.m.0[l], &mut state.v.0[l]);
        update(layer.weight.data_mut(), grads.0[l].weight.data(), m.weight.data_mut(), v.weight.data_mut());
        update(&mut layer.bias, &grads.0[l].bias, &mut m.bias, &mut v.bias);
    }
    Ok(())
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay
/// to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64) -> Result<f64> {
    if warmup >= total || step > total {
        return invalid(format!("schedule step {step} of {total} with warmup {warmup}"));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos()))
}
