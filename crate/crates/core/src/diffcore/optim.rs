//! LAMB optimizer, cosine learning-rate schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{LblmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr_base: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub total_steps: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr_base: 1e-3,
            lr_min: 0.0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-6,
            total_steps: 1,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0) {
            return Err(LblmError::config("lr_base must be positive"));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_base) {
            return Err(LblmError::config("need 0 <= lr_min <= lr_base"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LblmError::config("weight_decay must be non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(LblmError::config("clip_norm must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(LblmError::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps_opt > 0.0) {
            return Err(LblmError::config("eps_opt must be positive"));
        }
        if self.total_steps == 0 {
            return Err(LblmError::config("total_steps must be positive"));
        }
        Ok(())
    }
}

/// First/second moment buffers, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        OptimState {
            m: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(LblmError::shape("optimizer state does not match parameter count"));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.numel() || v.len() != p.numel() {
                return Err(LblmError::shape(format!("moment shape mismatch for `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// One LAMB update using the gradients held in `store`.
///
/// Each parameter tensor is one trust-ratio block. A block whose weight norm
/// or update norm is zero uses a trust ratio of 1.
pub fn lamb_step(
    store: &mut ParamStore,
    state: &mut OptimState,
    hyper: &TrainHyper,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(LblmError::config(format!("learning rate must be positive, got {lr}")));
    }
    state.check(store)?;
    if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(LblmError::PoisonedUpdate(p.name.clone()));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let mut update = Vec::new();
    for (i, p) in store.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        update.clear();
        update.reserve(p.numel());
        for j in 0..p.numel() {
            let g = p.grad[j];
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g;
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            update.push(mhat / (vhat.sqrt() + hyper.eps_opt) + hyper.weight_decay * p.values[j]);
        }
        let w_norm = p.values.iter().map(|w| w * w).sum::<f64>().sqrt();
        let u_norm = update.iter().map(|u| u * u).sum::<f64>().sqrt();
        let trust = if w_norm > 0.0 && u_norm > 0.0 {
            w_norm / u_norm
        } else {
            1.0
        };
        for (w, u) in p.values.iter_mut().zip(&update) {
            *w -= lr * trust * u;
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_base` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, hyper: &TrainHyper) -> Result<f64> {
    if step > hyper.total_steps {
        return Err(LblmError::OutOfRange {
            step,
            total: hyper.total_steps,
        });
    }
    let frac = step as f64 / hyper.total_steps as f64;
    Ok(hyper.lr_min
        + 0.5 * (hyper.lr_base - hyper.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if let Some(p) = store.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(LblmError::PoisonedUpdate(p.name.clone()));
    }
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// Clips gradients, applies one LAMB update at the cosine rate of `step`
/// and clears the gradients. Returns `(lr, pre-clip gradient norm)`.
pub fn optimizer_step(
    store: &mut ParamStore,
    state: &mut OptimState,
    hyper: &TrainHyper,
    step: usize,
) -> Result<(f64, f64)> {
    let norm = clip_grad_norm(store, hyper.clip_norm)?;
    let lr = cosine_lr(step, hyper)?;
    // the final scheduled step may reach lr_min = 0
    if lr > 0.0 {
        lamb_step(store, state, hyper, lr)?;
    } else {
        state.step_count += 1;
    }
    store.zero_grad();
    Ok((lr, norm))
}
