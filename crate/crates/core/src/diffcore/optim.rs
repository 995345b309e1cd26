use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{bail, Result};
use crate::math;

/// AdamW with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.dims())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

impl AdamW {
    /// One update of every parameter. `lr_scale[i]` multiplies the learning
    /// rate of parameter `i` (used for the slower image stem).
    pub fn step(&self, store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64, lr_scale: &[f64]) -> Result<()> {
        if lr.is_nan() || lr <= 0.0 {
            bail!(Config, "learning rate must be positive, got {}", lr);
        }
        if grads.len() != store.len() || state.m.len() != store.len() || lr_scale.len() != store.len() {
            bail!(Contract, "adamw: {} params, {} grads, {} moments", store.len(), grads.len(), state.m.len());
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - math::powi(self.beta1, t);
        let bc2 = 1.0 - math::powi(self.beta2, t);
        for i in 0..store.len() {
            let id = super::ParamId(i);
            let p = store.get_mut(id);
            if p.dims() != grads[i].dims() || p.dims() != state.m[i].dims() {
                bail!(Contract, "adamw: shape mismatch for parameter {}", i);
            }
            let step_lr = lr * lr_scale[i];
            let decay = 1.0 - step_lr * self.weight_decay;
            let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
            for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= step_lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}
