//! Optimizers and the learning-rate schedule: SGD with momentum for network
//! weights, Adam for architecture weights, cosine annealing across epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::ParamStore;
use crate::tensor::Element;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_weight_decay: f64,
    pub batch_size: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    /// Unroll step size of the inner optimization; fixed at 0 (first-order).
    pub xi: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            w_lr: 0.025,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_weight_decay: 1e-3,
            batch_size: 64,
            search_epochs: 40,
            retrain_epochs: 150,
            xi: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_lr <= 0.0 || self.alpha_lr <= 0.0 {
            return Err(Error::InvalidArg("learning rates must be positive".into()));
        }
        if self.w_lr_min > self.w_lr {
            return Err(Error::InvalidArg(format!(
                "w_lr_min {} exceeds w_lr {}",
                self.w_lr_min, self.w_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArg("batch size must be positive".into()));
        }
        if self.xi != 0.0 {
            return Err(Error::InvalidArg(
                "second-order unrolling (xi != 0) is not implemented".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate at epoch granularity:
/// `lr_min + (lr_max - lr_min)/2 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(epoch <= total_epochs, "epoch beyond schedule");
    if total_epochs == 0 {
        return lr_max;
    }
    let progress = epoch as f64 / total_epochs as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SGD with classical momentum and L2 weight decay folded into the gradient:
/// `v <- momentum*v + (g + wd*w); w <- w - lr*v`.
pub struct SgdMomentum<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Element> SgdMomentum<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .ids()
            .map(|id| vec![T::ZERO; store.tensor(id).numel()])
            .collect();
        SgdMomentum {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// Apply one step. `grads` is aligned with the store's parameter ids;
    /// parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) {
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        let lr = T::from_f64(lr);
        for (idx, id) in store.ids().enumerate().collect::<Vec<_>>() {
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            let v = &mut self.velocity[idx];
            let w = store.tensor_mut(id).data_mut();
            for ((vi, wi), &gi) in v.iter_mut().zip(w.iter_mut()).zip(g.iter()) {
                *vi = mu * *vi + (gi + wd * *wi);
                *wi -= lr * *vi;
            }
        }
    }

    /// Velocity buffers in parameter-id order (checkpointing).
    pub fn state(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn restore_state(&mut self, state: Vec<Vec<T>>) -> Result<()> {
        if state.len() != self.velocity.len()
            || state
                .iter()
                .zip(self.velocity.iter())
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::ConfigMismatch(
                "optimizer state does not match parameter store".into(),
            ));
        }
        self.velocity = state;
        Ok(())
    }
}

/// Adam over a flat `f64` buffer (the architecture weights), with the L2
/// term added to the gradient and bias correction applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay,
            eps: 1e-8,
            step_count: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "Adam state size mismatch");
        assert_eq!(params.len(), grads.len(), "Adam gradient size mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
