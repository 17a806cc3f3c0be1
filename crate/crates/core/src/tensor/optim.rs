use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; `p -= lr * weight_decay * p` each step.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(self, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..self
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment buffers exist only for parameters
/// that were trainable when stepped.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.moments.contains_key(name)
    }

    /// Applies one update to every trainable tensor and clears all grads.
    /// Frozen tensors are left untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::MissingGradient(name.to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad {
                tensor.grad = None;
                continue;
            }
            let grad = tensor.grad.take().expect("checked above");
            let state = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
            for (((p, g), m), v) in tensor
                .values_mut()
                .iter_mut()
                .zip(&grad)
                .zip(&mut state.m)
                .zip(&mut state.v)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            }
            if tensor.values().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}
