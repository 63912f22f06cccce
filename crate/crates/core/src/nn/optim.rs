//! Adam with decoupled weight decay, linear warmup and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::matrix::{round_f32, Matrix};
use super::params::{Grads, ParamStore};
use super::NnError;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-step optimisation settings for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub accumulation_steps: usize,
    /// `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainStep {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 0,
            accumulation_steps: 1,
            max_grad_norm: None,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainStep {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |what: &str| Err(NnError::InvalidConfig(what.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1");
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0 && n.is_finite()) {
                return bad("max_grad_norm must be positive");
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based update `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// What one optimiser update did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub learning_rate: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global norm of the gradient actually applied.
    pub applied_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: usize,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Clips `grads` in place, updates `store` and rounds it back to `f32`
    /// precision. `grads` is left holding the applied (clipped) gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &mut Grads,
        cfg: &TrainStep,
    ) -> Result<StepReport, NnError> {
        if !grads.is_finite() {
            return Err(NnError::NonFiniteGradient);
        }
        let grad_norm = grads.global_norm();
        let mut applied_norm = grad_norm;
        if let Some(max) = cfg.max_grad_norm {
            if grad_norm > max {
                grads.scale(max / grad_norm);
                applied_norm = grads.global_norm();
            }
        }
        self.steps += 1;
        let lr = cfg.lr_at(self.steps);
        let t = self.steps as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let decay = if store.get(id).rows() > 1 {
                cfg.weight_decay
            } else {
                0.0
            };
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                if lr == 0.0 {
                    continue;
                }
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS) + decay * p[i];
                p[i] = round_f32(p[i] - lr * update);
            }
        }
        if !store.all_finite() {
            return Err(NnError::NonFiniteParameters);
        }
        Ok(StepReport {
            step: self.steps,
            learning_rate: lr,
            grad_norm,
            applied_norm,
        })
    }
}
