use serde::{Deserialize, Serialize};

use crate::error::{CsdnError, Result};
use crate::tensor::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp from 0 to `lr` over this many steps, constant afterwards.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Multiply the rate by `decay_factor` from this step on; 0 disables.
    pub decay_step: u64,
    pub decay_factor: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 100,
            grad_clip: 0.1,
            decay_step: 0,
            decay_factor: 0.1,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0
            && self.decay_factor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(CsdnError::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate for the 0-based optimizer step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = if self.decay_step > 0 && step >= self.decay_step {
            self.lr * self.decay_factor
        } else {
            self.lr
        };
        if step < self.warmup_steps {
            base * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            base
        }
    }
}

/// One AdamW update of every parameter at learning rate `lr`.
///
/// Decay is decoupled: `value -= lr * wd * value` is applied before and
/// independently of the bias-corrected moment step. A non-finite gradient
/// aborts before anything is modified.
pub fn adamw_step(params: &mut ParamStore, grads: &GradStore, opt: &AdamW, lr: f64, step: u64) -> Result<()> {
    for (p, g) in params.iter().zip(grads.as_slices()) {
        if g.len() != p.value.len() {
            return Err(CsdnError::Shape {
                op: "adamw_step",
                left: p.value.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(CsdnError::Divergence {
                step,
                reason: format!("non-finite gradient in '{}' at index {bad}", p.name),
            });
        }
    }
    for (p, g) in params.params_mut().iter_mut().zip(grads.as_slices()) {
        p.step_count += 1;
        let t = p.step_count as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let decay = 1.0 - lr * opt.weight_decay;
        let value = p.value.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for k in 0..value.len() {
            value[k] *= decay;
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g[k];
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            value[k] -= lr * mhat / (vhat.sqrt() + opt.eps);
        }
    }
    Ok(())
}
