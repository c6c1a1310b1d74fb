//! Adam with a linear-warmup + cosine-decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::params::ParamStore;

/// Learning-rate schedule: linear ramp from `warmup_lr` to `base_lr` over
/// `warmup_steps`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Constant learning rate (no warmup, no decay).
    pub fn constant(lr: f64) -> Self {
        LrSchedule { base_lr: lr, warmup_lr: lr, warmup_steps: 0, total_steps: usize::MAX }
    }

    /// Effective learning rate at (0-based) step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if t < self.warmup_steps {
            let frac = t as f64 / self.warmup_steps as f64;
            return self.warmup_lr + (self.base_lr - self.warmup_lr) * frac;
        }
        if self.total_steps == usize::MAX || self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let frac = ((t - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam state: per-parameter first/second moments plus the step counter.
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(schedule: LrSchedule) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One Adam update over every parameter that has a gradient in `grads`.
    /// The learning rate comes from the schedule at the pre-increment step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            debug_assert_eq!(g.len(), tensor.numel(), "grad shape mismatch for {name}");
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let p = tensor.values_mut();
            for i in 0..g.len() {
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g[i];
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        let mut adam = AdamState::new(LrSchedule::constant(1e-3));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0]);
        for _ in 0..3 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn warmup_step0_uses_warmup_lr() {
        let sched = LrSchedule { base_lr: 1e-3, warmup_lr: 5e-4, warmup_steps: 8, total_steps: 128 };
        assert_eq!(sched.lr_at(0), 5e-4);
        assert!((sched.lr_at(8) - 1e-3).abs() < 1e-15);
        // cosine tail ends at zero
        assert!(sched.lr_at(128) < 1e-12);
    }

    #[test]
    fn matches_scalar_adam_recurrence() {
        // Hand-rolled recurrence for constant gradient 1.0, lr 0.1.
        let lr = 0.1;
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let mut w_ref = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * 1.0;
            v = b2 * v + (1.0 - b2) * 1.0;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w_ref -= lr * mhat / (vhat.sqrt() + eps);
        }

        let mut params = single_param(0.7);
        let mut adam = AdamState::new(LrSchedule::constant(lr));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        for _ in 0..3 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert!((params.get("w").unwrap().item() - w_ref).abs() < 1e-12);
    }
}
