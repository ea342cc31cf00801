//! Adam with a warmup + linear-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const DEFAULT_PEAK_LR: f64 = 7.5e-5;

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_updates`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_updates: usize,
    pub warmup_updates: usize,
}

impl LrSchedule {
    /// Warmup takes a tenth of the updates (at least one).
    pub fn new(peak_lr: f64, total_updates: usize) -> Self {
        Self {
            peak_lr,
            total_updates,
            warmup_updates: (total_updates / 10).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_updates == 0 {
            return Err(Error::invalid("schedule needs at least one update"));
        }
        if self.warmup_updates == 0 || self.warmup_updates > self.total_updates {
            return Err(Error::invalid(format!(
                "warmup_updates {} must lie in [1, {}]",
                self.warmup_updates, self.total_updates
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::invalid(format!("peak_lr {} must be positive", self.peak_lr)));
        }
        Ok(())
    }

    /// Learning rate for the 1-based update index `step`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step == 0 || step > self.total_updates {
            return Err(Error::invalid(format!(
                "step {step} outside [1, {}]",
                self.total_updates
            )));
        }
        let (w, n) = (self.warmup_updates, self.total_updates);
        if step <= w {
            return Ok(self.peak_lr * step as f64 / w as f64);
        }
        if n == w {
            return Ok(self.peak_lr);
        }
        Ok(self.peak_lr * (n - step) as f64 / (n - w) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected update using the gradients currently in `store`.
    /// `step_index` is 1-based.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, step_index: usize) -> Result<()> {
        if step_index == 0 {
            return Err(Error::invalid("adam step_index must be >= 1"));
        }
        if store.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer sized for {} params, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(step_index as i32);
        let bc2 = 1.0 - beta2.powi(step_index as i32);
        let (values, grads) = store.split_mut();
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("x", &[1], vec![v]).unwrap();
        s.grads_mut()[0] = g;
        s
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(DEFAULT_PEAK_LR, 1000);
        assert_eq!(s.warmup_updates, 100);
        assert_eq!(s.lr_at(100).unwrap(), 7.5e-5);
        assert_eq!(s.lr_at(1000).unwrap(), 0.0);
        assert!((s.lr_at(50).unwrap() - 7.5e-5 / 2.0).abs() < 1e-20);
        assert!(s.lr_at(1).unwrap() > 0.0);
        assert!(s.lr_at(0).is_err());
        assert!(s.lr_at(1001).is_err());
    }

    #[test]
    fn schedule_continuous_at_peak() {
        let s = LrSchedule::new(1.0, 200);
        let before = s.lr_at(19).unwrap();
        let peak = s.lr_at(20).unwrap();
        let after = s.lr_at(21).unwrap();
        assert_eq!(peak, 1.0);
        assert!(before < peak && after < peak);
        assert!((peak - before - 1.0 / 20.0).abs() < 1e-12);
        assert!((peak - after - 1.0 / 180.0).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = scalar_store(1.25, 0.0);
        let mut adam = Adam::new(AdamConfig::default(), 1);
        for k in 1..=5 {
            adam.step(&mut s, 0.1, k).unwrap();
        }
        assert_eq!(s.values(), &[1.25]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        // m̂ = g, v̂ = g² at step 1, so Δ = -lr·g/(|g| + eps)
        let mut s = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = Adam::new(cfg, 1);
        adam.step(&mut s, 0.1, 1).unwrap();
        let want = -0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        assert!((s.values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut s = scalar_store(0.0, 2.0);
        let mut adam = Adam::new(AdamConfig::default(), 1);
        adam.step(&mut s, 0.01, 1).unwrap();
        let after1 = s.values()[0];
        adam.step(&mut s, 0.01, 2).unwrap();
        let after2 = s.values()[0];
        assert!(after1 < 0.0 && after2 < after1);
    }

    #[test]
    fn step_zero_rejected() {
        let mut s = scalar_store(0.0, 1.0);
        let mut adam = Adam::new(AdamConfig::default(), 1);
        assert!(adam.step(&mut s, 0.1, 0).is_err());
    }
}
