//! Adam with linear warmup to the configured maximum rate, then constant.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers are keyed by tensor name, so one optimizer instance can
/// drive the student parameters and the projection bank together.
pub struct Adam {
    pub cfg: AdamConfig,
    step_count: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Linear warmup to the maximum rate, constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cfg.warmup_steps == 0 {
            return self.cfg.learning_rate;
        }
        let frac = ((step + 1) as f64 / self.cfg.warmup_steps as f64).min(1.0);
        self.cfg.learning_rate * frac
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    /// One update over named (parameter, gradient) pairs.
    pub fn step(&mut self, tensors: Vec<(String, &mut [f64], &[f64])>) {
        let lr = self.lr_at(self.step_count);
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, param, grad) in tensors {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; param.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; param.len()]);
            for i in 0..param.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * grad[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_linearly_then_holds() {
        let adam = Adam::new(AdamConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..Default::default()
        });
        assert!((adam.lr_at(0) - 0.25).abs() < 1e-12);
        assert!((adam.lr_at(1) - 0.5).abs() < 1e-12);
        assert!((adam.lr_at(3) - 1.0).abs() < 1e-12);
        assert!((adam.lr_at(100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_moves_against_the_gradient() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            warmup_steps: 0,
            ..Default::default()
        });
        let mut p = vec![1.0, -1.0];
        let g = vec![2.0, -3.0];
        adam.step(vec![("p".into(), p.as_mut_slice(), g.as_slice())]);
        assert!(p[0] < 1.0);
        assert!(p[1] > -1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![0.5; 3];
        let g = vec![0.0; 3];
        adam.step(vec![("p".into(), p.as_mut_slice(), g.as_slice())]);
        assert_eq!(p, vec![0.5; 3]);
    }
}
