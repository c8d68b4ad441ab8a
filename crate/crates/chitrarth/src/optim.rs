//! Adam with bias correction and the cosine learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-parameter optimizer state. `step_count` increases by exactly one per
/// update; `m` and `v` mirror the parameter's length.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    states: BTreeMap<String, AdamState>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            states: BTreeMap::new(),
        }
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    /// Bias-corrected in-place update for one named parameter. The gradient
    /// is left untouched; the caller clears it.
    pub fn step(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f32) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![param.len()],
                rhs: vec![grad.len()],
            });
        }
        let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState {
            step_count: 0,
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        if state.m.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![param.len()],
                rhs: vec![state.m.len()],
            });
        }
        state.step_count += 1;
        let t = state.step_count as i32;
        let bc1 = (1.0 - (self.beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (self.beta2 as f64).powi(t)) as f32;
        for i in 0..param.len() {
            let g = grad[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Cosine schedule with a linear warmup ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.min_lr && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!(
                "schedule requires 0 <= min_lr <= peak_lr, got min {} peak {}",
                self.min_lr, self.peak_lr
            )));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "schedule requires warmup_steps < total_steps, got {}/{}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear 0→peak ramp over the warmup, then cosine decay from peak to min.
/// Steps past `total_steps` clamp to `min_lr`.
pub fn cosine_lr(schedule: &LrSchedule, step: usize) -> f64 {
    if step > schedule.total_steps {
        return schedule.min_lr;
    }
    if step < schedule.warmup_steps {
        return schedule.peak_lr * step as f64 / schedule.warmup_steps as f64;
    }
    let progress = (step - schedule.warmup_steps) as f64 / (schedule.total_steps - schedule.warmup_steps) as f64;
    schedule.min_lr + 0.5 * (schedule.peak_lr - schedule.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(peak: f64, min: f64, warmup: usize, total: usize) -> LrSchedule {
        LrSchedule {
            peak_lr: peak,
            min_lr: min,
            warmup_steps: warmup,
            total_steps: total,
        }
    }

    #[test]
    fn cosine_hits_peak_half_and_min() {
        let s = schedule(2e-3, 0.0, 0, 100);
        assert_eq!(cosine_lr(&s, 0), 2e-3);
        assert!((cosine_lr(&s, 50) - 1e-3).abs() < 1e-12);
        assert!(cosine_lr(&s, 100).abs() < 1e-12);
    }

    #[test]
    fn cosine_respects_min_lr_and_clamps() {
        let s = schedule(1e-2, 1e-4, 0, 10);
        assert_eq!(cosine_lr(&s, 10), 1e-4);
        assert_eq!(cosine_lr(&s, 999), 1e-4);
    }

    #[test]
    fn warmup_ramps_linearly_to_peak() {
        let s = schedule(1.0, 0.0, 10, 100);
        assert_eq!(cosine_lr(&s, 0), 0.0);
        assert!((cosine_lr(&s, 5) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_lr(&s, 10), 1.0);
    }

    #[test]
    fn schedule_validation_rejects_bad_ranges() {
        assert!(schedule(1.0, 2.0, 0, 10).validate().is_err());
        assert!(schedule(1.0, 0.0, 10, 10).validate().is_err());
        assert!(schedule(1.0, 0.0, 0, 10).validate().is_ok());
    }

    #[test]
    fn first_step_matches_hand_computed_update() {
        // param 0, grad 1, lr 0.1: m̂ = 1, v̂ = 1 after bias correction, so
        // the update is -0.1 / (1 + 1e-8).
        let mut adam = Adam::default();
        let mut p = [0.0f32];
        adam.step("p", &mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] - (-0.1)).abs() < 1e-6, "got {}", p[0]);
        assert_eq!(adam.state("p").unwrap().step_count, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut adam = Adam::default();
        let mut p = [0.5f32, -1.25, 3.75];
        let before = p;
        adam.step("p", &mut p, &[0.0, 0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut adam = Adam::default();
        let mut a = [0.3f32, -0.7];
        let mut b = [0.3f32, -0.7];
        let g = [0.11f32, -0.04];
        adam.step("a", &mut a, &g, 0.01).unwrap();
        adam.step("b", &mut b, &g, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_count_advances_per_update() {
        let mut adam = Adam::default();
        let mut p = [1.0f32];
        for expected in 1..=3 {
            adam.step("p", &mut p, &[0.1], 0.01).unwrap();
            assert_eq!(adam.state("p").unwrap().step_count, expected);
        }
    }
}
