use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer hyperparameters. Defaults are the reference training settings:
/// Adam, batch 64, beta1 ("momentum") 0.9, learning rate 1e-5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update using each tensor's gradient buffer.
    /// Tensors without a gradient are left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        config: &OptimConfig,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            if self.m.len() <= i {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![m.len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let (data, grad) = p.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
                v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                data[j] -= config.learning_rate * mhat / (vhat.sqrt() + config.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grads: &[f64]) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values.to_vec()).unwrap().with_grad();
        t.accumulate_grad(grads);
        t
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = OptimConfig::default();
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.beta1, 0.9);
        assert_eq!(c.beta2, 0.999);
        assert_eq!(c.batch_size, 64);
        c.validate().unwrap();
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let config = OptimConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut p = param(&[1.0, 1.0, 1.0], &[0.3, -5.0, 1e-3]);
        let mut state = AdamState::new();
        state.step([&mut p], &config).unwrap();
        let d = p.data();
        assert!((d[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((d[1] - (1.0 + 0.01)).abs() < 1e-8);
        assert!((d[2] - (1.0 - 0.01)).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = param(&[0.5, -2.0], &[0.0, 0.0]);
        let before = p.data().to_vec();
        AdamState::new().step([&mut p], &OptimConfig::default()).unwrap();
        assert_eq!(p.data(), before.as_slice());
    }

    #[test]
    fn minimizes_square() {
        let config = OptimConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut w = param(&[1.0], &[0.0]);
        let mut state = AdamState::new();
        let mut last = 1.0f64;
        for _ in 0..10 {
            w.zero_grad();
            let x = w.data()[0];
            w.accumulate_grad(&[2.0 * x]);
            state.step([&mut w], &config).unwrap();
            let now = w.data()[0].abs();
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }

    #[test]
    fn rejects_bad_betas() {
        let c = OptimConfig {
            beta1: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
