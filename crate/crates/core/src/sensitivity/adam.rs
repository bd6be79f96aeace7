use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self::with_rates(n, 1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn with_rates(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: alloc::vec![0.0; n], v: alloc::vec![0.0; n] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() {
            return Err(Error::LengthMismatch { expected: self.m.len(), got: theta.len() });
        }
        if grad.len() != self.m.len() {
            return Err(Error::LengthMismatch { expected: self.m.len(), got: grad.len() });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for k in 0..theta.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            theta[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
