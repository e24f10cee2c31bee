//! First-order parameter updates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_finite, check_len, Error, Result};
use crate::math::sqrt;

/// Applies one update in place given a gradient of the loss being minimized.
pub trait Optimizer {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()>;
}

/// Plain gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("gradient", params.len(), grad.len())?;
        check_finite("gradient", grad)?;
        for (p, g) in params.iter_mut().zip(grad) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("gradient", self.m.len(), grad.len())?;
        check_len("parameters", self.m.len(), params.len())?;
        check_finite("gradient", grad)?;
        self.t = self
            .t
            .checked_add(1)
            .ok_or_else(|| Error::domain("Adam step counter overflow"))?;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}
