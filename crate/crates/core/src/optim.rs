//! First-order update rules shared by the distillation step and the
//! adaptive-server baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config(format!(
                    "adam requires 0 <= beta < 1 and eps > 0, got ({beta1}, {beta2}, {eps})"
                )));
            }
        }
        Ok(())
    }

    pub fn build(&self, dim: usize) -> Optimizer {
        match *self {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => Optimizer::Adam(Adam::new(beta1, beta2, eps, dim)),
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, dim: usize) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => sgd_step(params, grad, lr),
            Optimizer::Adam(adam) => adam.step(params, grad, lr),
        }
    }
}

pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}
