//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Param};

pub const DEFAULT_LR: f64 = 5e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Mat::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        AdamState {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter from its accumulated gradient.
    /// Frozen rows are left untouched.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Parameter(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value.shape() != m.shape() {
                return Err(Error::shape("adam_step", m.shape(), p.value.shape()));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let cols = p.value.cols();
            let frozen = p.frozen_rows.clone();
            let grads = p.grad.data().to_vec();
            let values = p.value.data_mut();
            for (idx, g) in grads.into_iter().enumerate() {
                if !frozen.is_empty() && frozen.contains(&(idx / cols)) {
                    continue;
                }
                let mi = &mut m.data_mut()[idx];
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                let vi = &mut v.data_mut()[idx];
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = m.data()[idx] / bc1;
                let v_hat = v.data()[idx] / bc2;
                values[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
