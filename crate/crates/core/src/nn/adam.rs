//! Adam optimizer with bias correction.

use alloc::format;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0004,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
    pub cfg: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[Tensor], cfg: AdamConfig) -> Self {
        AdamState {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect(),
            step: 0,
            cfg,
        }
    }

    /// Restores a state from checkpointed moments.
    pub fn from_moments(m: Vec<Tensor>, v: Vec<Tensor>, step: u64, cfg: AdamConfig) -> Self {
        AdamState { m, v, step, cfg }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One Adam update over all parameters in place.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Numeric(format!(
                "adam_step got {} params, {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != grads[i].shape() {
                return Err(Error::Numeric(format!(
                    "adam_step shape mismatch at parameter {}: {:?} vs {:?}",
                    i,
                    p.shape(),
                    grads[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            let gd = grads[i].data();
            for j in 0..pd.len() {
                let g = gd[j] + c.weight_decay * pd[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] -= c.lr * m_hat / (libm::sqrt(v_hat) + c.eps);
            }
        }
        Ok(())
    }
}
