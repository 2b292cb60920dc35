//! Adaptive-moment optimizer for the denoiser's named parameters.
//!
//! Moments are kept in f64; parameters round back to their f32 storage after
//! each step. A zero gradient on a fresh state moves nothing, which training
//! relies on for exact distillation fixed points.

use std::collections::BTreeMap;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Changes the learning rate for subsequent updates (schedules).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One bias-corrected update of every parameter in place.
    pub fn update(&mut self, model: &mut Denoiser, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, param) in model.params_mut().iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch { expected: vec![param.len()], got: vec![0] })?;
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    expected: param.shape().to_vec(),
                    got: grad.shape().to_vec(),
                });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.data()[i] as f64;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = data[i] as f64 - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                data[i] = theta as f32;
            }
        }
        Ok(())
    }
}
