//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor4>,
    v: Vec<Tensor4>,
    step: u64,
}

impl Adam {
    pub fn new(set: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || set.params().iter().map(|p| Tensor4::zeros(p.value.dims())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; a frozen set is left untouched and the step counter does not advance.
    pub fn step(&mut self, set: &mut ParamSet, grads: &[Tensor4]) -> Result<()> {
        if grads.len() != set.len() || self.m.len() != set.len() {
            return Err(Error::shape("adam_step", &[set.len()], &[grads.len()]));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.dims() != set.get(i).dims() {
                return Err(Error::shape("adam_step", &set.get(i).dims(), &g.dims()));
            }
        }
        if set.frozen {
            return Ok(());
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = set.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
