use crate::error::{Error, Result};

use super::autograd::Gradients;
use super::params::ParamStore;
use super::tensor::{no_grad, round_storage};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Bias-corrected Adam over every tensor of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Adam {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|p| p.zeros_like()).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Adam {
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let _ng = no_grad();
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        // look every gradient up before touching state
        let mut gs = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let g = grads.get(p).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            gs.push(g.clone());
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in gs.iter().enumerate() {
            let p = &params.tensors()[i];
            let mut m = self.first[i].to_vec();
            let mut v = self.second[i].to_vec();
            let mut w = p.to_vec();
            for (((mj, vj), wj), &gj) in m.iter_mut().zip(v.iter_mut()).zip(w.iter_mut()).zip(g.data()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *wj -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            round_storage(&mut m);
            round_storage(&mut v);
            let shape = p.shape().to_vec();
            self.first[i] = Tensor::raw(m, &shape);
            self.second[i] = Tensor::raw(v, &shape);
            params.replace(i, Tensor::new(w, &shape)?);
        }
        Ok(())
    }
}
