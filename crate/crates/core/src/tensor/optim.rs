use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers follow the store's entry order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = (0..store.len()).map(|i| Tensor::zeros(store.value_at(i).shape())).collect();
        Adam { config, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the store's gradients, then clears them.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for i in 0..store.len() {
            let g = store.grad_at(i).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_at_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// Step count and moment buffers, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.t, &self.m, &self.v)
    }

    pub fn set_state(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        let ok = m.len() == self.m.len()
            && v.len() == self.v.len()
            && m.iter().zip(&self.m).all(|(a, b)| a.shape() == b.shape())
            && v.iter().zip(&self.v).all(|(a, b)| a.shape() == b.shape());
        if !ok {
            return Err(Error::Compatibility("optimizer state shapes differ".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
