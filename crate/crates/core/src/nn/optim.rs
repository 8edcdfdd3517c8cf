use serde::{Deserialize, Serialize};

use super::{Gradients, Mlp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the weight-matrix gradients (not biases or
    /// batchnorm parameters).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("Adam betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::param("Adam eps must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Adam state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        let g = grads.slices();
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let mut params = net.params_mut();
        if params.len() != g.len() || params.iter().zip(&g).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::dim("gradients do not match the network's parameters"));
        }
        if self.m.is_empty() {
            self.m = g.iter().map(|s| vec![0.0; s.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        // weight matrices are the first slice of each layer group
        let mut is_weight = Vec::with_capacity(g.len());
        for l in &grads.layers {
            is_weight.push(true);
            is_weight.push(false);
            if !l.bn_gamma.is_empty() {
                is_weight.push(false);
                is_weight.push(false);
            }
        }
        for (k, (p, gk)) in params.iter_mut().zip(&g).enumerate() {
            let decay = if is_weight[k] { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                let gi = gk[i] + decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
