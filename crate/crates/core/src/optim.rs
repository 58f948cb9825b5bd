use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParamSet;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) || config.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0 and weight decay >= 0".into()));
        }
        Ok(AdamW { config, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Drops the moment estimates, e.g. after the parameter layout changed.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let mut gs = Vec::new();
        grads.visit("", &mut |_, g| gs.push(g));
        if self.m.len() != gs.len() || self.m.iter().zip(&gs).any(|(m, g)| m.dim() != g.dim()) {
            self.m = gs.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
            self.step = 0;
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let g = gs[idx];
            Zip::from(p).and(g).and(&mut ms[idx]).and(&mut vs[idx]).for_each(|p, &g, m, v| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.learning_rate * (update + c.weight_decay * *p);
            });
            idx += 1;
        });
    }
}
