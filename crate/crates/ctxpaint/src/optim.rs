//! AdamW with decoupled weight decay and exportable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One optimised variable and its learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub var: Var,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update; variables without a gradient see a zero gradient.
    pub fn step(&mut self, params: &[ParamGroup], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for p in params {
            let theta = p.var.as_tensor();
            let g = match grads.get(theta) {
                Some(g) => g.detach(),
                None => theta.zeros_like()?,
            };
            let (m, v) = match self.moments.get(&p.name) {
                Some(mv) => mv.clone(),
                None => (theta.zeros_like()?, theta.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let decayed = (theta.detach() * (1.0 - p.lr * c.weight_decay))?;
            p.var.set(&(decayed - (update * p.lr)?)?.detach())?;
            self.moments.insert(p.name.clone(), (m, v));
        }
        Ok(())
    }

    /// `(name, tensor)` pairs, first moments under `m/`, second under `v/`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for (name, (m, v)) in &self.moments {
            out.push((format!("m/{name}"), m.clone()));
            out.push((format!("v/{name}"), v.clone()));
        }
        out
    }

    pub fn restore(config: AdamWConfig, step: u64, state: Vec<(String, Tensor)>) -> Result<Self> {
        let mut firsts = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for (key, t) in state {
            match key.split_once('/') {
                Some(("m", name)) => firsts.insert(name.to_string(), t),
                Some(("v", name)) => seconds.insert(name.to_string(), t),
                _ => {
                    return Err(Error::Config(format!(
                        "unexpected optimizer state entry `{key}`"
                    )))
                }
            };
        }
        let mut moments = BTreeMap::new();
        for (name, m) in firsts {
            let v = seconds
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("optimizer state lacks v/{name}")))?;
            moments.insert(name, (m, v));
        }
        if let Some(name) = seconds.keys().next() {
            return Err(Error::Config(format!("optimizer state lacks m/{name}")));
        }
        Ok(Self {
            config,
            step,
            moments,
        })
    }
}
