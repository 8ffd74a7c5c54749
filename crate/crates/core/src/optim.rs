//! AdamW with decoupled weight decay over a [`VarSet`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, TensorId};

use crate::params::{ParamSet, ParamSource, VarSet};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.04,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    vars: VarSet,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(vars: &VarSet, cfg: AdamWConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in vars.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
            v.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            cfg,
            vars: vars.clone(),
            step: 0,
            m,
            v,
        })
    }

    /// Restores moment estimates saved by [`AdamW::moments`].
    pub fn from_state(vars: &VarSet, cfg: AdamWConfig, step: u64, m: &ParamSet, v: &ParamSet) -> Result<Self> {
        let mut opt = Self::new(vars, cfg)?;
        opt.step = step;
        for (name, var) in vars.iter() {
            let dims = var.as_tensor().dims();
            opt.m.insert(name.clone(), m.get(name, dims)?);
            opt.v.insert(name.clone(), v.get(name, dims)?);
        }
        Ok(opt)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_weight_decay(&mut self, wd: f64) {
        self.cfg.weight_decay = wd;
    }

    pub fn moments(&self) -> (ParamSet, ParamSet) {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (k, t) in &self.m {
            m.insert(k.clone(), t.clone());
        }
        for (k, t) in &self.v {
            v.insert(k.clone(), t.clone());
        }
        (m, v)
    }

    /// Whether the optimizer can write to the tensor with this id.
    pub fn holds(&self, id: TensorId) -> bool {
        self.vars.iter().any(|(_, v)| v.as_tensor().id() == id)
    }

    /// Biases and normalization gains (rank < 2) are not decayed.
    fn decays(t: &Tensor) -> bool {
        t.rank() >= 2
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, var) in self.vars.iter() {
            // Detached so the moments never keep a step's autograd graph alive.
            let Some(g) = grads.get(var.as_tensor()).map(Tensor::detach) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let m = self.m.get(name).expect("moment exists for every var");
            let v = self.v.get(name).expect("moment exists for every var");
            let m = ((m * self.cfg.beta1)? + (&g * (1.0 - self.cfg.beta1))?)?;
            let v = ((v * self.cfg.beta2)? + (g.sqr()? * (1.0 - self.cfg.beta2))?)?;
            let p = if Self::decays(&p) && self.cfg.weight_decay != 0.0 {
                (p * (1.0 - lr * self.cfg.weight_decay))?
            } else {
                p
            };
            let denom = ((v.sqrt()? / bc2.sqrt())? + self.cfg.eps)?;
            let update = (m.div(&denom)? * (lr / bc1))?;
            var.set(&(p - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
