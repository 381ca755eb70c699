use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Adam first and second moments, shaped like `value`.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Named parameters in insertion order, with Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter `{name}`")));
        }
        let len = value.len();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index
            .get(name)
            .map(|&i| &mut self.entries[i].value)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Clears optimizer state, keeping the parameter values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in &mut self.entries {
            e.m.fill(0.0);
            e.v.fill(0.0);
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            match self.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "gradient for `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Parameter(format!("gradient for unknown `{name}`"))),
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let g = grads.get(&e.name).map(|g| g.data());
            let value = e.value.data_mut();
            for i in 0..value.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * gi;
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                value[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `lr(t) = lr_min + (lr0 - lr_min)(1 + cos(π t / t_max)) / 2`, held at
/// `lr_min` past `t_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(lr0: f64, t_max: usize) -> Self {
        Self {
            lr0,
            lr_min: 0.0,
            t_max,
        }
    }

    pub fn lr(&self, t: usize) -> f64 {
        if self.t_max == 0 {
            return self.lr0;
        }
        if t >= self.t_max {
            return self.lr_min;
        }
        let c = (PI * t as f64 / self.t_max as f64).cos();
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + c)
    }
}
