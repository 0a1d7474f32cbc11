//! Adam with decoupled weight decay and global-norm clipping, shared by the
//! toy-model trainer and the MLP probes.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { config, vars, first, second, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0f64;
        let mut gs = Vec::with_capacity(self.vars.len());
        for var in &self.vars {
            // detached so the moments do not keep this step's graph alive
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.zeros_like()?,
            };
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            gs.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient norm at step {}", self.step + 1)));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let g = (&gs[i] * scale)?;
            let m = ((&self.first[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + c.eps)?)?;
            let current = var.as_tensor().detach();
            let mut next = (&current - (update * c.lr)?)?;
            if c.weight_decay > 0.0 {
                next = (next - (&current * (c.lr * c.weight_decay))?)?;
            }
            var.set(&next)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(norm)
    }
}
