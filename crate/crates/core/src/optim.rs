//! Optimizers and learning-rate schedules.

use std::collections::HashMap;

use distill_tensor::{Grads, Param, Storage, TensorId};

use crate::error::{Error, Result};
use crate::params::Params;

pub trait Optimizer: Send {
    /// Update every parameter that has a gradient in `grads`.
    fn step(&mut self, grads: &Grads) -> Result<()>;
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

/// Builds an optimizer over a concrete parameter list.
pub trait OptimizerBuilder: Send + Sync {
    fn build(&self, params: Vec<Param>) -> Box<dyn Optimizer>;
    fn base_lr(&self) -> f64;
}

fn positive(p: &Params, key: &str, default: Option<f64>) -> Result<f64> {
    let v: f64 = match default {
        Some(d) => p.get_or(key, d)?,
        None => p.require(key)?,
    };
    if !(v >= 0.0) || !v.is_finite() {
        return Err(Error::InvalidParam {
            name: key.into(),
            message: format!("must be a non-negative number, got {v}"),
        });
    }
    Ok(v)
}

fn apply(param: &Param, values: Vec<f64>) -> Result<()> {
    param.set_storage(Storage::from_f64(param.dtype(), &values))?;
    Ok(())
}

/// SGD with momentum, dampening, Nesterov and L2 weight decay (PyTorch semantics).
#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub dampening: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn from_params(p: &Params) -> Result<Self> {
        p.expect_only(&["lr", "momentum", "dampening", "weight_decay", "nesterov"])?;
        Ok(SgdConfig {
            lr: positive(p, "lr", None)?,
            momentum: positive(p, "momentum", Some(0.0))?,
            dampening: positive(p, "dampening", Some(0.0))?,
            weight_decay: positive(p, "weight_decay", Some(0.0))?,
            nesterov: p.get_or("nesterov", false)?,
        })
    }
}

impl OptimizerBuilder for SgdConfig {
    fn build(&self, params: Vec<Param>) -> Box<dyn Optimizer> {
        Box::new(Sgd { cfg: self.clone(), params, momentum: HashMap::new() })
    }
    fn base_lr(&self) -> f64 {
        self.lr
    }
}

pub struct Sgd {
    cfg: SgdConfig,
    params: Vec<Param>,
    momentum: HashMap<TensorId, Vec<f64>>,
}

impl Optimizer for Sgd {
    fn step(&mut self, grads: &Grads) -> Result<()> {
        let c = &self.cfg;
        for p in &self.params {
            let Some(g) = grads.get_id(p.id()) else { continue };
            let w = p.value().to_vec_f64();
            let mut d = g.to_vec_f64();
            if c.weight_decay != 0.0 {
                d.iter_mut().zip(&w).for_each(|(d, w)| *d += c.weight_decay * w);
            }
            if c.momentum != 0.0 {
                let buf = match self.momentum.get_mut(&p.id()) {
                    Some(buf) => {
                        buf.iter_mut().zip(&d).for_each(|(b, d)| *b = c.momentum * *b + (1.0 - c.dampening) * d);
                        buf
                    }
                    None => self.momentum.entry(p.id()).or_insert_with(|| d.clone()),
                };
                if c.nesterov {
                    d.iter_mut().zip(buf.iter()).for_each(|(d, b)| *d += c.momentum * b);
                } else {
                    d.copy_from_slice(buf);
                }
            }
            apply(p, w.iter().zip(&d).map(|(w, d)| w - c.lr * d).collect())?;
        }
        Ok(())
    }
    fn lr(&self) -> f64 {
        self.cfg.lr
    }
    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn from_params(p: &Params) -> Result<Self> {
        p.expect_only(&["lr", "betas", "eps", "weight_decay"])?;
        Ok(AdamConfig {
            lr: positive(p, "lr", Some(1e-3))?,
            betas: p.get_or("betas", [0.9, 0.999])?,
            eps: positive(p, "eps", Some(1e-8))?,
            weight_decay: positive(p, "weight_decay", Some(0.0))?,
        })
    }
}

impl OptimizerBuilder for AdamConfig {
    fn build(&self, params: Vec<Param>) -> Box<dyn Optimizer> {
        Box::new(Adam { cfg: self.clone(), params, state: HashMap::new() })
    }
    fn base_lr(&self) -> f64 {
        self.lr
    }
}

pub struct Adam {
    cfg: AdamConfig,
    params: Vec<Param>,
    state: HashMap<TensorId, (u64, Vec<f64>, Vec<f64>)>,
}

impl Optimizer for Adam {
    fn step(&mut self, grads: &Grads) -> Result<()> {
        let c = &self.cfg;
        let [b1, b2] = c.betas;
        for p in &self.params {
            let Some(g) = grads.get_id(p.id()) else { continue };
            let w = p.value().to_vec_f64();
            let mut d = g.to_vec_f64();
            if c.weight_decay != 0.0 {
                d.iter_mut().zip(&w).for_each(|(d, w)| *d += c.weight_decay * w);
            }
            let (t, m, v) = self.state.entry(p.id()).or_insert_with(|| (0, vec![0.0; d.len()], vec![0.0; d.len()]));
            *t += 1;
            let bc1 = 1.0 - b1.powi(*t as i32);
            let bc2 = 1.0 - b2.powi(*t as i32);
            let mut out = w;
            for i in 0..d.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * d[i];
                v[i] = b2 * v[i] + (1.0 - b2) * d[i] * d[i];
                out[i] -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
            apply(p, out)?;
        }
        Ok(())
    }
    fn lr(&self) -> f64 {
        self.cfg.lr
    }
    fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

/// Learning rate as a function of progress.
pub trait LrScheduler: Send + Sync {
    /// Rate for 0-based `epoch` (and `step` within the stage for step-wise schedules).
    fn lr_at(&self, base_lr: f64, epoch: usize, step: usize) -> f64;

    /// Step-wise schedules are consulted every iteration, others once per epoch.
    fn per_step(&self) -> bool {
        false
    }
}

pub struct MultiStepLr {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrScheduler for MultiStepLr {
    fn lr_at(&self, base: f64, epoch: usize, _: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base * self.gamma.powi(passed as i32)
    }
}

pub struct StepLr {
    pub step_size: usize,
    pub gamma: f64,
}

impl LrScheduler for StepLr {
    fn lr_at(&self, base: f64, epoch: usize, _: usize) -> f64 {
        base * self.gamma.powi((epoch / self.step_size.max(1)) as i32)
    }
}

pub struct CosineAnnealingLr {
    pub t_max: usize,
    pub eta_min: f64,
}

impl LrScheduler for CosineAnnealingLr {
    fn lr_at(&self, base: f64, epoch: usize, _: usize) -> f64 {
        let t = epoch.min(self.t_max) as f64 / self.t_max.max(1) as f64;
        self.eta_min + (base - self.eta_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    }
}

/// Linear warm-up over the first `warmup_steps` iterations, then constant.
pub struct LinearWarmup {
    pub warmup_steps: usize,
}

impl LrScheduler for LinearWarmup {
    fn lr_at(&self, base: f64, _: usize, step: usize) -> f64 {
        if step >= self.warmup_steps {
            base
        } else {
            base * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
    fn per_step(&self) -> bool {
        true
    }
}
