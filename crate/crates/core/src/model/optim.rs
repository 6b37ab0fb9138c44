//! AdamW with decoupled weight decay, global-norm clipping and a
//! warmup-then-cosine learning rate.

use crate::error::{PhmError, Result};

use super::config::OptimConfig;
use super::transformer::{ParamClass, ToyModel, Trainable};

/// Learning rate at `step` of a `total`-step run.
pub fn lr_at(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = (cfg.warmup_frac * total as f64).ceil() as usize;
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub struct AdamW {
    cfg: OptimConfig,
    trainable: Trainable,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, model: &ToyModel, trainable: Trainable) -> Self {
        let mut m = Vec::new();
        model.for_each_param(&mut |_, class, s| {
            m.push(if trainable.contains(class) { vec![0.0; s.len()] } else { Vec::new() });
        });
        let v = m.clone();
        Self { cfg, trainable, m, v, t: 0 }
    }

    pub fn trainable(&self) -> Trainable {
        self.trainable
    }

    /// Applies one update with learning rate `lr`. Refuses non-finite
    /// gradients without touching the model.
    pub fn step(&mut self, model: &mut ToyModel, grads: &ToyModel, lr: f64) -> Result<StepInfo> {
        let mut gs: Vec<(ParamClass, &[f64])> = Vec::new();
        grads.for_each_param(&mut |_, class, s| gs.push((class, s)));
        let mut sq = 0.0;
        for (class, g) in &gs {
            if self.trainable.contains(*class) {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(PhmError::Numeric(format!("non-finite gradient norm at optimizer step {}", self.t + 1)));
        }
        let clipped = grad_norm > self.cfg.clip_norm;
        let clip = if clipped { self.cfg.clip_norm / grad_norm } else { 1.0 };

        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut k = 0;
        let (ms, vs, trainable) = (&mut self.m, &mut self.v, self.trainable);
        model.for_each_param_mut(&mut |_, class, p| {
            let idx = k;
            k += 1;
            if !trainable.contains(class) {
                return;
            }
            let g = gs[idx].1;
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            for j in 0..p.len() {
                let gj = g[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        });
        Ok(StepInfo { lr, grad_norm, clipped })
    }
}
