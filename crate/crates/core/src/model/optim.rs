use serde::{Deserialize, Serialize};

use super::ScorerParams;
use crate::error::{Error, Result};

/// `lr_min + ½(lr0 - lr_min)(1 + cos(π · min(step, total) / total))`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr0: 3e-6,
            lr_min: 8e-7,
            total_steps: 7000,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    /// First and second moments, one vector per trainable tensor.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ScorerParams, hyper: AdamHyper) -> Self {
        let zeros: Vec<Vec<f64>> = params.trainable().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            hyper,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.hyper.total_steps, self.hyper.lr0, self.hyper.lr_min)
    }
}

/// One decoupled-decay step:
/// `p ← p - lr (m̂ / (sqrt(v̂) + ε) + wd · p)`, then the temperatures are
/// clamped. Returns the learning rate used.
pub fn adamw_step(params: &mut ScorerParams, grads: &ScorerParams, state: &mut AdamState) -> Result<f64> {
    let g = grads.trainable();
    let shapes_ok = g.len() == state.m.len()
        && g.iter().zip(&state.m).zip(&state.v).all(|(((_, t), m), v)| t.len() == m.len() && t.len() == v.len())
        && params.trainable().iter().zip(&g).all(|((_, p), (_, t))| p.len() == t.len());
    if !shapes_ok {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    let h = state.hyper;
    let lr = state.current_lr();
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powf(state.step as f64);
    let bc2 = 1.0 - h.beta2.powf(state.step as f64);
    for (((_, p), (_, gt)), (m, v)) in params
        .trainable_mut()
        .into_iter()
        .zip(g)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * gt[k];
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * gt[k] * gt[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * (mh / (vh.sqrt() + h.eps) + h.weight_decay * p[k]);
        }
    }
    params.clamp_scales();
    Ok(lr)
}
