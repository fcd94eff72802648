//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, weight_decay: 1e-9 }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0f32; t.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update; moments and arithmetic in f64, storage in f32.
pub fn adamw_step(
    store: &mut ParamStore<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients / {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        if grads[i].shape() != p.shape() {
            return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", grads[i].shape(), p.shape())));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), mj), vj) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let mn = cfg.beta1 * *mj as f64 + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * *vj as f64 + (1.0 - cfg.beta2) * g * g;
            *mj = mn as f32;
            *vj = vn as f32;
            let (mh, vh) = (mn / c1, vn / c2);
            let wf = *w as f64;
            *w = (wf - lr * (mh / (vh.sqrt() + ADAM_EPS) + cfg.weight_decay * wf)) as f32;
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then cosine decay
/// reaching `lr_min` at step `total - 1`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if step == warmup || span == 0 {
        return lr_max;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}
