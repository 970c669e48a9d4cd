use alloc::string::String;
use alloc::vec::Vec;

use super::model::{loss_and_grads, ModelParams, ToyModelConfig};
use super::tasks::Sample;
use crate::error::{Error, Result};
use crate::numerics::fmath;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHyper {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Truncated backpropagation over chunks of this many positions.
    pub chunk_len: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 3e-3,
            min_lr_ratio: 0.1,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip: 1.0,
            chunk_len: None,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and clip must be positive, weight_decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)"));
        }
        if self.chunk_len == Some(0) {
            return Err(Error::Config("chunk_len must be positive"));
        }
        Ok(())
    }

    /// Linear warm-up, then cosine decay to `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup.min(self.steps / 2);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        let min = self.lr * self.min_lr_ratio;
        min + 0.5 * (self.lr - min) * (1.0 + fmath::cos(core::f64::consts::PI * progress))
    }
}

/// Parameters, AdamW moments, step counter and loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// Clips `grads`, then applies one decoupled-weight-decay Adam update.
    pub fn apply(&mut self, hyper: &TrainHyper, mut grads: ModelParams, loss: f64) -> Result<StepStats> {
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let norm = fmath::sqrt(grads.sq_norm());
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        if norm > hyper.clip {
            let s = hyper.clip / norm;
            for b in grads.buffers_mut() {
                for g in b.iter_mut() {
                    *g *= s;
                }
            }
        }
        let lr = hyper.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - fmath::pow(hyper.beta1, t);
        let bc2 = 1.0 - fmath::pow(hyper.beta2, t);
        let decay: Vec<bool> = self.params.views().iter().map(|v| v.decay).collect();
        let gviews = grads.views();
        let ps = self.params.buffers_mut();
        let ms = self.m.buffers_mut();
        let vs = self.v.buffers_mut();
        for ((((p, m), v), g), dec) in ps.into_iter().zip(ms).zip(vs).zip(gviews).zip(decay) {
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
                if dec {
                    p[i] -= lr * hyper.weight_decay * p[i];
                }
                p[i] -= lr * (m[i] / bc1) / (fmath::sqrt(v[i] / bc2) + hyper.eps);
            }
        }
        self.loss_history.push(loss);
        Ok(StepStats {
            loss,
            lr,
            grad_norm: norm,
        })
    }
}

/// Mean loss and gradient over a batch, accumulated in order.
pub fn batch_grads(
    cfg: &ToyModelConfig,
    params: &ModelParams,
    batch: &[Sample],
    chunk_len: Option<usize>,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch"));
    }
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for s in batch {
        let (l, g) = loss_and_grads(cfg, params, &s.tokens, &s.targets, &s.weights, chunk_len)?;
        loss += l;
        total.add_scaled(1.0, &g);
    }
    let inv = 1.0 / batch.len() as f64;
    for b in total.buffers_mut() {
        for g in b.iter_mut() {
            *g *= inv;
        }
    }
    Ok((loss * inv, total))
}

/// One single-threaded optimization step on `batch`.
pub fn train_step(
    cfg: &ToyModelConfig,
    state: &mut TrainState,
    hyper: &TrainHyper,
    batch: &[Sample],
) -> Result<StepStats> {
    let (loss, grads) = batch_grads(cfg, &state.params, batch, hyper.chunk_len)?;
    state.apply(hyper, grads, loss)
}

/// Per-buffer gradient norms, for divergence diagnostics.
pub fn grad_norms(grads: &ModelParams) -> Vec<(String, f64)> {
    grads
        .views()
        .into_iter()
        .map(|v| (v.name, fmath::sqrt(v.data.iter().map(|x| x * x).sum())))
        .collect()
}
