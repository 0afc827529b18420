use std::collections::BTreeMap;

use crate::error::{CaupsiError, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

/// Learning rate for epoch `e`: linear warmup over `warmup` epochs, then cosine
/// decay from `lr_max` to `lr_min` at epoch `total`.
pub fn lr_at(e: usize, lr_max: f64, lr_min: f64, warmup: usize, total: usize) -> f64 {
    if e < warmup {
        return lr_max * (e + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let prog = ((e - warmup) as f64 / span).min(1.0);
    lr_min + (lr_max - lr_min) / 2.0 * (1.0 + (std::f64::consts::PI * prog).cos())
}

/// `shadow <- beta * shadow + (1 - beta) * params` over trainable entries.
pub fn ema_update<F: Scalar>(shadow: &mut ParamStore<F>, params: &ParamStore<F>, beta: f64) -> Result<()> {
    let b = F::lit(beta);
    let c = F::lit(1.0 - beta);
    for (path, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let s = shadow.get_mut(path)?;
        if s.shape() != p.tensor.shape() {
            return Err(CaupsiError::Shape(format!("EMA shadow of '{path}' has shape {:?}", s.shape())));
        }
        s.data_mut().iter_mut().zip(p.tensor.data()).for_each(|(s, &x)| *s = b * *s + c * x);
    }
    Ok(())
}

/// Decay for optimizer step `t` (0-based): `min(beta, (1 + t) / (10 + t))` when warming up.
pub fn ema_decay(beta: f64, step: u64, warmup: bool) -> f64 {
    if warmup {
        beta.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        beta
    }
}

/// Scales all trainable gradients so their global norm is at most `max_norm`.
/// Returns the applied scale.
pub fn clip_grads<F: Scalar>(store: &mut ParamStore<F>, max_norm: f64) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        let bad = store
            .iter()
            .find(|(_, p)| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.to_f64_lossy().is_finite())))
            .map(|(k, _)| k.clone())
            .unwrap_or_default();
        return Err(CaupsiError::Numeric(format!("non-finite gradient norm (first offending entry '{bad}')")));
    }
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    scale_grads(store, scale);
    Ok(scale)
}

pub fn scale_grads<F: Scalar>(store: &mut ParamStore<F>, scale: f64) {
    let s = F::lit(scale);
    for (_, p) in store.iter_mut() {
        if let Some(g) = p.tensor.grad_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter path.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every trainable entry that holds a gradient.
    pub fn step<F: Scalar>(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (path, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(|g| g.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let w = x.to_f64_lossy();
                *x = F::lit(w * (1.0 - lr * c.weight_decay) - lr * upd);
            }
        }
    }
}

/// Stops after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        let improved = metric > self.best;
        if improved {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}
