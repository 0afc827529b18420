//! Optimisation loop and evaluation.

pub mod metrics;
pub mod optim;
mod trainer;

pub use metrics::{ClassStats, MetricsReport, TaskMetrics};
pub use optim::{clip_grads, ema_decay, ema_update, lr_at, scale_grads, AdamW, AdamWConfig, EarlyStopper, StopDecision};
pub use trainer::{
    class_weights_for, encode_sample, encode_split, encoder_bank, mix_clips, mixup_pairs, micro_step, predict, train,
    EncodedSplit, Predictions, TrainOutcome,
};

use crate::chain::Task;
use crate::error::{CaupsiError, Result};
use crate::objective::LossConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub weight_decay: f64,
    pub ema_beta: f64,
    /// Use `min(beta, (1+t)/(10+t))` as the decay at optimizer step `t`.
    pub ema_warmup: bool,
    /// Beta(alpha, alpha) mixing; 0 disables mixup.
    pub mixup_alpha: f64,
    pub clip_norm: f64,
    pub patience: usize,
    pub flip_p: f64,
    pub lambda: [f64; 4],
    pub label_smoothing: f64,
    pub gamma_adv: f64,
    pub lambda_grl: f64,
    pub domain_k_min: usize,
    pub domain_k_max: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 3e-4,
            lr_min: 1e-6,
            warmup_epochs: 5,
            max_epochs: 100,
            batch_size: 16,
            accum_steps: 4,
            weight_decay: 1e-4,
            ema_beta: 0.999,
            ema_warmup: true,
            mixup_alpha: 0.2,
            clip_norm: 5.0,
            patience: 20,
            flip_p: 0.5,
            lambda: [1.0, 1.0, 1.5, 2.0],
            label_smoothing: 0.1,
            gamma_adv: 0.5,
            lambda_grl: 0.1,
            domain_k_min: 2,
            domain_k_max: 8,
            eval_batch: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CaupsiError::Config(m));
        if !(self.lr_max > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_max {
            return bad(format!("learning rates {}..{} invalid", self.lr_min, self.lr_max));
        }
        if self.max_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return bad(format!("warmup {} must be below max_epochs {}", self.warmup_epochs, self.max_epochs));
        }
        if self.batch_size == 0 || self.accum_steps == 0 || self.patience == 0 || self.eval_batch == 0 {
            return bad("batch_size, accum_steps, patience and eval_batch must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return bad(format!("ema_beta {} outside [0,1]", self.ema_beta));
        }
        if !(self.mixup_alpha >= 0.0) || !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("mixup_alpha, clip_norm and weight_decay must be non-negative (clip_norm positive)".into());
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return bad(format!("flip_p {} outside [0,1]", self.flip_p));
        }
        if self.domain_k_min < 2 || self.domain_k_min > self.domain_k_max {
            return bad(format!("domain k range {}..={} invalid", self.domain_k_min, self.domain_k_max));
        }
        self.loss_config(Task::ALL.map(|t| vec![1.0; t.num_classes()])).validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr_max, self.lr_min, self.warmup_epochs, self.max_epochs)
    }

    pub fn loss_config(&self, class_weights: [Vec<f64>; 4]) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            epsilon: self.label_smoothing,
            gamma_adv: self.gamma_adv,
            lambda_grl: self.lambda_grl,
            class_weights,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}
