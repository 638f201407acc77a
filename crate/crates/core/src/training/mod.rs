//! Adversarial training: losses, schedules, Adam, the update step and the
//! resumable run loop.

pub mod losses;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod trainer;

pub use losses::{
    ce_d_loss, ce_g_loss, d_loss, d_loss_value, g_loss, g_loss_value, hinge_d_loss, hinge_g_loss, lsgan_d_loss,
    lsgan_g_loss, LossKind,
};
pub use optim::{grad_norm, Adam};
pub use run::{run_training, RunSpec, RunSummary, METRICS_HEADER};
pub use schedule::{decay_factor, lr_at};
pub use trainer::{train_step, BatchSource, StepMetrics, TrainState, Trainer};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_dis: usize,
    pub batch_d: usize,
    pub batch_g: usize,
    pub total_iters: usize,
    pub decay_last_iters: usize,
    pub seed: u64,
    /// Random horizontal flips of real batches.
    pub hflip: bool,
    pub checkpoint_every: usize,
    pub sample_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

impl TrainConfig {
    /// 32×32 regime: five D steps per G step, G batch twice the D batch,
    /// decay over the whole run.
    pub fn cifar() -> Self {
        Self {
            loss: LossKind::Hinge,
            lr_g: 2e-4,
            lr_d: 2e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            n_dis: 5,
            batch_d: 64,
            batch_g: 128,
            total_iters: 50_000,
            decay_last_iters: 50_000,
            seed: 0,
            hflip: false,
            checkpoint_every: 5_000,
            sample_every: 1_000,
        }
    }

    /// 128×128 regime with two time-scale learning rates.
    pub fn ttur() -> Self {
        Self { lr_g: 1e-4, lr_d: 4e-4, n_dis: 1, batch_d: 32, batch_g: 32, total_iters: 100_000, ..Self::cifar() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_dis == 0 {
            errs.push("n_dis must be at least 1".to_string());
        }
        if self.batch_d == 0 || self.batch_g == 0 {
            errs.push("batch sizes must be positive".into());
        }
        if self.decay_last_iters > self.total_iters {
            errs.push(format!("decay_last_iters {} exceeds total_iters {}", self.decay_last_iters, self.total_iters));
        }
        for (k, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("adam_eps", self.adam_eps)] {
            if !(v.is_finite() && v >= 0.0) {
                errs.push(format!("{k} must be finite and non-negative, got {v}"));
            }
        }
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if self.checkpoint_every == 0 || self.sample_every == 0 {
            errs.push("checkpoint_every and sample_every must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}
