//! Channel-wise normalization with running statistics, and the BN / cBN /
//! latent-conditioned cBN layers used outside the SPN sites.

use rand::Rng;

use super::{Cond, Ctx, Mode};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::norm::inv_std;
use crate::params::{normal_tensor, ParamStore};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-channel running mean/variance, updated as
/// `running ← momentum·running + (1 − momentum)·batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    /// Number of train-mode updates folded in so far.
    pub updates: usize,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self::with(channels, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(momentum),
            eps: T::from_f64_lossy(eps),
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= T::zero() {
            return Err(Error::Invalid("epsilon must be positive".into()));
        }
        if !(self.momentum > T::zero() && self.momentum < T::one()) {
            return Err(Error::Invalid("momentum must lie in (0, 1)".into()));
        }
        if self.var.iter().any(|&v| v < T::zero()) {
            return Err(Error::Invalid("running variance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn updated(&self, batch_mean: &[T], batch_var: &[T]) -> Self {
        let m = self.momentum;
        let r = T::one() - m;
        Self {
            mean: self.mean.iter().zip(batch_mean).map(|(&a, &b)| m * a + r * b).collect(),
            var: self.var.iter().zip(batch_var).map(|(&a, &b)| m * a + r * b).collect(),
            momentum: self.momentum,
            eps: self.eps,
            updates: self.updates + 1,
        }
    }

    pub fn init_buffers(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
        store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros([channels]));
        store.add_buffer(&format!("{prefix}.running_var"), Tensor::ones([channels]));
        store.add_buffer(&format!("{prefix}.updates"), Tensor::scalar(T::zero()));
    }

    pub fn load(store: &ParamStore<T>, prefix: &str, momentum: f64, eps: f64) -> Result<Self> {
        Ok(Self {
            mean: store.get(&format!("{prefix}.running_mean"))?.data().to_vec(),
            var: store.get(&format!("{prefix}.running_var"))?.data().to_vec(),
            momentum: T::from_f64_lossy(momentum),
            eps: T::from_f64_lossy(eps),
            updates: store.get(&format!("{prefix}.updates"))?.data()[0].as_f64() as usize,
        })
    }

    pub fn save(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<()> {
        let c = self.channels();
        store.set(&format!("{prefix}.running_mean"), Tensor::new([c], self.mean.clone())?)?;
        store.set(&format!("{prefix}.running_var"), Tensor::new([c], self.var.clone())?)?;
        store.set(&format!("{prefix}.updates"), Tensor::scalar(T::from_usize(self.updates).unwrap()))
    }
}

/// Channel-wise normalization on the tape. Train mode uses batch statistics
/// over every axis but the last and returns updated running statistics; eval
/// mode applies the stored statistics and returns them unchanged.
pub fn normalize<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    stats: &RunningStats<T>,
    mode: Mode,
) -> Result<(Var, RunningStats<T>)> {
    let c = *g.shape(x).last().unwrap_or(&0);
    if c != stats.channels() {
        return Err(Error::Shape(format!("statistics for {} channels, input has {c}", stats.channels())));
    }
    if !g.value(x).all_finite() {
        return Err(Error::NonFinite("normalization input".into()));
    }
    match mode {
        Mode::Train => {
            let (xhat, mean, var) = g.normalize_train(x, stats.eps)?;
            Ok((xhat, stats.updated(&mean, &var)))
        }
        Mode::Eval => {
            if stats.updates == 0 {
                return Err(Error::UninitializedStats);
            }
            let inv = inv_std(&stats.var, stats.eps);
            let shift = stats.mean.iter().zip(&inv).map(|(&m, &s)| -m * s).collect();
            Ok((g.channel_affine_const(x, inv, shift)?, stats.clone()))
        }
    }
}

/// [`normalize`] with statistics kept as buffers under `prefix` in the store.
pub fn normalize_in_store<T: Real>(
    g: &mut Graph<T>,
    ctx: &mut Ctx<T>,
    prefix: &str,
    x: Var,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let stats = RunningStats::load(ctx.store, prefix, momentum, eps)?;
    let (y, next) = normalize(g, x, &stats, ctx.mode)?;
    if ctx.mode == Mode::Train {
        next.save(ctx.store, prefix)?;
    }
    Ok(y)
}

/// Reshapes a `(B, C)` or `(C)` vector var to broadcast over `(B, H, W, C)`.
pub fn as_channel_map<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    match shape[..] {
        [c] => g.reshape(v, &[1, 1, 1, c]),
        [b, c] => g.reshape(v, &[b, 1, 1, c]),
        _ => Err(Error::Shape(format!("expected a channel vector, got {shape:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per-channel learned scale and shift.
    Batch,
    /// Per-class scale and shift tables.
    Conditional,
    /// Per-class tables plus a bias on scale and shift projected from `z`.
    ConditionalLatent,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub kind: NormKind,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            kind: NormKind::Batch,
            num_classes: 0,
            latent_dim: 0,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn conditional(name: impl Into<String>, channels: usize, num_classes: usize) -> Self {
        Self { kind: NormKind::Conditional, num_classes, ..Self::new(name, channels) }
    }

    pub fn conditional_latent(name: impl Into<String>, channels: usize, num_classes: usize, latent_dim: usize) -> Self {
        Self { kind: NormKind::ConditionalLatent, num_classes, latent_dim, ..Self::new(name, channels) }
    }

    pub fn stats_prefix(&self) -> String {
        format!("{}.stats", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let c = self.channels;
        match self.kind {
            NormKind::Batch => {
                store.add_param(&format!("{}.scale", self.name), Tensor::ones([c]));
                store.add_param(&format!("{}.shift", self.name), Tensor::zeros([c]));
            }
            NormKind::Conditional | NormKind::ConditionalLatent => {
                store.add_param(&format!("{}.scale_table", self.name), Tensor::ones([self.num_classes, c]));
                store.add_param(&format!("{}.shift_table", self.name), Tensor::zeros([self.num_classes, c]));
            }
        }
        if self.kind == NormKind::ConditionalLatent {
            store.add_param(&format!("{}.latent.weight", self.name), normal_tensor(&[self.latent_dim, 2 * c], 0.02, rng));
        }
        RunningStats::<T>::init_buffers(store, &self.stats_prefix(), c);
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        match self.kind {
            NormKind::Batch => 2 * c,
            NormKind::Conditional => 2 * self.num_classes * c,
            NormKind::ConditionalLatent => 2 * self.num_classes * c + 2 * c * self.latent_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, cond: Option<&Cond>) -> Result<Var> {
        let xhat = normalize_in_store(g, ctx, &self.stats_prefix(), x, self.momentum, self.eps)?;
        let (scale, shift) = match self.kind {
            NormKind::Batch => {
                let s = ctx.param(g, &format!("{}.scale", self.name))?;
                let b = ctx.param(g, &format!("{}.shift", self.name))?;
                (s, b)
            }
            NormKind::Conditional | NormKind::ConditionalLatent => {
                let cond = cond.ok_or_else(|| Error::Conditioning(format!("{} needs class labels", self.name)))?;
                cond.check(self.num_classes, g.shape(x)[0])?;
                let st = ctx.param(g, &format!("{}.scale_table", self.name))?;
                let bt = ctx.param(g, &format!("{}.shift_table", self.name))?;
                let mut s = g.embedding(st, &cond.classes)?;
                let mut b = g.embedding(bt, &cond.classes)?;
                if self.kind == NormKind::ConditionalLatent {
                    let z = cond.z.ok_or_else(|| Error::Conditioning(format!("{} needs a latent vector", self.name)))?;
                    let w = ctx.param(g, &format!("{}.latent.weight", self.name))?;
                    let lb = g.linear(z, w, None)?;
                    let ls = g.slice_last(lb, 0, self.channels)?;
                    let lsh = g.slice_last(lb, self.channels, self.channels)?;
                    s = g.add(s, ls)?;
                    b = g.add(b, lsh)?;
                }
                (s, b)
            }
        };
        let scale = as_channel_map(g, scale)?;
        let shift = as_channel_map(g, shift)?;
        let y = g.mul(xhat, scale)?;
        g.add(y, shift)
    }
}
