//! Adversarial objectives, averaged over the batch.
//!
//! The discriminator losses take the logits of a `[real; fake]` batch and the
//! number of real rows, so one forward pass serves both halves.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::softplus;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Hinge,
    /// Non-saturating cross-entropy.
    Ce,
    /// Least squares with targets 1 (real) and 0 (fake).
    Lsgan,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hinge" => Ok(Self::Hinge),
            "ce" => Ok(Self::Ce),
            "lsgan" => Ok(Self::Lsgan),
            _ => Err(Error::Invalid(format!("unknown loss `{s}` (hinge, ce, lsgan)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hinge => "hinge",
            Self::Ce => "ce",
            Self::Lsgan => "lsgan",
        }
    }
}

fn mean<T: Real>(v: impl Iterator<Item = T>, n: usize) -> T {
    v.fold(T::zero(), |a, b| a + b) / T::from_usize(n).unwrap()
}

pub fn hinge_d_loss<T: Real>(real: &[T], fake: &[T]) -> T {
    let one = T::one();
    mean(real.iter().map(|&r| (one - r).max(T::zero())), real.len())
        + mean(fake.iter().map(|&f| (one + f).max(T::zero())), fake.len())
}

pub fn hinge_g_loss<T: Real>(fake: &[T]) -> T {
    -mean(fake.iter().copied(), fake.len())
}

pub fn ce_d_loss<T: Real>(real: &[T], fake: &[T]) -> T {
    mean(real.iter().map(|&r| softplus(-r)), real.len()) + mean(fake.iter().map(|&f| softplus(f)), fake.len())
}

pub fn ce_g_loss<T: Real>(fake: &[T]) -> T {
    mean(fake.iter().map(|&f| softplus(-f)), fake.len())
}

pub fn lsgan_d_loss<T: Real>(real: &[T], fake: &[T]) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (mean(real.iter().map(|&r| (r - T::one()) * (r - T::one())), real.len())
        + mean(fake.iter().map(|&f| f * f), fake.len()))
}

pub fn lsgan_g_loss<T: Real>(fake: &[T]) -> T {
    let half = T::from_f64_lossy(0.5);
    half * mean(fake.iter().map(|&f| (f - T::one()) * (f - T::one())), fake.len())
}

pub fn d_loss_value<T: Real>(kind: LossKind, real: &[T], fake: &[T]) -> T {
    match kind {
        LossKind::Hinge => hinge_d_loss(real, fake),
        LossKind::Ce => ce_d_loss(real, fake),
        LossKind::Lsgan => lsgan_d_loss(real, fake),
    }
}

pub fn g_loss_value<T: Real>(kind: LossKind, fake: &[T]) -> T {
    match kind {
        LossKind::Hinge => hinge_g_loss(fake),
        LossKind::Ce => ce_g_loss(fake),
        LossKind::Lsgan => lsgan_g_loss(fake),
    }
}

/// Per-row sign (+1 real, −1 fake) and per-half weight `1 / count`.
fn split_consts<T: Real>(g: &mut Graph<T>, logits: Var, n_real: usize) -> Result<(Var, Var)> {
    let shape = g.shape(logits).to_vec();
    let n = shape.first().copied().unwrap_or(0);
    if g.value(logits).len() != n || n_real == 0 || n_real >= n {
        return Err(Error::Shape(format!("need (B, 1) logits with both halves present, got {shape:?} and {n_real} real")));
    }
    let n_fake = n - n_real;
    let sign = Tensor::from_fn(shape.clone(), |i| if i < n_real { T::one() } else { -T::one() });
    let inv = |k: usize| T::one() / T::from_usize(k).unwrap();
    let weight = Tensor::from_fn(shape, |i| if i < n_real { inv(n_real) } else { inv(n_fake) });
    Ok((g.constant(sign), g.constant(weight)))
}

/// Discriminator loss on `[real; fake]` logits with `n_real` leading real rows.
pub fn d_loss<T: Real>(g: &mut Graph<T>, kind: LossKind, logits: Var, n_real: usize) -> Result<Var> {
    let (sign, weight) = split_consts(g, logits, n_real)?;
    let signed = g.mul(logits, sign)?;
    let per = match kind {
        LossKind::Hinge => {
            let m = g.affine_scalar(signed, -T::one(), T::one())?;
            g.relu(m)
        }
        LossKind::Ce => {
            let m = g.scale(signed, -T::one());
            g.softplus(m)
        }
        LossKind::Lsgan => {
            let neg_target = Tensor::from_fn(g.shape(logits).to_vec(), |i| if i < n_real { -T::one() } else { T::zero() });
            let t = g.constant(neg_target);
            let r = g.add(logits, t)?;
            let sq = g.mul(r, r)?;
            g.scale(sq, T::from_f64_lossy(0.5))
        }
    };
    let weighted = g.mul(per, weight)?;
    Ok(g.sum(weighted))
}

pub fn g_loss<T: Real>(g: &mut Graph<T>, kind: LossKind, fake_logits: Var) -> Result<Var> {
    Ok(match kind {
        LossKind::Hinge => {
            let m = g.mean(fake_logits);
            g.scale(m, -T::one())
        }
        LossKind::Ce => {
            let m = g.scale(fake_logits, -T::one());
            let s = g.softplus(m);
            g.mean(s)
        }
        LossKind::Lsgan => {
            let r = g.affine_scalar(fake_logits, T::one(), -T::one())?;
            let sq = g.mul(r, r)?;
            let m = g.mean(sq);
            g.scale(m, T::from_f64_lossy(0.5))
        }
    })
}
