//! SPN / cSPN on the autograd tape.

use rand::Rng;

use super::types::{AffineConv, KernelMode, MaskChannels, SpnConfig, SpnParams};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::norm::{as_channel_map, normalize_in_store};
use crate::nn::{Cond, Ctx};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Intermediate vars of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SpnTrace {
    pub output: Var,
    pub normalized: Var,
    pub mask: Var,
    pub mask_inv: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// One SPN layer whose parameters live under `name.` in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SpnLayer {
    pub name: String,
    pub config: SpnConfig,
}

impl SpnLayer {
    pub fn new(name: impl Into<String>, config: SpnConfig) -> Self {
        Self { name: name.into(), config }
    }

    fn key(&self, n: &str) -> String {
        format!("{}.{n}", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        SpnParams::<T>::init(&self.config, rng)?.write_to(store, &self.name, rng);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    fn check_cond(&self, cond: Option<&Cond>, batch: usize) -> Result<()> {
        match (&self.config.conditional, cond) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::Conditioning(format!("{} is unconditional but got a condition", self.name))),
            (Some(_), None) => Err(Error::Conditioning(format!("{} needs class labels", self.name))),
            (Some(cc), Some(c)) => {
                c.check(cc.num_classes, batch)?;
                if cc.latent_bias && c.z.is_none() {
                    return Err(Error::Conditioning(format!("{} needs a latent vector", self.name)));
                }
                Ok(())
            }
        }
    }

    /// `m = sigmoid(norm(1×1 projection(x)))` and `m* = 1 − m`.
    pub fn mask_branch<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        x: Var,
        cond: Option<&Cond>,
    ) -> Result<(Var, Var)> {
        let w = ctx.weight(g, &self.key("mask.weight"))?;
        let b = ctx.param(g, &self.key("mask.bias"))?;
        let proj = g.conv2d(x, w, Some(b))?;
        let cfg = &self.config;
        let normed = normalize_in_store(g, ctx, &self.key("mask.norm.stats"), proj, cfg.momentum, cfg.eps)?;
        let (scale, shift) = match cond {
            Some(c) if cfg.conditional.is_some() => {
                let st = ctx.param(g, &self.key("mask.norm.scale_table"))?;
                let bt = ctx.param(g, &self.key("mask.norm.shift_table"))?;
                (g.embedding(st, &c.classes)?, g.embedding(bt, &c.classes)?)
            }
            _ => (ctx.param(g, &self.key("mask.norm.scale"))?, ctx.param(g, &self.key("mask.norm.shift"))?),
        };
        let scale = as_channel_map(g, scale)?;
        let shift = as_channel_map(g, shift)?;
        let a = g.mul(normed, scale)?;
        let a = g.add(a, shift)?;
        let m = g.sigmoid_open(a);
        let m_inv = g.one_minus(m)?;
        Ok((m, m_inv))
    }

    /// Depth-wise (or standard) convolutions of `m` and `m*` giving γ and β.
    pub fn affine_field<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        m: Var,
        m_inv: Var,
        cond: Option<&Cond>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let c = cfg.channels;
        let (m, m_inv) = if cfg.mask_channels == MaskChannels::Single {
            let mut full = g.shape(m).to_vec();
            *full.last_mut().unwrap() = c;
            (g.broadcast_to(m, &full)?, g.broadcast_to(m_inv, &full)?)
        } else {
            (m, m_inv)
        };
        let batch = g.shape(m)[0];
        let per_class = cfg.conditional.as_ref().is_some_and(|cc| cc.kernel_mode == KernelMode::PerClass);

        let mut kernels = Vec::with_capacity(4);
        if per_class {
            let cond = cond.ok_or_else(|| Error::Conditioning(format!("{} needs class labels", self.name)))?;
            let table = ctx.param(g, &self.key("class_kernels"))?;
            let rows = g.embedding(table, &cond.classes)?;
            let len: usize = cfg.bank_shape().iter().product();
            let mut shape = vec![batch];
            shape.extend(cfg.bank_shape());
            for i in 0..4 {
                let s = g.slice_last(rows, i * len, len)?;
                kernels.push(g.reshape(s, &shape)?);
            }
        } else {
            for bank in super::types::BANKS {
                kernels.push(ctx.param(g, &self.key(bank))?);
            }
        }

        let apply = |g: &mut Graph<T>, src: Var, k: Var| -> Result<Var> {
            match cfg.affine_conv {
                AffineConv::Depthwise => g.depthwise_conv2d(src, k),
                AffineConv::Standard => g.conv2d(src, k, None),
            }
        };
        let mut parts = vec![
            apply(g, m, kernels[0])?,
            apply(g, m_inv, kernels[1])?,
            apply(g, m, kernels[2])?,
            apply(g, m_inv, kernels[3])?,
        ];

        let modulated = cfg.conditional.as_ref().is_some_and(|cc| cc.kernel_mode == KernelMode::Modulated);
        if modulated {
            // Scaling a bank's channel j by s_j scales that output channel by s_j,
            // so the class-specialized kernels act through the outputs.
            let cond = cond.ok_or_else(|| Error::Conditioning(format!("{} needs class labels", self.name)))?;
            let table = ctx.param(g, &self.key("class_embed.table"))?;
            let emb = g.embedding(table, &cond.classes)?;
            let w = ctx.param(g, &self.key("kernel_scale.weight"))?;
            let s = g.linear(emb, w, None)?;
            for (i, part) in parts.iter_mut().enumerate() {
                let si = g.slice_last(s, i * c, c)?;
                let si = g.affine_scalar(si, T::one(), T::one())?;
                let si = as_channel_map(g, si)?;
                *part = g.mul(*part, si)?;
            }
        }

        let mut gamma = g.add(parts[0], parts[1])?;
        let mut beta = g.add(parts[2], parts[3])?;

        if let Some(cc) = &cfg.conditional {
            if cc.latent_bias {
                let z = cond.and_then(|c| c.z).ok_or_else(|| Error::Conditioning(format!("{} needs a latent vector", self.name)))?;
                let w = ctx.param(g, &self.key("latent_bias.weight"))?;
                let lb = g.linear(z, w, None)?;
                let lg = g.slice_last(lb, 0, c)?;
                let lg = as_channel_map(g, lg)?;
                let lbeta = g.slice_last(lb, c, c)?;
                let lbeta = as_channel_map(g, lbeta)?;
                gamma = g.add(gamma, lg)?;
                beta = g.add(beta, lbeta)?;
            }
        }
        Ok((gamma, beta))
    }

    /// `y = γ ⊙ (scale · x̂ + shift) + β`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, cond: Option<&Cond>) -> Result<SpnTrace> {
        let (b, _, _, c) = g.value(x).dims4()?;
        if c != self.config.channels {
            return Err(Error::Shape(format!("{} expects {} channels, input has {c}", self.name, self.config.channels)));
        }
        self.check_cond(cond, b)?;
        let cfg = &self.config;
        let normalized = normalize_in_store(g, ctx, &self.key("stats"), x, cfg.momentum, cfg.eps)?;
        let scale = ctx.param(g, &self.key("scale"))?;
        let shift = ctx.param(g, &self.key("shift"))?;
        let scale = as_channel_map(g, scale)?;
        let shift = as_channel_map(g, shift)?;
        let xa = g.mul(normalized, scale)?;
        let xa = g.add(xa, shift)?;

        let (mask, mask_inv) = self.mask_branch(g, ctx, x, cond)?;
        #[cfg(debug_assertions)]
        check_mask(g, mask, mask_inv);
        let (gamma, beta) = self.affine_field(g, ctx, mask, mask_inv, cond)?;
        let y = g.mul(xa, gamma)?;
        let output = g.add(y, beta)?;
        Ok(SpnTrace { output, normalized, mask, mask_inv, gamma, beta })
    }
}

#[cfg(debug_assertions)]
fn check_mask<T: Real>(g: &Graph<T>, m: Var, m_inv: Var) {
    for (&a, &b) in g.value(m).data().iter().zip(g.value(m_inv).data()) {
        assert!(a > T::zero() && a < T::one(), "mask entry {a} outside (0, 1)");
        assert!(a + b == T::one(), "mask and inverted mask do not sum to one: {a} + {b}");
    }
}
