use rand::Rng;

use super::audit::LayerRow;
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{Conv2d, Ctx};
use crate::params::ParamStore;
use crate::tensor::Real;

/// `x ⊙ sigmoid(conv7×7([mean_c(x); max_c(x)]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub name: String,
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(name: impl Into<String>, spectral_norm: bool) -> Self {
        let name = name.into();
        let conv = Conv2d::new(format!("{name}.conv"), 7, 2, 1).with_sn(spectral_norm);
        Self { name, conv }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv.init(store, rng);
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let avg = g.channel_mean(x)?;
        let max = g.channel_max(x)?;
        let pooled = g.concat_last(&[avg, max])?;
        let logits = self.conv.forward(g, ctx, pooled)?;
        let gate = g.sigmoid(logits);
        g.mul(x, gate)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count()
    }

    pub fn rows(&self, h: usize, w: usize, c: usize) -> Vec<LayerRow> {
        let n = (h * w * c) as u64;
        vec![
            LayerRow::ops(format!("{}.pool", self.name), "channel pool", [h, w, 2], 2 * n),
            LayerRow::conv(&self.conv, h, w),
            LayerRow::ops(format!("{}.gate", self.name), "gate", [h, w, c], n),
        ]
    }
}
