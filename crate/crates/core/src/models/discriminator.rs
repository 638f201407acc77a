use rand::Rng;

use super::audit::LayerRow;
use super::blocks::DiscBlock;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Dense, SpectralState};
use crate::params::{normal_tensor, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub resolution: usize,
    pub block_channels: Vec<usize>,
    pub downsample: Vec<bool>,
    /// Class count of the projection head, if any.
    pub num_classes: Option<usize>,
}

impl DiscriminatorSpec {
    pub fn disc32() -> Self {
        Self { resolution: 32, block_channels: vec![128; 4], downsample: vec![true, true, false, false], num_classes: None }
    }

    pub fn disc128() -> Self {
        Self {
            resolution: 128,
            block_channels: vec![64, 128, 256, 512, 512, 512],
            downsample: vec![true, true, true, true, true, false],
            num_classes: None,
        }
    }

    pub fn for_resolution(resolution: usize) -> Result<Self> {
        match resolution {
            32 => Ok(Self::disc32()),
            128 => Ok(Self::disc128()),
            r => Err(Error::Invalid(format!("no discriminator layout for resolution {r} (32 or 128)"))),
        }
    }

    pub fn with_projection(mut self, num_classes: usize) -> Self {
        self.num_classes = Some(num_classes);
        self
    }

    /// Rescales widths so the first block has `width` channels.
    pub fn scaled(mut self, width: usize) -> Self {
        let base = self.block_channels[0];
        self.block_channels = self.block_channels.iter().map(|&c| (c * width).div_ceil(base).max(1)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.block_channels.is_empty() || self.block_channels.contains(&0) {
            errs.push("discriminator widths must be positive and non-empty".to_string());
        }
        if self.downsample.len() != self.block_channels.len() {
            errs.push(format!("{} downsample flags for {} blocks", self.downsample.len(), self.block_channels.len()));
        }
        let downs = self.downsample.iter().filter(|&&d| d).count() as u32;
        if self.resolution == 0 || self.resolution % (1usize << downs.min(30)) != 0 {
            errs.push(format!("resolution {} cannot be halved {downs} times", self.resolution));
        }
        if self.num_classes == Some(0) {
            errs.push("projection head needs at least one class".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Spectrally normalized ResNet discriminator with an optional projection head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub spec: DiscriminatorSpec,
    pub blocks: Vec<DiscBlock>,
    pub dense: Dense,
}

pub fn build_discriminator(spec: &DiscriminatorSpec) -> Result<Discriminator> {
    spec.validate()?;
    let mut blocks = Vec::new();
    let mut cin = 3;
    for (i, (&cout, &down)) in spec.block_channels.iter().zip(&spec.downsample).enumerate() {
        blocks.push(DiscBlock::new(format!("d.block{}", i + 1), cin, cout, down, i == 0));
        cin = cout;
    }
    Ok(Discriminator { spec: spec.clone(), blocks, dense: Dense::new("d.dense", cin, 1).with_sn(true) })
}

const EMBED: &str = "d.embed.table";

impl Discriminator {
    pub fn features(&self) -> usize {
        self.dense.in_features
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.dense.init(store, rng);
        if let Some(k) = self.spec.num_classes {
            let shape = [k, self.features()];
            store.add_param(EMBED, normal_tensor(&shape, 0.02, rng));
            let st = SpectralState::<T>::random(&shape, rng);
            let (nu, nv) = (st.u.len(), st.v.len());
            store.add_buffer(&format!("{EMBED}.sn_u"), Tensor::new([nu], st.u).unwrap());
            store.add_buffer(&format!("{EMBED}.sn_v"), Tensor::new([nv], st.v).unwrap());
        }
    }

    pub fn new_store<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng);
        store
    }

    /// Pooled features `(B, F)` before the head.
    pub fn trunk<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (_, h, w, c) = g.value(x).dims4()?;
        if h != self.spec.resolution || w != self.spec.resolution || c != 3 {
            return Err(Error::Shape(format!(
                "discriminator expects ({r}, {r}, 3) images, got ({h}, {w}, {c})",
                r = self.spec.resolution
            )));
        }
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, ctx, h)?;
        }
        let h = g.relu(h);
        g.sum_pool(h)
    }

    /// `dense(f) + ⟨embed(y), f⟩`, shape `(B, 1)`.
    pub fn projection_logit<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        features: Var,
        classes: Option<&[usize]>,
    ) -> Result<Var> {
        let out = self.dense.forward(g, ctx, features)?;
        match (self.spec.num_classes, classes) {
            (None, None) => Ok(out),
            (Some(k), Some(ids)) => {
                if ids.len() != g.shape(features)[0] {
                    return Err(Error::Conditioning(format!("{} labels for a batch of {}", ids.len(), g.shape(features)[0])));
                }
                if let Some(&c) = ids.iter().find(|&&c| c >= k) {
                    return Err(Error::ClassOutOfRange { class: c, num_classes: k });
                }
                let table = ctx.weight(g, EMBED)?;
                let e = g.embedding(table, ids)?;
                let prod = g.mul(e, features)?;
                let proj = g.sum_last(prod)?;
                g.add(out, proj)
            }
            (Some(_), None) => Err(Error::Conditioning("projection discriminator needs class labels".into())),
            (None, Some(_)) => Err(Error::Conditioning("unconditional discriminator given class labels".into())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var, classes: Option<&[usize]>) -> Result<Var> {
        let f = self.trunk(g, ctx, x)?;
        self.projection_logit(g, ctx, f, classes)
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.dense.param_count()
            + self.spec.num_classes.map_or(0, |k| k * self.features())
    }

    pub fn rows(&self) -> Vec<LayerRow> {
        let mut rows = Vec::new();
        let mut hw = self.spec.resolution;
        for b in &self.blocks {
            rows.extend(b.rows(hw, hw));
            if b.downsample {
                hw /= 2;
            }
        }
        let f = self.features();
        rows.push(LayerRow::ops("d.sum_pool".into(), "global sum", [1, 1, f], (hw * hw * f) as u64));
        rows.push(LayerRow::dense("d.dense".into(), f, 1, true, self.dense.param_count()));
        if let Some(k) = self.spec.num_classes {
            let mut row = LayerRow::dense("d.embed".into(), f, 1, false, k * f);
            row.kind = "projection".into();
            rows.push(row);
        }
        rows
    }
}
