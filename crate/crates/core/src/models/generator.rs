use rand::Rng;

use super::attention::SpatialAttention;
use super::audit::LayerRow;
use super::blocks::{GenBlock, NormSite};
use super::{NormChoice, SpnOptions};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Cond, Conv2d, Ctx, Dense};
use crate::params::ParamStore;
use crate::spn::{ConditionalConfig, SpnConfig, SpnLayer, SpnTrace};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub resolution: usize,
    pub z_dim: usize,
    /// Channels of the `4 × 4` map produced by the first dense layer.
    pub fc_channels: usize,
    /// Output channels of each up-block.
    pub block_channels: Vec<usize>,
    /// Blocks whose norms become SPN / cSPN when an SPN kind is selected.
    pub starred: Vec<bool>,
    pub norm: NormChoice,
    pub num_classes: Option<usize>,
    pub use_sn: bool,
    pub spn: SpnOptions,
    pub spatial_attention: bool,
}

impl GeneratorSpec {
    pub fn gen32(norm: NormChoice) -> Self {
        Self {
            resolution: 32,
            z_dim: 128,
            fc_channels: 256,
            block_channels: vec![256; 3],
            starred: vec![true; 3],
            norm,
            num_classes: None,
            use_sn: false,
            spn: SpnOptions::default(),
            spatial_attention: false,
        }
    }

    pub fn gen128(norm: NormChoice) -> Self {
        Self {
            resolution: 128,
            z_dim: 128,
            fc_channels: 512,
            block_channels: vec![512, 512, 256, 128, 64],
            starred: vec![false, false, true, true, true],
            norm,
            num_classes: None,
            use_sn: true,
            spn: SpnOptions::default(),
            spatial_attention: false,
        }
    }

    pub fn for_resolution(resolution: usize, norm: NormChoice) -> Result<Self> {
        match resolution {
            32 => Ok(Self::gen32(norm)),
            128 => Ok(Self::gen128(norm)),
            r => Err(Error::Invalid(format!("no generator layout for resolution {r} (32 or 128)"))),
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = Some(num_classes);
        self
    }

    /// Rescales every width so the first dense layer emits `width` channels.
    pub fn scaled(mut self, width: usize) -> Self {
        let base = self.fc_channels;
        let f = |c: usize| (c * width).div_ceil(base).max(1);
        self.block_channels = self.block_channels.iter().map(|&c| f(c)).collect();
        self.fc_channels = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let n = self.block_channels.len();
        if n == 0 {
            errs.push("generator needs at least one block".to_string());
        } else if 4usize.checked_shl(n as u32) != Some(self.resolution) {
            errs.push(format!("{n} up-blocks from 4×4 give {}, not resolution {}", 4usize << n.min(20), self.resolution));
        }
        if self.starred.len() != n {
            errs.push(format!("{} starred flags for {n} blocks", self.starred.len()));
        }
        if self.z_dim == 0 || self.fc_channels == 0 || self.block_channels.contains(&0) {
            errs.push("generator widths and z_dim must be positive".into());
        }
        match (self.norm.is_conditional(), self.num_classes) {
            (true, None) | (true, Some(0)) => errs.push(format!("norm `{}` needs num_classes ≥ 1", self.norm.as_str())),
            (false, Some(_)) => errs.push(format!("norm `{}` is unconditional but num_classes is set", self.norm.as_str())),
            _ => {}
        }
        if self.spn.kernel_size % 2 == 0 {
            errs.push(format!("SPN kernel size must be odd, got {}", self.spn.kernel_size));
        }
        if self.norm == NormChoice::Cspn && self.spn.embed_dim == 0 {
            errs.push("cSPN embedding size must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn site(&self, name: String, channels: usize, starred: bool) -> NormSite {
        let k = self.num_classes.unwrap_or(0);
        if starred && self.norm.is_spn() {
            let mut cfg = SpnConfig::new(channels).with_kernel(self.spn.kernel_size);
            cfg.mask_channels = self.spn.mask_channels;
            cfg.affine_conv = self.spn.affine_conv;
            cfg.spectral_norm = self.use_sn;
            if self.norm == NormChoice::Cspn {
                cfg = cfg.conditional(ConditionalConfig {
                    num_classes: k,
                    embed_dim: self.spn.embed_dim,
                    latent_dim: self.z_dim,
                    latent_bias: self.spn.latent_bias,
                    kernel_mode: self.spn.kernel_mode,
                });
            }
            return NormSite::Spn(SpnLayer::new(name, cfg));
        }
        NormSite::Plain(match self.norm {
            NormChoice::Bn | NormChoice::Spn => BatchNorm::new(name, channels),
            NormChoice::Cbn | NormChoice::Cspn => BatchNorm::conditional(name, channels, k),
            NormChoice::Ccbn => BatchNorm::conditional_latent(name, channels, k, self.z_dim),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub fc: Dense,
    pub blocks: Vec<GenBlock>,
    pub final_norm: BatchNorm,
    pub final_conv: Conv2d,
}

/// Image batch and the SPN sites' intermediates, in forward order.
pub struct GenOutput {
    pub image: Var,
    pub traces: Vec<(String, SpnTrace)>,
}

pub fn build_generator(spec: &GeneratorSpec) -> Result<Generator> {
    spec.validate()?;
    let sn = spec.use_sn;
    let fc = Dense::new("g.fc", spec.z_dim, 16 * spec.fc_channels).with_sn(sn);
    let mut blocks = Vec::new();
    let mut cin = spec.fc_channels;
    for (i, (&cout, &starred)) in spec.block_channels.iter().zip(&spec.starred).enumerate() {
        let name = format!("g.block{}", i + 1);
        blocks.push(GenBlock {
            in_channels: cin,
            out_channels: cout,
            upsample: true,
            norm1: spec.site(format!("{name}.norm1"), cin, starred),
            conv1: Conv2d::new(format!("{name}.conv1"), 3, cin, cout).with_sn(sn),
            norm2: spec.site(format!("{name}.norm2"), cout, starred),
            conv2: Conv2d::new(format!("{name}.conv2"), 3, cout, cout).with_sn(sn),
            shortcut: (cin != cout).then(|| Conv2d::new(format!("{name}.shortcut"), 1, cin, cout).with_sn(sn)),
            attention: (starred && spec.spatial_attention).then(|| SpatialAttention::new(format!("{name}.sa"), sn)),
            name,
        });
        cin = cout;
    }
    Ok(Generator {
        spec: spec.clone(),
        fc,
        blocks,
        final_norm: BatchNorm::new("g.final_norm", cin),
        final_conv: Conv2d::new("g.final_conv", 3, cin, 3).with_sn(sn),
    })
}

impl Generator {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.fc.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.final_norm.init(store, rng);
        self.final_conv.init(store, rng);
        Ok(())
    }

    pub fn new_store<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        self.init(&mut store, rng)?;
        Ok(store)
    }

    pub fn is_conditional(&self) -> bool {
        self.spec.norm.is_conditional()
    }

    /// `z: (B, z_dim)` and, for conditional kinds, one class per sample.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        z: Var,
        classes: Option<&[usize]>,
    ) -> Result<GenOutput> {
        let (b, zd) = g.value(z).dims2()?;
        if zd != self.spec.z_dim {
            return Err(Error::Shape(format!("generator expects z of size {}, got {zd}", self.spec.z_dim)));
        }
        let cond = match (self.is_conditional(), classes) {
            (true, Some(c)) => {
                let cond = Cond { classes: c.to_vec(), z: Some(z) };
                cond.check(self.spec.num_classes.unwrap_or(0), b)?;
                Some(cond)
            }
            (true, None) => return Err(Error::Conditioning("conditional generator needs class labels".into())),
            (false, Some(_)) => return Err(Error::Conditioning("unconditional generator given class labels".into())),
            (false, None) => None,
        };
        let h = self.fc.forward(g, ctx, z)?;
        let mut h = g.reshape(h, &[b, 4, 4, self.spec.fc_channels])?;
        let mut traces = Vec::new();
        for blk in &self.blocks {
            h = blk.forward(g, ctx, h, cond.as_ref(), &mut traces)?;
        }
        let h = self.final_norm.forward(g, ctx, h, None)?;
        let h = g.relu(h);
        let h = self.final_conv.forward(g, ctx, h)?;
        Ok(GenOutput { image: g.tanh(h), traces })
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count()
            + self.blocks.iter().map(|b| b.param_count()).sum::<usize>()
            + self.final_norm.param_count()
            + self.final_conv.param_count()
    }

    /// Names of the SPN sites in forward order.
    pub fn spn_sites(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.norm1, &b.norm2])
            .filter(|s| s.is_spn())
            .map(|s| s.name().to_string())
            .collect()
    }

    /// Audit rows for one sample.
    pub fn rows(&self) -> Vec<LayerRow> {
        let mut rows = vec![LayerRow::dense("g.fc".into(), self.spec.z_dim, 16 * self.spec.fc_channels, true, self.fc.param_count())];
        let mut hw = 4;
        for b in &self.blocks {
            rows.extend(b.rows(hw, hw));
            hw *= 2;
        }
        let c = self.final_norm.channels;
        rows.push(LayerRow::norm("g.final_norm", c, hw, hw, self.final_norm.param_count()));
        rows.push(LayerRow::conv(&self.final_conv, hw, hw));
        rows
    }
}
