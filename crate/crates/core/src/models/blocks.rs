use rand::Rng;

use super::attention::SpatialAttention;
use super::audit::LayerRow;
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{BatchNorm, Cond, Conv2d, Ctx, NormKind};
use crate::params::ParamStore;
use crate::spn::{AffineConv, KernelMode, SpnLayer, SpnTrace};
use crate::tensor::Real;

/// One normalization site of a generator block.
#[derive(Clone, Debug)]
pub enum NormSite {
    Plain(BatchNorm),
    Spn(SpnLayer),
}

impl NormSite {
    pub fn name(&self) -> &str {
        match self {
            Self::Plain(n) => &n.name,
            Self::Spn(s) => &s.name,
        }
    }

    pub fn is_spn(&self) -> bool {
        matches!(self, Self::Spn(_))
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        match self {
            Self::Plain(n) => {
                n.init(store, rng);
                Ok(())
            }
            Self::Spn(s) => s.init(store, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        x: Var,
        cond: Option<&Cond>,
    ) -> Result<(Var, Option<SpnTrace>)> {
        match self {
            Self::Plain(n) => Ok((n.forward(g, ctx, x, cond)?, None)),
            Self::Spn(s) => {
                let cond = if s.config.conditional.is_some() { cond } else { None };
                let t = s.forward(g, ctx, x, cond)?;
                Ok((t.output, Some(t)))
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Plain(n) => n.param_count(),
            Self::Spn(s) => s.param_count(),
        }
    }

    /// Audit rows for an `h × w` input, batch 1.
    pub fn rows(&self, h: usize, w: usize) -> Vec<LayerRow> {
        match self {
            Self::Plain(n) => {
                let c = n.channels;
                let mut rows = vec![LayerRow::norm(&n.name, c, h, w, n.param_count())];
                if n.kind == NormKind::ConditionalLatent {
                    rows.push(LayerRow::dense(format!("{}.latent", n.name), n.latent_dim, 2 * c, false, 0));
                    rows.push(LayerRow::ops(format!("{}.latent_add", n.name), "bias add", [1, 1, c], 2 * c as u64));
                }
                rows
            }
            Self::Spn(s) => spn_rows(s, h, w),
        }
    }
}

fn spn_rows(s: &SpnLayer, h: usize, w: usize) -> Vec<LayerRow> {
    let cfg = &s.config;
    let (c, cm, k) = (cfg.channels, cfg.mask_width(), cfg.kernel_size);
    let hw = (h * w) as u64;
    let n = hw * c as u64;
    let nm = hw * cm as u64;
    let name = &s.name;
    let mut rows = vec![
        LayerRow::norm(name, c, h, w, 2 * c),
        LayerRow {
            name: format!("{name}.mask.proj"),
            kind: "conv1x1".into(),
            output: [h, w, cm],
            params: c * cm + cm,
            macs: nm * c as u64,
            ops_mac2: nm,
            ops_mac1: nm,
        },
    ];
    let norm_params = match &cfg.conditional {
        None => 2 * cm,
        Some(cc) => 2 * cc.num_classes * cm,
    };
    rows.push(LayerRow::norm(&format!("{name}.mask.norm"), cm, h, w, norm_params));
    rows.push(LayerRow::ops(format!("{name}.mask.invert"), "1 - m", [h, w, cm], nm));
    let bank: usize = cfg.bank_shape().iter().product();
    let per_tap = match cfg.affine_conv {
        AffineConv::Depthwise => 1,
        AffineConv::Standard => c as u64,
    };
    let bank_params = match &cfg.conditional {
        Some(cc) if cc.kernel_mode == KernelMode::PerClass => cc.num_classes * 4 * bank,
        _ => 4 * bank,
    };
    rows.push(LayerRow {
        name: format!("{name}.affine"),
        kind: match cfg.affine_conv {
            AffineConv::Depthwise => format!("dwconv{k}x{k} x4"),
            AffineConv::Standard => format!("conv{k}x{k} x4"),
        },
        output: [h, w, 2 * c],
        params: bank_params,
        macs: 4 * n * (k * k) as u64 * per_tap,
        ops_mac2: 2 * n,
        ops_mac1: 2 * n,
    });
    if let Some(cc) = &cfg.conditional {
        if cc.kernel_mode == KernelMode::Modulated {
            let p = cc.num_classes * cc.embed_dim + cc.embed_dim * 4 * c;
            let mut row = LayerRow::dense(format!("{name}.kernel_scale"), cc.embed_dim, 4 * c, false, p);
            row.ops_mac2 += 4 * c as u64 + 4 * n;
            row.ops_mac1 += 4 * c as u64 + 4 * n;
            rows.push(row);
        }
        if cc.latent_bias {
            let mut row = LayerRow::dense(format!("{name}.latent_bias"), cc.latent_dim, 2 * c, false, cc.latent_dim * 2 * c);
            row.ops_mac2 += 2 * n;
            row.ops_mac1 += 2 * n;
            rows.push(row);
        }
    }
    rows.push(LayerRow { name: format!("{name}.modulate"), kind: "gamma*x+beta".into(), output: [h, w, c], params: 0, macs: n, ops_mac2: 0, ops_mac1: 0 });
    rows
}

/// Pre-activation up-block:
/// `norm → ReLU → up → conv3 → norm → ReLU → conv3 [→ SA]`, plus
/// `up [→ conv1×1]` on the shortcut.
#[derive(Clone, Debug)]
pub struct GenBlock {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsample: bool,
    pub norm1: NormSite,
    pub conv1: Conv2d,
    pub norm2: NormSite,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
    pub attention: Option<SpatialAttention>,
}

impl GenBlock {
    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.norm1.init(store, rng)?;
        self.conv1.init(store, rng);
        self.norm2.init(store, rng)?;
        self.conv2.init(store, rng);
        if let Some(s) = &self.shortcut {
            s.init(store, rng);
        }
        if let Some(a) = &self.attention {
            a.init(store, rng);
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<T>,
        x: Var,
        cond: Option<&Cond>,
        traces: &mut Vec<(String, SpnTrace)>,
    ) -> Result<Var> {
        let (h, t1) = self.norm1.forward(g, ctx, x, cond)?;
        let h = g.relu(h);
        let h = if self.upsample { g.upsample2x(h)? } else { h };
        let h = self.conv1.forward(g, ctx, h)?;
        let (h, t2) = self.norm2.forward(g, ctx, h, cond)?;
        let h = g.relu(h);
        let mut h = self.conv2.forward(g, ctx, h)?;
        if let Some(a) = &self.attention {
            h = a.forward(g, ctx, h)?;
        }
        for (site, t) in [(&self.norm1, t1), (&self.norm2, t2)] {
            if let Some(t) = t {
                traces.push((site.name().to_string(), t));
            }
        }
        let mut sc = if self.upsample { g.upsample2x(x)? } else { x };
        if let Some(s) = &self.shortcut {
            sc = s.forward(g, ctx, sc)?;
        }
        g.add(h, sc)
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.conv1.param_count()
            + self.norm2.param_count()
            + self.conv2.param_count()
            + self.shortcut.as_ref().map_or(0, |s| s.param_count())
            + self.attention.as_ref().map_or(0, |a| a.param_count())
    }

    pub fn rows(&self, h: usize, w: usize) -> Vec<LayerRow> {
        let (oh, ow) = if self.upsample { (2 * h, 2 * w) } else { (h, w) };
        let mut rows = self.norm1.rows(h, w);
        rows.push(LayerRow::conv(&self.conv1, oh, ow));
        rows.extend(self.norm2.rows(oh, ow));
        rows.push(LayerRow::conv(&self.conv2, oh, ow));
        if let Some(a) = &self.attention {
            rows.extend(a.rows(oh, ow, self.out_channels));
        }
        if let Some(s) = &self.shortcut {
            rows.push(LayerRow::conv(s, oh, ow));
        }
        rows.push(LayerRow::ops(format!("{}.residual", self.name), "add", [oh, ow, self.out_channels], (oh * ow * self.out_channels) as u64));
        rows
    }
}

/// Discriminator block; the first block is conv-first and pools its input
/// before the shortcut projection.
#[derive(Clone, Debug)]
pub struct DiscBlock {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsample: bool,
    pub first: bool,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl DiscBlock {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, downsample: bool, first: bool) -> Self {
        let name = name.into();
        let conv1 = Conv2d::new(format!("{name}.conv1"), 3, in_channels, out_channels).with_sn(true);
        let conv2 = Conv2d::new(format!("{name}.conv2"), 3, out_channels, out_channels).with_sn(true);
        let shortcut = (in_channels != out_channels || downsample)
            .then(|| Conv2d::new(format!("{name}.shortcut"), 1, in_channels, out_channels).with_sn(true));
        Self { name, in_channels, out_channels, downsample, first, conv1, conv2, shortcut }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        if let Some(s) = &self.shortcut {
            s.init(store, rng);
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = if self.first { x } else { g.relu(x) };
        let h = self.conv1.forward(g, ctx, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, ctx, h)?;
        let h = if self.downsample { g.avg_pool2x2(h)? } else { h };
        let sc = if self.first {
            let p = if self.downsample { g.avg_pool2x2(x)? } else { x };
            match &self.shortcut {
                Some(s) => s.forward(g, ctx, p)?,
                None => p,
            }
        } else {
            let p = match &self.shortcut {
                Some(s) => s.forward(g, ctx, x)?,
                None => x,
            };
            if self.downsample {
                g.avg_pool2x2(p)?
            } else {
                p
            }
        };
        g.add(h, sc)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.shortcut.as_ref().map_or(0, |s| s.param_count())
    }

    pub fn rows(&self, h: usize, w: usize) -> Vec<LayerRow> {
        let (oh, ow) = if self.downsample { (h / 2, w / 2) } else { (h, w) };
        let mut rows = vec![LayerRow::conv(&self.conv1, h, w), LayerRow::conv(&self.conv2, h, w)];
        if self.downsample {
            rows.push(LayerRow::ops(format!("{}.pool", self.name), "avgpool2x2", [oh, ow, self.out_channels], (4 * oh * ow * self.out_channels) as u64));
        }
        if let Some(s) = &self.shortcut {
            let (sh, sw) = if self.first { (oh, ow) } else { (h, w) };
            rows.push(LayerRow::conv(s, sh, sw));
            if self.downsample {
                let c = if self.first { self.in_channels } else { self.out_channels };
                rows.push(LayerRow::ops(format!("{}.shortcut_pool", self.name), "avgpool2x2", [oh, ow, c], (4 * oh * ow * c) as u64));
            }
        }
        rows.push(LayerRow::ops(format!("{}.residual", self.name), "add", [oh, ow, self.out_channels], (oh * ow * self.out_channels) as u64));
        rows
    }
}
