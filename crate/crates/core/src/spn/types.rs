use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::RunningStats;
use crate::params::{normal_tensor, orthogonal_tensor, ParamStore};
use crate::tensor::{Real, Tensor};

/// Activations laid out `(B, H, W, C)`, all finite, every axis non-empty.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T>(Tensor<T>);

impl<T: Real> FeatureMap<T> {
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (b, h, w, c) = t.dims4()?;
        if b == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("feature map axes must be non-empty, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }
}

/// A soft foreground mask together with its complement.
///
/// The complement is computed once as `1 − m`; inverting swaps the two, so
/// `invert(invert(m))` returns the original values bit for bit and
/// `m + invert(m) == 1` holds exactly for every entry in (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct SelfLatentMask<T> {
    mask: Tensor<T>,
    inverse: Tensor<T>,
}

impl<T: Real> SelfLatentMask<T> {
    pub fn new(mask: Tensor<T>) -> Result<Self> {
        if let Some(v) = mask.data().iter().find(|&&v| !(v > T::zero() && v < T::one())) {
            return Err(Error::Invalid(format!("mask entry {v} outside (0, 1)")));
        }
        let inverse = mask.map(|v| T::one() - v);
        Ok(Self { mask, inverse })
    }

    pub(crate) fn from_parts(mask: Tensor<T>, inverse: Tensor<T>) -> Self {
        Self { mask, inverse }
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn inverse_values(&self) -> &Tensor<T> {
        &self.inverse
    }

    /// `1 − m`.
    pub fn invert(&self) -> Self {
        Self { mask: self.inverse.clone(), inverse: self.mask.clone() }
    }
}

/// Pixel-wise scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCondition {
    class_id: usize,
    num_classes: usize,
}

impl ClassCondition {
    pub fn new(class_id: usize, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Invalid("num_classes must be at least 1".into()));
        }
        if class_id >= num_classes {
            return Err(Error::ClassOutOfRange { class: class_id, num_classes });
        }
        Ok(Self { class_id, num_classes })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskChannels {
    /// One mask per feature channel.
    PerChannel,
    /// A single mask shared by every channel.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffineConv {
    Depthwise,
    /// Full `C → C` convolution on the masks.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelMode {
    /// Shared banks scaled per channel by `1 + proj(embedding(class))`.
    Modulated,
    /// A full kernel set per class.
    PerClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub latent_bias: bool,
    pub kernel_mode: KernelMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpnConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub mask_channels: MaskChannels,
    pub affine_conv: AffineConv,
    pub conditional: Option<ConditionalConfig>,
    /// Spectral normalization of the mask projection.
    pub spectral_norm: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl SpnConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel_size: 3,
            mask_channels: MaskChannels::PerChannel,
            affine_conv: AffineConv::Depthwise,
            conditional: None,
            spectral_norm: false,
            momentum: crate::nn::norm::DEFAULT_MOMENTUM,
            eps: crate::nn::norm::DEFAULT_EPS,
        }
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    pub fn conditional(mut self, cfg: ConditionalConfig) -> Self {
        self.conditional = Some(cfg);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.channels == 0 {
            errs.push("SPN channels must be positive".to_string());
        }
        if self.kernel_size % 2 == 0 {
            errs.push(format!("SPN kernel size must be odd, got {}", self.kernel_size));
        }
        if let Some(c) = &self.conditional {
            if c.num_classes == 0 {
                errs.push("conditional SPN needs at least one class".into());
            }
            if c.kernel_mode == KernelMode::PerClass && self.affine_conv == AffineConv::Standard {
                errs.push("per-class kernel tables require depth-wise affine convolutions".into());
            }
            if c.kernel_mode == KernelMode::Modulated && c.embed_dim == 0 {
                errs.push("modulated conditional kernels need a positive embedding size".into());
            }
            if c.latent_bias && c.latent_dim == 0 {
                errs.push("latent bias needs a positive latent size".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn mask_width(&self) -> usize {
        match self.mask_channels {
            MaskChannels::PerChannel => self.channels,
            MaskChannels::Single => 1,
        }
    }

    pub fn bank_shape(&self) -> Vec<usize> {
        let (k, c) = (self.kernel_size, self.channels);
        match self.affine_conv {
            AffineConv::Depthwise => vec![k, k, c],
            AffineConv::Standard => vec![k, k, c, c],
        }
    }

    fn bank_len(&self) -> usize {
        self.bank_shape().iter().product()
    }

    /// Learnable scalars of one layer.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let cm = self.mask_width();
        let mut n = 2 * c + c * cm + cm + 4 * self.bank_len();
        match &self.conditional {
            None => n += 2 * cm,
            Some(cc) => {
                n += 2 * cc.num_classes * cm;
                match cc.kernel_mode {
                    KernelMode::Modulated => n += cc.num_classes * cc.embed_dim + cc.embed_dim * 4 * c,
                    KernelMode::PerClass => n += cc.num_classes * 4 * self.bank_len() - 4 * self.bank_len(),
                }
                if cc.latent_bias {
                    n += cc.latent_dim * 2 * c;
                }
            }
        }
        n
    }
}

/// Every learnable of one SPN / cSPN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpnParams<T> {
    pub config: SpnConfig,
    /// Per-channel affine applied to the normalized input before pixel-wise
    /// modulation (the standard BN scale/shift, starting at identity).
    pub affine_scale: Tensor<T>,
    pub affine_shift: Tensor<T>,
    /// 1×1 projection `(1, 1, C, Cm)` onto the mask embedding space.
    pub mask_proj_weight: Tensor<T>,
    pub mask_proj_bias: Tensor<T>,
    /// `(Cm)` for BN or `(num_classes, Cm)` for cBN.
    pub mask_norm_scale: Tensor<T>,
    pub mask_norm_shift: Tensor<T>,
    pub dw_gamma_fg: Tensor<T>,
    pub dw_gamma_bg: Tensor<T>,
    pub dw_beta_fg: Tensor<T>,
    pub dw_beta_bg: Tensor<T>,
    pub conditional: Option<ConditionalParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalParams<T> {
    /// `(num_classes, E)`; modulated mode only.
    pub class_embedding: Option<Tensor<T>>,
    /// `(E, 4C)`; modulated mode only.
    pub kernel_scale_proj: Option<Tensor<T>>,
    /// `(num_classes, 4·|bank|)`; per-class mode only.
    pub class_kernels: Option<Tensor<T>>,
    /// `(dim z, 2C)`; present when the latent bias is enabled.
    pub latent_bias_proj: Option<Tensor<T>>,
}

pub(crate) const BANKS: [&str; 4] = ["gamma_fg", "gamma_bg", "beta_fg", "beta_bg"];

fn identity_bank<T: Real>(cfg: &SpnConfig) -> Tensor<T> {
    let (k, c) = (cfg.kernel_size, cfg.channels);
    let centre = (k / 2) * k + k / 2;
    let mut t = Tensor::zeros(cfg.bank_shape());
    match cfg.affine_conv {
        AffineConv::Depthwise => {
            for j in 0..c {
                t.data_mut()[centre * c + j] = T::one();
            }
        }
        AffineConv::Standard => {
            for j in 0..c {
                t.data_mut()[(centre * c + j) * c + j] = T::one();
            }
        }
    }
    t
}

impl<T: Real> SpnParams<T> {
    /// Identity-at-init parameters: γ banks have unit centre taps, β banks
    /// are zero, conditional projections are zero, and the mask projection is
    /// a small random orthogonal map.
    pub fn init<R: Rng + ?Sized>(config: &SpnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let cm = config.mask_width();
        let (norm_scale, norm_shift) = match &config.conditional {
            None => (Tensor::ones([cm]), Tensor::zeros([cm])),
            Some(cc) => (Tensor::ones([cc.num_classes, cm]), Tensor::zeros([cc.num_classes, cm])),
        };
        let conditional = config.conditional.as_ref().map(|cc| {
            let bank = identity_bank::<T>(config);
            let zero = Tensor::<T>::zeros(config.bank_shape());
            let (class_embedding, kernel_scale_proj, class_kernels) = match cc.kernel_mode {
                KernelMode::Modulated => (
                    Some(normal_tensor(&[cc.num_classes, cc.embed_dim], 0.02, rng)),
                    Some(Tensor::zeros([cc.embed_dim, 4 * c])),
                    None,
                ),
                KernelMode::PerClass => {
                    let row: Vec<T> = [&bank, &bank, &zero, &zero].iter().flat_map(|t| t.data().to_vec()).collect();
                    let data = (0..cc.num_classes).flat_map(|_| row.clone()).collect();
                    (None, None, Some(Tensor::new([cc.num_classes, row.len()], data).unwrap()))
                }
            };
            ConditionalParams {
                class_embedding,
                kernel_scale_proj,
                class_kernels,
                latent_bias_proj: cc.latent_bias.then(|| Tensor::zeros([cc.latent_dim, 2 * c])),
            }
        });
        Ok(Self {
            config: config.clone(),
            affine_scale: Tensor::ones([c]),
            affine_shift: Tensor::zeros([c]),
            mask_proj_weight: orthogonal_tensor(&[1, 1, c, cm], 0.02, rng),
            mask_proj_bias: Tensor::zeros([cm]),
            mask_norm_scale: norm_scale,
            mask_norm_shift: norm_shift,
            dw_gamma_fg: identity_bank(config),
            dw_gamma_bg: identity_bank(config),
            dw_beta_fg: Tensor::zeros(config.bank_shape()),
            dw_beta_bg: Tensor::zeros(config.bank_shape()),
            conditional,
        })
    }

    /// Named tensors relative to a layer prefix, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let norm = if self.config.conditional.is_some() {
            [("mask.norm.scale_table", &self.mask_norm_scale), ("mask.norm.shift_table", &self.mask_norm_shift)]
        } else {
            [("mask.norm.scale", &self.mask_norm_scale), ("mask.norm.shift", &self.mask_norm_shift)]
        };
        let mut out = vec![
            ("scale", &self.affine_scale),
            ("shift", &self.affine_shift),
            ("mask.weight", &self.mask_proj_weight),
            ("mask.bias", &self.mask_proj_bias),
            norm[0],
            norm[1],
        ];
        let per_class = self.conditional.as_ref().is_some_and(|c| c.class_kernels.is_some());
        if !per_class {
            out.push(("gamma_fg", &self.dw_gamma_fg));
            out.push(("gamma_bg", &self.dw_gamma_bg));
            out.push(("beta_fg", &self.dw_beta_fg));
            out.push(("beta_bg", &self.dw_beta_bg));
        }
        if let Some(c) = &self.conditional {
            if let Some(t) = &c.class_embedding {
                out.push(("class_embed.table", t));
            }
            if let Some(t) = &c.kernel_scale_proj {
                out.push(("kernel_scale.weight", t));
            }
            if let Some(t) = &c.class_kernels {
                out.push(("class_kernels", t));
            }
            if let Some(t) = &c.latent_bias_proj {
                out.push(("latent_bias.weight", t));
            }
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let cond = self.config.conditional.is_some();
        let per_class = self.conditional.as_ref().is_some_and(|c| c.class_kernels.is_some());
        let mut out: Vec<(&'static str, &mut Tensor<T>)> = vec![
            ("scale", &mut self.affine_scale),
            ("shift", &mut self.affine_shift),
            ("mask.weight", &mut self.mask_proj_weight),
            ("mask.bias", &mut self.mask_proj_bias),
            (if cond { "mask.norm.scale_table" } else { "mask.norm.scale" }, &mut self.mask_norm_scale),
            (if cond { "mask.norm.shift_table" } else { "mask.norm.shift" }, &mut self.mask_norm_shift),
        ];
        if !per_class {
            out.push(("gamma_fg", &mut self.dw_gamma_fg));
            out.push(("gamma_bg", &mut self.dw_gamma_bg));
            out.push(("beta_fg", &mut self.dw_beta_fg));
            out.push(("beta_bg", &mut self.dw_beta_bg));
        }
        if let Some(c) = &mut self.conditional {
            if let Some(t) = &mut c.class_embedding {
                out.push(("class_embed.table", t));
            }
            if let Some(t) = &mut c.kernel_scale_proj {
                out.push(("kernel_scale.weight", t));
            }
            if let Some(t) = &mut c.class_kernels {
                out.push(("class_kernels", t));
            }
            if let Some(t) = &mut c.latent_bias_proj {
                out.push(("latent_bias.weight", t));
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Writes every learnable under `prefix.` into the store, plus the
    /// running-statistics and power-iteration buffers the layer needs.
    pub fn write_to<R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        for (n, t) in self.named() {
            store.add_param(&format!("{prefix}.{n}"), t.clone());
        }
        RunningStats::<T>::init_buffers(store, &format!("{prefix}.stats"), self.config.channels);
        RunningStats::<T>::init_buffers(store, &format!("{prefix}.mask.norm.stats"), self.config.mask_width());
        if self.config.spectral_norm {
            let st = crate::nn::SpectralState::<T>::random(self.mask_proj_weight.shape(), rng);
            let (nu, nv) = (st.u.len(), st.v.len());
            store.add_buffer(&format!("{prefix}.mask.weight.sn_u"), Tensor::new([nu], st.u).unwrap());
            store.add_buffer(&format!("{prefix}.mask.weight.sn_v"), Tensor::new([nv], st.v).unwrap());
        }
    }

    /// Reads learnables back from `prefix.` in the store.
    pub fn read_from(config: &SpnConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let mut p = Self::init(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (n, t) in p.named_mut() {
            let src = store.get(&format!("{prefix}.{n}"))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape(format!("`{prefix}.{n}` has shape {:?}, expected {:?}", src.shape(), t.shape())));
            }
            *t = src.clone();
        }
        Ok(p)
    }

    /// Applies `f` to every learnable tensor together with its relative name.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (n, t) in self.named_mut() {
            f(n, t);
        }
    }
}

/// Running statistics of the two normalizations inside one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpnState<T> {
    pub stats: RunningStats<T>,
    pub mask_stats: RunningStats<T>,
}

impl<T: Real> SpnState<T> {
    pub fn new(config: &SpnConfig) -> Self {
        Self {
            stats: RunningStats::with(config.channels, config.momentum, config.eps),
            mask_stats: RunningStats::with(config.mask_width(), config.momentum, config.eps),
        }
    }
}
