//! Central finite-difference checks of the SPN layers in double precision.
//!
//! Every case stores its inputs next to its parameters, so inputs and
//! learnables are perturbed by the same loop. The scalar probed is
//! `Σ w ⊙ out` with a fixed random weighting `w`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layer::SpnLayer;
use super::types::{AffineConv, ConditionalConfig, KernelMode, MaskChannels, SpnConfig};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::norm::normalize_in_store;
use crate::nn::{Cond, Ctx, Mode, RunningStats};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Magnitude below which differences are measured absolutely.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { batch: 2, height: 8, width: 8, channels: 4, seed: 0, step: 1e-5, tolerance: 1e-4, floor: 1e-4 }
    }
}

impl GradcheckOptions {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            errs.push("gradcheck shape axes must be positive".to_string());
        }
        if self.batch < 2 {
            errs.push("gradcheck needs a batch of at least 2 for batch statistics".to_string());
        }
        if !(self.step > 0.0) || !(self.tolerance > 0.0) || !(self.floor > 0.0) {
            errs.push("step, tolerance and floor must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Outcome for one tensor of one case.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub case: String,
    pub tensor: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &mut Ctx<f64>) -> Result<Var>>;

struct Case {
    name: String,
    store: ParamStore<f64>,
    mode: Mode,
    build: Build,
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn jitter(store: &mut ParamStore<f64>, std: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store.trainable().map(|e| e.name.clone()).collect();
    for n in names {
        let t = store.get_mut(&n).expect("listed entry");
        for v in t.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn check(case: &Case, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<TensorCheck>> {
    let mut store = case.store.clone();
    let mut g = Graph::new();
    let out = {
        let mut ctx = Ctx::new(&mut store, case.mode);
        (case.build)(&mut g, &mut ctx)?
    };
    let weight = randn(g.shape(out), 1.0, rng);
    let grads = g.backward_with(out, weight.clone())?;

    let mut report = Vec::new();
    let names: Vec<String> = case.store.trainable().map(|e| e.name.clone()).collect();
    for name in names {
        let base = case.store.get(&name)?.clone();
        let analytic = grads.param(&name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));
        let mut probe = case.store.clone();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += opts.step;
            let mut minus = base.clone();
            minus.data_mut()[i] -= opts.step;
            probe.set(&name, plus)?;
            let fp = eval_with(&probe, case, &weight)?;
            probe.set(&name, minus)?;
            let fm = eval_with(&probe, case, &weight)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(err);
        }
        report.push(TensorCheck {
            case: case.name.clone(),
            tensor: name,
            entries: base.len(),
            max_rel_err: worst,
            passed: worst < opts.tolerance,
        });
    }
    Ok(report)
}

fn eval_with(store: &ParamStore<f64>, case: &Case, weight: &Tensor<f64>) -> Result<f64> {
    let mut s = store.clone();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut s, case.mode);
    let out = (case.build)(&mut g, &mut ctx)?;
    Ok(g.value(out).dot(weight))
}

fn input_store(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let shape = [opts.batch, opts.height, opts.width, opts.channels];
    // An offset and spread per channel keeps the normalization non-trivial.
    let x = Tensor::from_fn(shape.to_vec(), |i| {
        let c = (i % opts.channels) as f64;
        0.5 * c - 0.3 + (1.0 + 0.25 * c) * rng.sample::<f64, _>(StandardNormal)
    });
    store.add_param("input.x", x);
    store
}

fn layer_case(
    name: &str,
    config: SpnConfig,
    opts: &GradcheckOptions,
    classes: Vec<usize>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let mut store = input_store(opts, rng);
    let layer = SpnLayer::new("spn", config.clone());
    layer.init(&mut store, rng)?;
    jitter(&mut store, 0.3, rng);
    let latent = config.conditional.as_ref().filter(|c| c.latent_bias).map(|c| c.latent_dim);
    if let Some(d) = latent {
        store.add_param("input.z", randn(&[opts.batch, d], 1.0, rng));
    }
    let conditional = config.conditional.is_some();
    if mode == Mode::Eval {
        // Populate running statistics with one train pass.
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut store, Mode::Train);
        let x = ctx.param(&mut g, "input.x")?;
        let z = if latent.is_some() { Some(ctx.param(&mut g, "input.z")?) } else { None };
        let cond = conditional.then(|| Cond { classes: classes.clone(), z });
        layer.forward(&mut g, &mut ctx, x, cond.as_ref())?;
    }
    let build: Build = Box::new(move |g, ctx| {
        let x = ctx.param(g, "input.x")?;
        let z = if latent.is_some() { Some(ctx.param(g, "input.z")?) } else { None };
        let cond = conditional.then(|| Cond { classes: classes.clone(), z });
        Ok(layer.forward(g, ctx, x, cond.as_ref())?.output)
    });
    Ok(Case { name: name.into(), store, mode, build })
}

fn cases(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let c = opts.channels;
    let classes: Vec<usize> = (0..opts.batch).map(|i| i % 3).collect();
    let mut out = Vec::new();

    let mut store = input_store(opts, rng);
    RunningStats::<f64>::init_buffers(&mut store, "norm.stats", c);
    out.push(Case {
        name: "channelwise_normalize".into(),
        store,
        mode: Mode::Train,
        build: Box::new(|g, ctx| {
            let x = ctx.param(g, "input.x")?;
            normalize_in_store(g, ctx, "norm.stats", x, 0.9, 1e-5)
        }),
    });

    let mut store = input_store(opts, rng);
    store.add_param("kernels", randn(&[3, 3, c], 0.5, rng));
    out.push(Case {
        name: "depthwise_conv2d".into(),
        store,
        mode: Mode::Train,
        build: Box::new(|g, ctx| {
            let x = ctx.param(g, "input.x")?;
            let k = ctx.param(g, "kernels")?;
            g.depthwise_conv2d(x, k)
        }),
    });

    let mut store = input_store(opts, rng);
    let layer = SpnLayer::new("spn", SpnConfig::new(c));
    layer.init(&mut store, rng)?;
    jitter(&mut store, 0.3, rng);
    let mask_layer = layer.clone();
    out.push(Case {
        name: "build_self_latent_mask".into(),
        store: store.clone(),
        mode: Mode::Train,
        build: Box::new(move |g, ctx| {
            let x = ctx.param(g, "input.x")?;
            Ok(mask_layer.mask_branch(g, ctx, x, None)?.0)
        }),
    });
    out.push(Case {
        name: "estimate_affine_field".into(),
        store,
        mode: Mode::Train,
        build: Box::new(move |g, ctx| {
            let x = ctx.param(g, "input.x")?;
            let m = g.sigmoid(x);
            let mi = g.one_minus(m)?;
            let (gamma, beta) = layer.affine_field(g, ctx, m, mi, None)?;
            let gb = g.concat_last(&[gamma, beta])?;
            Ok(gb)
        }),
    });

    out.push(layer_case("spn_forward", SpnConfig::new(c), opts, vec![], Mode::Train, rng)?);
    out.push(layer_case("spn_forward_eval", SpnConfig::new(c), opts, vec![], Mode::Eval, rng)?);
    let mut sn = SpnConfig::new(c);
    sn.spectral_norm = true;
    out.push(layer_case("spn_forward_spectral", sn, opts, vec![], Mode::Eval, rng)?);
    out.push(layer_case("spn_forward_k1", SpnConfig::new(c).with_kernel(1), opts, vec![], Mode::Train, rng)?);
    out.push(layer_case("spn_forward_k5", SpnConfig::new(c).with_kernel(5), opts, vec![], Mode::Train, rng)?);
    let mut single = SpnConfig::new(c);
    single.mask_channels = MaskChannels::Single;
    out.push(layer_case("spn_forward_single_mask", single, opts, vec![], Mode::Train, rng)?);
    let mut standard = SpnConfig::new(c);
    standard.affine_conv = AffineConv::Standard;
    out.push(layer_case("spn_forward_standard_conv", standard, opts, vec![], Mode::Train, rng)?);

    let modulated = ConditionalConfig { num_classes: 3, embed_dim: 5, latent_dim: 6, latent_bias: true, kernel_mode: KernelMode::Modulated };
    out.push(layer_case("cspn_forward", SpnConfig::new(c).conditional(modulated.clone()), opts, classes.clone(), Mode::Train, rng)?);
    let no_bias = ConditionalConfig { latent_bias: false, ..modulated.clone() };
    out.push(layer_case("cspn_forward_no_bias", SpnConfig::new(c).conditional(no_bias), opts, classes.clone(), Mode::Train, rng)?);
    let per_class = ConditionalConfig { kernel_mode: KernelMode::PerClass, ..modulated };
    out.push(layer_case("cspn_forward_per_class", SpnConfig::new(c).conditional(per_class), opts, classes, Mode::Train, rng)?);
    Ok(out)
}

/// Runs every case and returns one line of results per checked tensor.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<TensorCheck>> {
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::new();
    for case in cases(opts, &mut rng)? {
        report.extend(check(&case, opts, &mut rng)?);
    }
    Ok(report)
}

/// Names of the cases [`run_suite`] covers.
pub fn case_names() -> Vec<String> {
    let opts = GradcheckOptions { height: 2, width: 2, channels: 2, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    cases(&opts, &mut rng).map(|c| c.into_iter().map(|c| c.name).collect()).unwrap_or_default()
}
