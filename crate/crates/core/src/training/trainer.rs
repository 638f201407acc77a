use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::losses::{d_loss, g_loss};
use super::optim::{grad_norm, non_finite_grads, Adam};
use super::schedule::lr_at;
use super::TrainConfig;
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{Batch, BatchIterator};
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator};
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Anything that yields real mini-batches.
pub trait BatchSource {
    fn next_real(&mut self) -> Result<Batch<f32>>;
}

impl BatchSource for BatchIterator {
    fn next_real(&mut self) -> Result<Batch<f32>> {
        Ok(self.next_batch())
    }
}

/// Losses and diagnostics of one generator cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Iteration index the step ran at (0-based).
    pub iteration: usize,
    /// Mean discriminator loss over the cycle's D updates.
    pub d_loss: f64,
    pub g_loss: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub d_grad_norm: f64,
    pub g_grad_norm: f64,
    /// `(epoch, start)` of every real batch consumed.
    pub batches: Vec<(u64, usize)>,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    pub g_params: ParamStore<f32>,
    pub d_params: ParamStore<f32>,
    pub g_opt: Adam<f32>,
    pub d_opt: Adam<f32>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh parameters drawn from `cfg.seed`; the training stream is
    /// independent of the initialization stream.
    pub fn init(gen: &Generator, disc: &Discriminator, cfg: &TrainConfig) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let g_params = gen.new_store(&mut init)?;
        let d_params = disc.new_store(&mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let adam = || Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self { iteration: 0, g_params, d_params, g_opt: adam(), d_opt: adam(), rng })
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.set_meta("iteration", self.iteration);
        ckpt.add_store("g", &self.g_params);
        ckpt.add_store("d", &self.d_params);
        self.g_opt.save_into(ckpt, "opt_g");
        self.d_opt.save_into(ckpt, "opt_d");
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        ckpt.set_meta("rng.seed", seed);
        ckpt.set_meta("rng.stream", self.rng.get_stream());
        ckpt.set_meta("rng.word_pos", self.rng.get_word_pos());
    }

    /// Overwrites this state from `ckpt`; stores must already have the layout.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.iteration = ckpt.meta_parse("iteration")?;
        ckpt.load_store("g", &mut self.g_params)?;
        ckpt.load_store("d", &mut self.d_params)?;
        self.g_opt.load_from(ckpt, "opt_g")?;
        self.d_opt.load_from(ckpt, "opt_d")?;
        let hex = ckpt.meta("rng.seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(Error::Checkpoint("rng.seed must be 64 hex digits".into()));
        }
        for (i, s) in seed.iter_mut().enumerate() {
            *s = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Checkpoint("rng.seed is not hexadecimal".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(ckpt.meta_parse("rng.stream")?);
        rng.set_word_pos(ckpt.meta_parse("rng.word_pos")?);
        self.rng = rng;
        Ok(())
    }
}

/// Models, configuration and state bundled for the training loop.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub state: TrainState,
}

fn check_compatible(gen: &Generator, disc: &Discriminator) -> Result<()> {
    let mut errs = Vec::new();
    if gen.spec.resolution != disc.spec.resolution {
        errs.push(format!("generator resolution {} vs discriminator {}", gen.spec.resolution, disc.spec.resolution));
    }
    let gk = gen.is_conditional().then_some(gen.spec.num_classes).flatten();
    if gk != disc.spec.num_classes {
        errs.push(format!("generator classes {gk:?} vs discriminator projection classes {:?}", disc.spec.num_classes));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, gen: Generator, disc: Discriminator) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&gen, &disc)?;
        let state = TrainState::init(&gen, &disc, &cfg)?;
        Ok(Self { cfg, gen, disc, state })
    }

    pub fn step(&mut self, data: &mut dyn BatchSource) -> Result<StepMetrics> {
        train_step(&mut self.state, &self.gen, &self.disc, data, &self.cfg)
    }

    /// Images for fixed latents and classes in eval mode; no state changes.
    pub fn sample(&mut self, z: &Tensor<f32>, classes: Option<&[usize]>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let mut ctx = Ctx::frozen(&mut self.state.g_params, Mode::Eval);
        let out = self.gen.forward(&mut g, &mut ctx, zv, classes)?;
        Ok(g.value(out.image).clone())
    }
}

fn normal_z(rng: &mut ChaCha8Rng, b: usize, dim: usize) -> Tensor<f32> {
    Tensor::from_fn([b, dim], |_| rng.sample::<f32, _>(StandardNormal))
}

fn sample_classes(rng: &mut ChaCha8Rng, gen: &Generator, b: usize) -> Option<Vec<usize>> {
    let k = gen.spec.num_classes.filter(|_| gen.is_conditional())?;
    Some((0..b).map(|_| rng.random_range(0..k)).collect())
}

fn hflip(images: &mut Tensor<f32>, rng: &mut ChaCha8Rng) -> Result<()> {
    let (b, h, w, c) = images.dims4()?;
    let data = images.data_mut();
    for i in 0..b {
        if rng.random_bool(0.5) {
            for y in 0..h {
                let row = &mut data[((i * h + y) * w) * c..((i * h + y + 1) * w) * c];
                for x in 0..w / 2 {
                    for ch in 0..c {
                        row.swap(x * c + ch, (w - 1 - x) * c + ch);
                    }
                }
            }
        }
    }
    Ok(())
}

fn diverged(iteration: usize, what: &str, tensors: Vec<String>) -> Error {
    let tensors = if tensors.is_empty() { "no parameter is non-finite".to_string() } else { tensors.join(", ") };
    log::error!("training diverged at iteration {iteration}: {what} ({tensors})");
    Error::Diverged { iteration, what: what.into(), tensors }
}

/// Parameters and buffers of both networks holding non-finite values.
fn non_finite_entries(state: &TrainState) -> Vec<String> {
    [&state.g_params, &state.d_params]
        .into_iter()
        .flat_map(|s| s.entries().iter().filter(|e| !e.tensor.all_finite()).map(|e| e.name.clone()))
        .collect()
}

/// Non-finite stored tensors followed by the parameters whose gradients blew up.
fn with_sources(state: &TrainState, grads: Vec<String>) -> Vec<String> {
    let mut out = non_finite_entries(state);
    out.extend(grads.into_iter().map(|n| format!("{n} (gradient)")));
    out
}

fn scalar(g: &Graph<f32>, v: Var) -> f64 {
    f64::from(g.value(v).data()[0])
}

/// `n_dis` discriminator updates on distinct real batches, then one
/// generator update. Non-finite values anywhere in the step abort with
/// [`Error::Diverged`].
pub fn train_step(
    state: &mut TrainState,
    gen: &Generator,
    disc: &Discriminator,
    data: &mut dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    match step_inner(state, gen, disc, data, cfg) {
        Err(Error::NonFinite(what)) => Err(diverged(state.iteration, &what, non_finite_entries(state))),
        other => other,
    }
}

fn step_inner(
    state: &mut TrainState,
    gen: &Generator,
    disc: &Discriminator,
    data: &mut dyn BatchSource,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let it = state.iteration;
    let (lr_g, lr_d) = lr_at(it, cfg);
    let mut d_total = 0.0;
    let mut d_norm = 0.0;
    let mut batches = Vec::with_capacity(cfg.n_dis);
    for _ in 0..cfg.n_dis {
        let mut real = data.next_real()?;
        batches.push((real.epoch, real.start));
        let b = real.images.shape()[0];
        if cfg.hflip {
            hflip(&mut real.images, &mut state.rng)?;
        }
        let z = normal_z(&mut state.rng, b, gen.spec.z_dim);
        let fake_classes = sample_classes(&mut state.rng, gen, b);
        let fake = {
            let mut g = Graph::new();
            let zv = g.input(z);
            let mut ctx = Ctx::frozen(&mut state.g_params, Mode::Train);
            let out = gen.forward(&mut g, &mut ctx, zv, fake_classes.as_deref())?;
            g.value(out.image).clone()
        };
        if !fake.all_finite() {
            return Err(diverged(it, "generator output", non_finite_entries(state)));
        }
        let classes = match (&fake_classes, real.labels) {
            (Some(fc), Some(rl)) => Some(rl.into_iter().chain(fc.iter().copied()).collect::<Vec<_>>()),
            (Some(_), None) => return Err(Error::Conditioning("conditional training needs a labelled dataset".into())),
            (None, _) => None,
        };
        let mut g = Graph::new();
        let x = g.input(Tensor::concat_rows(&[&real.images, &fake])?);
        let mut ctx = Ctx::new(&mut state.d_params, Mode::Train);
        let logits = disc.forward(&mut g, &mut ctx, x, classes.as_deref())?;
        let loss = d_loss(&mut g, cfg.loss, logits, b)?;
        let value = scalar(&g, loss);
        if !value.is_finite() {
            return Err(diverged(it, "discriminator loss", non_finite_entries(state)));
        }
        let grads = g.backward(loss)?;
        let bad = non_finite_grads(&state.d_params, &grads);
        if !bad.is_empty() {
            let bad = with_sources(state, bad);
            return Err(diverged(it, "discriminator gradient", bad));
        }
        d_norm = grad_norm(&state.d_params, &grads);
        state.d_opt.update(&mut state.d_params, &grads, lr_d)?;
        d_total += value;
    }

    let bg = cfg.batch_g;
    let z = normal_z(&mut state.rng, bg, gen.spec.z_dim);
    let classes = sample_classes(&mut state.rng, gen, bg);
    let mut g = Graph::new();
    let zv = g.input(z);
    let image = {
        let mut ctx = Ctx::new(&mut state.g_params, Mode::Train);
        gen.forward(&mut g, &mut ctx, zv, classes.as_deref())?.image
    };
    let logits = {
        let mut ctx = Ctx::frozen(&mut state.d_params, Mode::Train);
        disc.forward(&mut g, &mut ctx, image, classes.as_deref())?
    };
    let loss = g_loss(&mut g, cfg.loss, logits)?;
    let g_value = scalar(&g, loss);
    if !g_value.is_finite() {
        return Err(diverged(it, "generator loss", non_finite_entries(state)));
    }
    let grads = g.backward(loss)?;
    let bad = non_finite_grads(&state.g_params, &grads);
    if !bad.is_empty() {
        let bad = with_sources(state, bad);
        return Err(diverged(it, "generator gradient", bad));
    }
    let g_norm = grad_norm(&state.g_params, &grads);
    state.g_opt.update(&mut state.g_params, &grads, lr_g)?;
    state.iteration += 1;
    Ok(StepMetrics {
        iteration: it,
        d_loss: d_total / cfg.n_dis as f64,
        g_loss: g_value,
        lr_g,
        lr_d,
        d_grad_norm: d_norm,
        g_grad_norm: g_norm,
        batches,
    })
}
