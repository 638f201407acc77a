//! Value-level entry points: each call records a fresh tape, runs the layer
//! and returns plain tensors. Spectral normalization of the mask projection is
//! a training-time reparametrization and is not applied here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::SpnLayer;
use super::types::{AffineField, ClassCondition, FeatureMap, SelfLatentMask, SpnConfig, SpnParams, SpnState};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::norm::normalize;
use crate::nn::{Cond, Ctx, Mode, RunningStats};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

const PREFIX: &str = "spn";

/// Per-sample class labels and an optional latent batch `(B, dim z)`.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub classes: Vec<ClassCondition>,
    pub z: Option<Tensor<T>>,
}

impl<T: Real> Conditioning<T> {
    pub fn new(classes: Vec<ClassCondition>, z: Option<Tensor<T>>) -> Self {
        Self { classes, z }
    }

    fn ids(&self, num_classes: usize) -> Result<Vec<usize>> {
        if let Some(c) = self.classes.iter().find(|c| c.num_classes() != num_classes) {
            return Err(Error::Conditioning(format!(
                "condition built for {} classes, layer has {num_classes}",
                c.num_classes()
            )));
        }
        Ok(self.classes.iter().map(|c| c.class_id()).collect())
    }
}

/// Gradients of one SPN / cSPN evaluation.
#[derive(Clone, Debug)]
pub struct SpnGrads<T> {
    pub dx: Tensor<T>,
    pub dz: Option<Tensor<T>>,
    /// Same layout as the parameters; entries without a path to the output are zero.
    pub params: SpnParams<T>,
}

pub fn channelwise_normalize<T: Real>(
    x: &FeatureMap<T>,
    stats: &RunningStats<T>,
    mode: Mode,
) -> Result<(FeatureMap<T>, RunningStats<T>)> {
    stats.validate()?;
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let (y, next) = normalize(&mut g, xv, stats, mode)?;
    Ok((FeatureMap::new(g.value(y).clone())?, next))
}

pub fn invert_mask<T: Real>(m: &SelfLatentMask<T>) -> SelfLatentMask<T> {
    m.invert()
}

struct Session<T: Real> {
    layer: SpnLayer,
    store: ParamStore<T>,
}

impl<T: Real> Session<T> {
    fn new(params: &SpnParams<T>, state: &SpnState<T>) -> Result<Self> {
        let config = SpnConfig { spectral_norm: false, ..params.config.clone() };
        config.validate()?;
        let p = SpnParams { config: config.clone(), ..params.clone() };
        let mut store = ParamStore::new();
        p.write_to(&mut store, PREFIX, &mut ChaCha8Rng::seed_from_u64(0));
        if state.stats.channels() != config.channels || state.mask_stats.channels() != config.mask_width() {
            return Err(Error::Shape("running statistics do not match the layer width".into()));
        }
        state.stats.save(&mut store, &format!("{PREFIX}.stats"))?;
        state.mask_stats.save(&mut store, &format!("{PREFIX}.mask.norm.stats"))?;
        Ok(Self { layer: SpnLayer::new(PREFIX, config), store })
    }

    fn state(&self, old: &SpnState<T>) -> Result<SpnState<T>> {
        let (m, e) = (self.layer.config.momentum, self.layer.config.eps);
        let mut stats = RunningStats::load(&self.store, &format!("{PREFIX}.stats"), m, e)?;
        let mut mask_stats = RunningStats::load(&self.store, &format!("{PREFIX}.mask.norm.stats"), m, e)?;
        stats.momentum = old.stats.momentum;
        stats.eps = old.stats.eps;
        mask_stats.momentum = old.mask_stats.momentum;
        mask_stats.eps = old.mask_stats.eps;
        Ok(SpnState { stats, mask_stats })
    }

    fn cond(&self, g: &mut Graph<T>, cond: Option<&Conditioning<T>>, differentiable: bool) -> Result<Option<Cond>> {
        let Some(c) = cond else { return Ok(None) };
        let cc = self.layer.config.conditional.as_ref().ok_or_else(|| {
            Error::Conditioning("unconditional layer given a condition".into())
        })?;
        let classes = c.ids(cc.num_classes)?;
        let z = match (&c.z, cc.latent_bias) {
            (Some(z), true) => Some(if differentiable { g.input(z.clone()) } else { g.constant(z.clone()) }),
            (None, true) => return Err(Error::Conditioning("latent bias enabled but no latent vector".into())),
            (_, false) => None,
        };
        Ok(Some(Cond { classes, z }))
    }
}

/// `sigmoid(norm(project(x)))`, with the mask-branch statistics after the call.
pub fn build_self_latent_mask<T: Real>(
    x: &FeatureMap<T>,
    params: &SpnParams<T>,
    state: &SpnState<T>,
    cond: Option<&Conditioning<T>>,
    mode: Mode,
) -> Result<(SelfLatentMask<T>, SpnState<T>)> {
    let mut s = Session::new(params, state)?;
    if x.channels() != s.layer.config.channels {
        return Err(Error::Shape(format!(
            "layer expects {} channels, input has {}",
            s.layer.config.channels,
            x.channels()
        )));
    }
    let mut g = Graph::new();
    let c = s.cond(&mut g, cond, false)?;
    if c.is_none() && s.layer.config.conditional.is_some() {
        return Err(Error::Conditioning("conditional layer needs class labels".into()));
    }
    if let Some(c) = &c {
        c.check(usize::MAX, x.batch())?;
    }
    let xv = g.constant(x.tensor().clone());
    let (m, mi) = {
        let mut ctx = Ctx::new(&mut s.store, mode);
        s.layer.mask_branch(&mut g, &mut ctx, xv, c.as_ref())?
    };
    let mask = SelfLatentMask::from_parts(g.value(m).clone(), g.value(mi).clone());
    Ok((mask, s.state(state)?))
}

/// γ and β from a mask and its complement.
pub fn estimate_affine_field<T: Real>(
    m: &SelfLatentMask<T>,
    params: &SpnParams<T>,
    cond: Option<&Conditioning<T>>,
) -> Result<AffineField<T>> {
    let state = SpnState::new(&params.config);
    let mut s = Session::new(params, &state)?;
    let cfg = &s.layer.config;
    let (b, _, _, cm) = m.values().dims4()?;
    if cm != cfg.mask_width() {
        return Err(Error::Shape(format!("mask has {cm} channels, layer expects {}", cfg.mask_width())));
    }
    if cond.is_some() != cfg.conditional.is_some() {
        return Err(Error::Conditioning("condition must be given exactly for conditional layers".into()));
    }
    let mut g = Graph::new();
    let c = s.cond(&mut g, cond, false)?;
    if let Some(c) = &c {
        c.check(usize::MAX, b)?;
    }
    let mv = g.constant(m.values().clone());
    let miv = g.constant(m.inverse_values().clone());
    let mut ctx = Ctx::new(&mut s.store, Mode::Eval);
    let (gamma, beta) = s.layer.affine_field(&mut g, &mut ctx, mv, miv, c.as_ref())?;
    Ok(AffineField { gamma: g.value(gamma).clone(), beta: g.value(beta).clone() })
}

struct Run<T: Real> {
    g: Graph<T>,
    x: Var,
    z: Option<Var>,
    out: Var,
    session: Session<T>,
}

fn run<T: Real>(
    x: &FeatureMap<T>,
    params: &SpnParams<T>,
    state: &SpnState<T>,
    cond: Option<&Conditioning<T>>,
    mode: Mode,
) -> Result<Run<T>> {
    let mut session = Session::new(params, state)?;
    let mut g = Graph::new();
    let xv = g.input(x.tensor().clone());
    let c = session.cond(&mut g, cond, true)?;
    let out = {
        let mut ctx = Ctx::new(&mut session.store, mode);
        session.layer.forward(&mut g, &mut ctx, xv, c.as_ref())?.output
    };
    Ok(Run { g, x: xv, z: c.and_then(|c| c.z), out, session })
}

/// `y = γ ⊙ (scale · x̂ + shift) + β` for an unconditional layer.
pub fn spn_forward<T: Real>(
    x: &FeatureMap<T>,
    params: &SpnParams<T>,
    state: &SpnState<T>,
    mode: Mode,
) -> Result<(FeatureMap<T>, SpnState<T>)> {
    if params.config.conditional.is_some() {
        return Err(Error::Conditioning("conditional layer: use cspn_forward".into()));
    }
    let r = run(x, params, state, None, mode)?;
    Ok((FeatureMap::new(r.g.value(r.out).clone())?, r.session.state(state)?))
}

/// Conditional variant: class-conditioned mask norm, modulated kernels and
/// an optional latent bias.
pub fn cspn_forward<T: Real>(
    x: &FeatureMap<T>,
    cond: &Conditioning<T>,
    params: &SpnParams<T>,
    state: &SpnState<T>,
    mode: Mode,
) -> Result<(FeatureMap<T>, SpnState<T>)> {
    if params.config.conditional.is_none() {
        return Err(Error::Conditioning("unconditional layer: use spn_forward".into()));
    }
    let r = run(x, params, state, Some(cond), mode)?;
    Ok((FeatureMap::new(r.g.value(r.out).clone())?, r.session.state(state)?))
}

/// Forward then reverse pass seeded with `dy`.
pub fn layer_backward<T: Real>(
    x: &FeatureMap<T>,
    params: &SpnParams<T>,
    state: &SpnState<T>,
    cond: Option<&Conditioning<T>>,
    mode: Mode,
    dy: &Tensor<T>,
) -> Result<SpnGrads<T>> {
    let r = run(x, params, state, cond, mode)?;
    if dy.shape() != r.g.shape(r.out) {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            r.g.shape(r.out)
        )));
    }
    let grads = r.g.backward_with(r.out, dy.clone())?;
    let zero_like = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
    let dx = grads.get(r.x).cloned().unwrap_or_else(|| zero_like(x.tensor()));
    let dz = match (r.z, cond.and_then(|c| c.z.as_ref())) {
        (Some(v), Some(z)) => Some(grads.get(v).cloned().unwrap_or_else(|| zero_like(z))),
        _ => None,
    };
    let mut pg = params.clone();
    pg.for_each_mut(|name, t| {
        *t = grads.param(&format!("{PREFIX}.{name}")).cloned().unwrap_or_else(|| zero_like(t));
    });
    Ok(SpnGrads { dx, dz, params: pg })
}
