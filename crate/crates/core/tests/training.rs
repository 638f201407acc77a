use std::collections::HashSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spn::autograd::Graph;
use spn::checkpoint::Checkpoint;
use spn::data::{shapes_dataset, Batch, BatchIterator, Dataset, IteratorState, ShapesConfig};
use spn::models::{build_discriminator, build_generator, DiscriminatorSpec, GeneratorSpec, NormChoice};
use spn::params::ParamStore;
use spn::training::*;
use spn::{Error, Result, Tensor};

fn logits(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect()
}

fn avg(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += f(x);
    }
    s / v.len() as f64
}

fn graph_d(kind: LossKind, real: &[f64], fake: &[f64]) -> f64 {
    let mut g = Graph::new();
    let all: Vec<f64> = real.iter().chain(fake).copied().collect();
    let l = g.input(Tensor::new([all.len(), 1], all).unwrap());
    let loss = d_loss(&mut g, kind, l, real.len()).unwrap();
    g.value(loss).data()[0]
}

fn graph_g(kind: LossKind, fake: &[f64]) -> f64 {
    let mut g = Graph::new();
    let l = g.input(Tensor::new([fake.len(), 1], fake.to_vec()).unwrap());
    let loss = g_loss(&mut g, kind, l).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn hinge_examples() {
    assert_eq!(hinge_d_loss(&[1.0, 3.0], &[-1.0, -2.5]), 0.0);
    assert_eq!(hinge_d_loss(&[0.0; 4], &[0.0; 4]), 2.0);
    assert_eq!(graph_d(LossKind::Hinge, &[0.0; 4], &[0.0; 4]), 2.0);
}

#[test]
fn ce_and_lsgan_examples() {
    let ln2 = std::f64::consts::LN_2;
    assert!((ce_d_loss(&[0.0; 3], &[0.0; 3]) - 2.0 * ln2).abs() < 1e-15);
    assert!((graph_d(LossKind::Ce, &[0.0; 3], &[0.0; 3]) - 2.0 * ln2).abs() < 1e-15);
    assert_eq!(lsgan_d_loss(&[1.0, 1.0], &[0.0, 0.0]), 0.0);
    assert_eq!(graph_d(LossKind::Lsgan, &[1.0, 1.0], &[0.0, 0.0]), 0.0);
    assert_eq!(lsgan_g_loss(&[1.0, 1.0]), 0.0);
}

#[test]
fn losses_match_straight_line_oracles() {
    let softplus = |x: f64| (1.0 + x.exp()).ln();
    for seed in 0..20 {
        let (real, fake) = (logits(7, seed), logits(5, seed + 100));
        let oracles = [
            (
                LossKind::Hinge,
                avg(&real, |r| (1.0 - r).max(0.0)) + avg(&fake, |f| (1.0 + f).max(0.0)),
                -avg(&fake, |f| f),
            ),
            (LossKind::Ce, avg(&real, |r| softplus(-r)) + avg(&fake, softplus), avg(&fake, |f| softplus(-f))),
            (
                LossKind::Lsgan,
                0.5 * avg(&real, |r| (r - 1.0).powi(2)) + 0.5 * avg(&fake, |f| f * f),
                0.5 * avg(&fake, |f| (f - 1.0).powi(2)),
            ),
        ];
        for (kind, d, g) in oracles {
            assert!((d_loss_value(kind, &real, &fake) - d).abs() < 1e-12, "{kind:?}");
            assert!((g_loss_value(kind, &fake) - g).abs() < 1e-12, "{kind:?}");
            assert!((graph_d(kind, &real, &fake) - d).abs() < 1e-12, "{kind:?}");
            assert!((graph_g(kind, &fake) - g).abs() < 1e-12, "{kind:?}");
        }
    }
}

#[test]
fn graph_loss_gradients_match_finite_differences() {
    let (real, fake) = (logits(3, 7), logits(4, 8));
    for kind in [LossKind::Hinge, LossKind::Ce, LossKind::Lsgan] {
        let all: Vec<f64> = real.iter().chain(&fake).copied().collect();
        let mut g = Graph::new();
        let l = g.input(Tensor::new([7, 1], all.clone()).unwrap());
        let loss = d_loss(&mut g, kind, l, 3).unwrap();
        let grad = g.backward(loss).unwrap().get(l).unwrap().clone();
        for i in 0..7 {
            let f = |d: f64| {
                let mut v = all.clone();
                v[i] += d;
                d_loss_value(kind, &v[..3], &v[3..])
            };
            let num = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((grad.data()[i] - num).abs() < 1e-6, "{kind:?} {i}");
        }
    }
}

#[test]
fn d_loss_needs_both_halves() {
    let mut g = Graph::<f64>::new();
    let l = g.input(Tensor::zeros([4, 1]));
    assert!(d_loss(&mut g, LossKind::Hinge, l, 0).is_err());
    assert!(d_loss(&mut g, LossKind::Hinge, l, 4).is_err());
    assert!(LossKind::parse("wgan").is_err());
}

fn schedule_cfg(total: usize, decay: usize) -> TrainConfig {
    TrainConfig { lr_g: 2e-4, lr_d: 4e-4, total_iters: total, decay_last_iters: decay, ..TrainConfig::cifar() }
}

#[test]
fn schedule_examples() {
    let cfg = schedule_cfg(100, 40);
    assert_eq!(lr_at(0, &cfg), (2e-4, 4e-4));
    assert_eq!(lr_at(60, &cfg), (2e-4, 4e-4));
    let (g, d) = lr_at(80, &cfg);
    assert!((g - 1e-4).abs() < 1e-18 && (d - 2e-4).abs() < 1e-18);
    assert_eq!(lr_at(100, &cfg), (0.0, 0.0));
    assert_eq!(lr_at(99, &schedule_cfg(100, 0)), (2e-4, 4e-4));
    assert_eq!(lr_at(100, &schedule_cfg(100, 0)), (0.0, 0.0));
    let whole = schedule_cfg(50_000, 50_000);
    assert_eq!(lr_at(25_000, &whole).0, 1e-4);
}

proptest! {
    #[test]
    fn schedule_is_monotone_continuous_and_ends_at_zero(total in 1usize..5000, frac in 0.0f64..=1.0, at in 0.0f64..1.0) {
        let decay = (total as f64 * frac) as usize;
        let cfg = schedule_cfg(total, decay);
        let i = (at * total as f64) as usize;
        let (a, b) = (lr_at(i, &cfg).0, lr_at(i + 1, &cfg).0);
        prop_assert!(b <= a);
        if decay > 0 {
            prop_assert!(a - b <= cfg.lr_g / decay as f64 + 1e-18);
        }
        prop_assert_eq!(lr_at(total, &cfg), (0.0, 0.0));
    }
}

#[test]
fn config_validation_aggregates() {
    let cfg = TrainConfig { n_dis: 0, decay_last_iters: 10, total_iters: 5, adam_beta2: 1.0, ..TrainConfig::cifar() };
    match cfg.validate() {
        Err(Error::Config(list)) => assert_eq!(list.len(), 3, "{list:?}"),
        other => panic!("{other:?}"),
    }
    assert!(TrainConfig::cifar().validate().is_ok());
    assert_eq!(TrainConfig::cifar().batch_g, 2 * TrainConfig::cifar().batch_d);
    let t = TrainConfig::ttur();
    assert_eq!((t.lr_g, t.lr_d, t.n_dis), (1e-4, 4e-4, 1));
}

#[test]
fn adam_matches_hand_update() {
    let mut store = ParamStore::<f64>::new();
    store.add_param("w", Tensor::new([2], vec![1.0, -2.0]).unwrap());
    let mut opt = Adam::new(0.0, 0.9, 1e-8);
    let grad_step = |store: &mut ParamStore<f64>, opt: &mut Adam<f64>, lr: f64| {
        let mut g = Graph::new();
        let w = g.param("w", store.get("w").unwrap(), true);
        let c = g.constant(Tensor::new([2], vec![3.0, 0.5]).unwrap());
        let p = g.mul(w, c).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        opt.update(store, &grads, lr).unwrap();
    };
    grad_step(&mut store, &mut opt, 0.1);
    // β1 = 0: m̂ = g, v̂ = g², so the first step is lr·sign(g).
    let w = store.get("w").unwrap().data().to_vec();
    assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] + 2.1).abs() < 1e-8);
    grad_step(&mut store, &mut opt, 0.1);
    let v2 = |g: f64| (0.9 * 0.1 * g * g + 0.1 * g * g) / (1.0 - 0.81);
    let w1 = 1.0 - 0.1 * 3.0 / (3.0 + 1e-8);
    let expect0 = w1 - 0.1 * 3.0 / (v2(3.0).sqrt() + 1e-8);
    assert!((store.get("w").unwrap().data()[0] - expect0).abs() < 1e-12);
}

fn tiny(norm: NormChoice, classes: Option<usize>, n_dis: usize, seed: u64) -> (Trainer, BatchIterator) {
    let mut gs = GeneratorSpec::gen32(norm).scaled(8);
    let mut ds = DiscriminatorSpec::disc32().scaled(8);
    if let Some(k) = classes {
        gs = gs.with_classes(k);
        ds = ds.with_projection(k);
    }
    let cfg = TrainConfig {
        n_dis,
        batch_d: 4,
        batch_g: 8,
        total_iters: 1000,
        decay_last_iters: 0,
        seed,
        ..TrainConfig::cifar()
    };
    let data: Arc<Dataset> = Arc::new(shapes_dataset(&ShapesConfig::new(64, 32, 3)).unwrap());
    let it = BatchIterator::new(data, 4, seed, true).unwrap();
    (Trainer::new(cfg, build_generator(&gs).unwrap(), build_discriminator(&ds).unwrap()).unwrap(), it)
}

struct Recording<'a> {
    inner: &'a mut BatchIterator,
    seen: Vec<Vec<usize>>,
}

impl BatchSource for Recording<'_> {
    fn next_real(&mut self) -> Result<Batch<f32>> {
        let b = self.inner.next_real()?;
        self.seen.push(b.indices.clone());
        Ok(b)
    }
}

#[test]
fn n_dis_consumes_distinct_batches() {
    let (mut t, mut it) = tiny(NormChoice::Spn, None, 5, 0);
    let mut rec = Recording { inner: &mut it, seen: Vec::new() };
    let m = t.step(&mut rec).unwrap();
    assert_eq!(rec.seen.len(), 5);
    assert_eq!(m.batches.len(), 5);
    let all: HashSet<usize> = rec.seen.iter().flatten().copied().collect();
    assert_eq!(all.len(), 20, "a sample repeated within one generator cycle");
    assert_eq!(t.state.iteration, 1);
}

#[test]
fn zero_discriminator_gives_constant_generator_loss() {
    let (mut t, mut it) = tiny(NormChoice::Bn, None, 1, 1);
    t.cfg.lr_d = 0.0;
    let names: Vec<String> = t.state.d_params.trainable().map(|e| e.name.clone()).collect();
    for n in names {
        let shape = t.state.d_params.get(&n).unwrap().shape().to_vec();
        t.state.d_params.set(&n, Tensor::zeros(shape)).unwrap();
    }
    let a = t.step(&mut it).unwrap();
    let b = t.step(&mut it).unwrap();
    assert_eq!(a.g_loss, 0.0);
    assert_eq!(b.g_loss, a.g_loss);
    assert_eq!(a.d_loss, 2.0);
}

#[test]
fn seed_identical_runs_give_identical_losses() {
    let run = || {
        let (mut t, mut it) = tiny(NormChoice::Spn, None, 1, 7);
        (0..100).map(|_| t.step(&mut it).map(|m| (m.d_loss, m.g_loss)).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.iter().all(|(d, g)| d.is_finite() && g.is_finite()));
}

#[test]
fn checkpoint_resume_reproduces_next_step() {
    let (mut a, mut it_a) = tiny(NormChoice::Cspn, Some(3), 2, 11);
    for _ in 0..3 {
        a.step(&mut it_a).unwrap();
    }
    let mut ckpt = Checkpoint::new();
    a.state.save_into(&mut ckpt);
    let st = it_a.state();
    let bytes = ckpt.to_bytes();
    let next_a = a.step(&mut it_a).unwrap();

    let (mut b, _) = tiny(NormChoice::Cspn, Some(3), 2, 999);
    b.cfg.seed = 11;
    b.state.load_from(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let mut it_b = BatchIterator::new(Arc::new(shapes_dataset(&ShapesConfig::new(64, 32, 3)).unwrap()), 4, 11, true).unwrap();
    it_b.restore(IteratorState { epoch: st.epoch, pos: st.pos }).unwrap();
    let next_b = b.step(&mut it_b).unwrap();
    assert_eq!(next_b.iteration, 3);
    assert!((next_a.d_loss - next_b.d_loss).abs() < 1e-6);
    assert!((next_a.g_loss - next_b.g_loss).abs() < 1e-6);
}

#[test]
fn non_finite_parameters_abort_with_names() {
    let (mut t, mut it) = tiny(NormChoice::Spn, None, 1, 2);
    let w = t.state.g_params.get_mut("g.final_conv.weight").unwrap();
    w.data_mut()[0] = f32::NAN;
    match t.step(&mut it) {
        Err(Error::Diverged { iteration, what, tensors }) => {
            assert_eq!(iteration, 0);
            assert_eq!(what, "generator output");
            assert!(tensors.contains("g.final_conv.weight"), "{tensors}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|m| m.g_loss)),
    }
}

#[test]
fn incompatible_models_are_rejected() {
    let gs = GeneratorSpec::gen32(NormChoice::Cbn).scaled(8).with_classes(3);
    let ds = DiscriminatorSpec::disc32().scaled(8);
    let r = Trainer::new(TrainConfig::cifar(), build_generator(&gs).unwrap(), build_discriminator(&ds).unwrap());
    assert!(matches!(r, Err(Error::Config(_))));
}

fn run_spec(dir: &std::path::Path, total: usize, resume: bool) -> RunSpec {
    let (t, _) = tiny(NormChoice::Spn, None, 1, 5);
    RunSpec {
        out_dir: dir.to_path_buf(),
        train: TrainConfig { total_iters: total, checkpoint_every: 3, sample_every: 2, ..t.cfg.clone() },
        generator: t.gen.spec.clone(),
        discriminator: t.disc.spec.clone(),
        dataset: Arc::new(shapes_dataset(&ShapesConfig::new(64, 32, 3)).unwrap()),
        snapshot: "seed = 5\n".into(),
        resume,
    }
}

fn strip_wall_time(log: &str) -> Vec<String> {
    log.lines().map(|l| l.rsplit_once(' ').map_or(l, |(head, _)| head).to_string()).collect()
}

#[test]
fn run_training_writes_artifacts_and_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let s = run_training(&run_spec(&full, 8, false)).unwrap();
    assert_eq!(s.iterations, 8);
    for f in ["config.txt", "version.txt", "metrics.log", "checkpoints/latest.ckpt", "checkpoints/iter_0000003.ckpt", "samples/iter_0000008.png"] {
        assert!(full.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(full.join("metrics.log")).unwrap();
    assert_eq!(log.lines().next(), Some(METRICS_HEADER));
    assert_eq!(log.lines().count(), 9);

    let part = tmp.path().join("part");
    run_training(&run_spec(&part, 6, false)).unwrap();
    let resumed = run_training(&run_spec(&part, 8, true)).unwrap();
    assert_eq!(resumed.resumed_from, Some(6));
    let log2 = std::fs::read_to_string(part.join("metrics.log")).unwrap();
    assert_eq!(strip_wall_time(&log), strip_wall_time(&log2));
}

#[test]
fn conditional_training_runs() {
    let (mut t, mut it) = tiny(NormChoice::Cspn, Some(3), 1, 3);
    let m = t.step(&mut it).unwrap();
    assert!(m.d_loss.is_finite() && m.g_loss.is_finite());
    let z = Tensor::from_fn([3, t.gen.spec.z_dim], |i| (i as f32 * 0.37).sin());
    let img = t.sample(&z, Some(&[0, 1, 2])).unwrap();
    assert_eq!(img.shape(), &[3, 32, 32, 3]);
}
