use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spn::nn::norm::RunningStats;
use spn::nn::Mode;
use spn::ops::conv::depthwise_conv2d;
use spn::spn::*;
use spn::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], scale: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| scale * r.sample::<f64, _>(StandardNormal))
}

fn fmap(t: Tensor<f64>) -> FeatureMap<f64> {
    FeatureMap::new(t).unwrap()
}

fn dims(t: &Tensor<f64>) -> (usize, usize, usize, usize) {
    t.dims4().unwrap()
}

/// Per-channel mean and biased variance over (B, H, W), two passes.
fn two_pass_stats(t: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (b, h, w, c) = dims(t);
    let n = (b * h * w) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        mean[i % c] += v / n;
    }
    let mut var = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        var[i % c] += (v - mean[i % c]).powi(2) / n;
    }
    (mean, var)
}

fn normalize_oracle(t: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let c = dims(t).3;
    let (mean, var) = two_pass_stats(t);
    Tensor::from_fn(t.shape().to_vec(), |i| (t.data()[i] - mean[i % c]) / (var[i % c] + eps).sqrt())
}

/// Zero-padded depthwise convolution by direct summation.
fn dw_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (b, h, w, c) = dims(x);
    let ks = k.shape()[0];
    let p = (ks / 2) as isize;
    let mut out = Tensor::zeros([b, h, w, c]);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    let mut s = 0.0;
                    for dy in 0..ks {
                        for dx in 0..ks {
                            let (sy, sx) = (y as isize + dy as isize - p, xx as isize + dx as isize - p);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                s += x.at4(n, sy as usize, sx as usize, ch) * k.data()[(dy * ks + dx) * c + ch];
                            }
                        }
                    }
                    out.data_mut()[((n * h + y) * w + xx) * c + ch] = s;
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Unconditional SPN computed step by step from the parameter tensors.
fn spn_oracle(x: &Tensor<f64>, p: &SpnParams<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let (b, h, w, c) = dims(x);
    let cm = p.config.mask_width();
    let wt = &p.mask_proj_weight;
    let mut proj = Tensor::zeros([b, h, w, cm]);
    for px in 0..b * h * w {
        for o in 0..cm {
            let mut s = p.mask_proj_bias.data()[o];
            for i in 0..c {
                s += x.data()[px * c + i] * wt.data()[i * cm + o];
            }
            proj.data_mut()[px * cm + o] = s;
        }
    }
    let pn = normalize_oracle(&proj, p.config.eps);
    let m = Tensor::from_fn(pn.shape().to_vec(), |i| {
        sigmoid(pn.data()[i] * p.mask_norm_scale.data()[i % cm] + p.mask_norm_shift.data()[i % cm])
    });
    let full = |t: &Tensor<f64>| Tensor::from_fn([b, h, w, c], |i| t.data()[(i / c) * cm + if cm == 1 { 0 } else { i % c }]);
    let (mf, mb) = (full(&m), full(&m.map(|v| 1.0 - v)));
    let add = |a: Tensor<f64>, b: Tensor<f64>| a.zip_map(&b, |u, v| u + v).unwrap();
    let gamma = add(dw_oracle(&mf, &p.dw_gamma_fg), dw_oracle(&mb, &p.dw_gamma_bg));
    let beta = add(dw_oracle(&mf, &p.dw_beta_fg), dw_oracle(&mb, &p.dw_beta_bg));
    let xh = normalize_oracle(x, p.config.eps);
    let y = Tensor::from_fn(x.shape().to_vec(), |i| {
        (xh.data()[i] * p.affine_scale.data()[i % c] + p.affine_shift.data()[i % c]) * gamma.data()[i] + beta.data()[i]
    });
    (y, m)
}

fn jittered(cfg: &SpnConfig, seed: u64) -> SpnParams<f64> {
    let mut r = rng(seed);
    let mut p = SpnParams::<f64>::init(cfg, &mut r).unwrap();
    p.for_each_mut(|_, t| {
        for v in t.data_mut() {
            *v += 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    });
    p
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

#[test]
fn normalize_two_values_map_to_unit_pair() {
    let x = fmap(Tensor::new([1, 1, 2, 1], vec![1.0, 3.0]).unwrap());
    let (y, _) = channelwise_normalize(&x, &RunningStats::new(1), Mode::Train).unwrap();
    assert!((y.tensor().data()[0] + 1.0).abs() < 1e-5);
    assert!((y.tensor().data()[1] - 1.0).abs() < 1e-5);
}

#[test]
fn normalize_fixed_point_on_standardized_input() {
    let x = normalize_oracle(&randn(&[2, 4, 4, 3], 1.0, &mut rng(1)), 0.0);
    let (y, _) = channelwise_normalize(&fmap(x.clone()), &RunningStats::with(3, 0.9, 1e-12), Mode::Train).unwrap();
    assert!(max_diff(y.tensor(), &x) < 1e-6);
}

#[test]
fn normalize_matches_two_pass_oracle_and_updates_running_stats() {
    let x = randn(&[2, 4, 4, 3], 2.0, &mut rng(2)).map(|v| v + 1.5);
    let stats = RunningStats::with(3, 0.9, 1e-5);
    let (y, next) = channelwise_normalize(&fmap(x.clone()), &stats, Mode::Train).unwrap();
    assert!(max_diff(y.tensor(), &normalize_oracle(&x, 1e-5)) < 1e-10);
    let (ym, yv) = two_pass_stats(y.tensor());
    for j in 0..3 {
        assert!(ym[j].abs() < 1e-5 && (yv[j] - 1.0).abs() < 1e-4);
    }
    let (m, v) = two_pass_stats(&x);
    for j in 0..3 {
        assert!((next.mean[j] - 0.1 * m[j]).abs() < 1e-12);
        assert!((next.var[j] - (0.9 + 0.1 * v[j])).abs() < 1e-12);
    }
    assert_eq!(next.updates, 1);
    let (e, same) = channelwise_normalize(&fmap(x.clone()), &next, Mode::Eval).unwrap();
    assert_eq!(same, next);
    let expect = Tensor::from_fn(x.shape().to_vec(), |i| (x.data()[i] - next.mean[i % 3]) / (next.var[i % 3] + 1e-5).sqrt());
    assert!(max_diff(e.tensor(), &expect) < 1e-12);
}

#[test]
fn normalize_rejects_eval_before_train_and_non_finite_input() {
    let x = fmap(randn(&[1, 2, 2, 2], 1.0, &mut rng(3)));
    assert!(matches!(channelwise_normalize(&x, &RunningStats::new(2), Mode::Eval), Err(Error::UninitializedStats)));
    let mut bad = randn(&[1, 2, 2, 2], 1.0, &mut rng(3));
    bad.data_mut()[1] = f64::NAN;
    assert!(FeatureMap::new(bad).is_err());
}

#[test]
fn zero_projection_gives_half_mask() {
    let cfg = SpnConfig::new(3);
    let mut p = SpnParams::<f64>::init(&cfg, &mut rng(4)).unwrap();
    p.mask_proj_weight = Tensor::zeros(p.mask_proj_weight.shape().to_vec());
    let x = fmap(randn(&[2, 3, 3, 3], 1.0, &mut rng(5)));
    let (m, _) = build_self_latent_mask(&x, &p, &SpnState::new(&cfg), None, Mode::Train).unwrap();
    assert!(m.values().data().iter().all(|&v| v == 0.5));
    assert!(invert_mask(&m).values().data().iter().all(|&v| v == 0.5));
}

#[test]
fn saturated_shift_pushes_mask_towards_one() {
    let cfg = SpnConfig::new(2);
    let mut p = SpnParams::<f64>::init(&cfg, &mut rng(6)).unwrap();
    p.mask_proj_weight = Tensor::zeros(p.mask_proj_weight.shape().to_vec());
    p.mask_norm_shift = Tensor::full([2], 20.0);
    let x = fmap(randn(&[1, 4, 4, 2], 1.0, &mut rng(7)));
    let (m, _) = build_self_latent_mask(&x, &p, &SpnState::new(&cfg), None, Mode::Train).unwrap();
    assert!(m.values().data().iter().all(|&v| v > 1.0 - 1e-8 && v < 1.0));
}

#[test]
fn mask_matches_composition_oracle() {
    let cfg = SpnConfig::new(2);
    let p = jittered(&cfg, 8);
    let x = randn(&[1, 4, 4, 2], 1.0, &mut rng(9));
    let (m, _) = build_self_latent_mask(&fmap(x.clone()), &p, &SpnState::new(&cfg), None, Mode::Train).unwrap();
    assert!(max_diff(m.values(), &spn_oracle(&x, &p).1) < 1e-10);
}

#[test]
fn invert_is_an_exact_involution() {
    let mut r = rng(10);
    let raw = Tensor::from_fn([2, 3, 3, 4], |_| r.random_range(0.001..0.999));
    let m = SelfLatentMask::new(raw.clone()).unwrap();
    assert_eq!(invert_mask(&invert_mask(&m)).values(), &raw);
    let single = SelfLatentMask::<f64>::new(Tensor::new([1, 1, 1, 1], vec![0.3]).unwrap()).unwrap();
    assert!((invert_mask(&single).values().data()[0] - 0.7).abs() < 1e-15);
    assert!(SelfLatentMask::new(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap()).is_err());
}

#[test]
fn depthwise_matches_nested_loop_oracle() {
    let mut r = rng(11);
    let x = randn(&[1, 5, 5, 2], 1.0, &mut r);
    let k = randn(&[3, 3, 2], 1.0, &mut r);
    assert!(max_diff(&depthwise_conv2d(&x, &k).unwrap(), &dw_oracle(&x, &k)) < 1e-12);
}

#[test]
fn affine_field_matches_depthwise_composition() {
    let cfg = SpnConfig::new(3);
    let p = jittered(&cfg, 12);
    let mut r = rng(13);
    let raw = Tensor::from_fn([2, 4, 4, 3], |_| r.random_range(0.01..0.99));
    let m = SelfLatentMask::new(raw.clone()).unwrap();
    let f = estimate_affine_field(&m, &p, None).unwrap();
    let inv = raw.map(|v| 1.0 - v);
    let g = dw_oracle(&raw, &p.dw_gamma_fg).zip_map(&dw_oracle(&inv, &p.dw_gamma_bg), |a, b| a + b).unwrap();
    let b = dw_oracle(&raw, &p.dw_beta_fg).zip_map(&dw_oracle(&inv, &p.dw_beta_bg), |a, b| a + b).unwrap();
    assert!(max_diff(&f.gamma, &g) < 1e-12);
    assert!(max_diff(&f.beta, &b) < 1e-12);
}

#[test]
fn k1_constant_mask_gives_constant_affine() {
    let cfg = SpnConfig::new(2).with_kernel(1);
    let mut p = SpnParams::<f64>::init(&cfg, &mut rng(14)).unwrap();
    p.dw_gamma_fg = Tensor::new([1, 1, 2], vec![1.5, -0.5]).unwrap();
    p.dw_gamma_bg = Tensor::new([1, 1, 2], vec![0.25, 2.0]).unwrap();
    p.dw_beta_fg = Tensor::zeros([1, 1, 2]);
    p.dw_beta_bg = Tensor::zeros([1, 1, 2]);
    let c = 0.3;
    let m = SelfLatentMask::new(Tensor::full([1, 3, 3, 2], c)).unwrap();
    let f = estimate_affine_field(&m, &p, None).unwrap();
    for (i, &v) in f.gamma.data().iter().enumerate() {
        let (a, b) = if i % 2 == 0 { (1.5, 0.25) } else { (-0.5, 2.0) };
        assert!((v - (c * a + (1.0 - c) * b)).abs() < 1e-12);
    }
    assert!(f.beta.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_init_spn_equals_normalization() {
    let cfg = SpnConfig::new(4);
    let p = SpnParams::<f64>::init(&cfg, &mut rng(15)).unwrap();
    let x = fmap(randn(&[2, 5, 5, 4], 1.5, &mut rng(16)));
    let (y, _) = spn_forward(&x, &p, &SpnState::new(&cfg), Mode::Train).unwrap();
    let (n, _) = channelwise_normalize(&x, &RunningStats::new(4), Mode::Train).unwrap();
    assert!(max_diff(y.tensor(), n.tensor()) < 1e-12);
}

#[test]
fn constant_mask_k1_spn_is_per_channel_affine() {
    let cfg = SpnConfig::new(3).with_kernel(1);
    let mut p = jittered(&cfg, 17);
    p.mask_proj_weight = Tensor::zeros(p.mask_proj_weight.shape().to_vec());
    let x = randn(&[2, 4, 4, 3], 1.0, &mut rng(18));
    let (y, _) = spn_forward(&fmap(x.clone()), &p, &SpnState::new(&cfg), Mode::Train).unwrap();
    let xh = normalize_oracle(&x, cfg.eps);
    let ch = |t: &Tensor<f64>, j: usize| t.data()[j];
    for (i, &v) in y.tensor().data().iter().enumerate() {
        let j = i % 3;
        let cj = sigmoid(ch(&p.mask_norm_shift, j));
        let gamma = cj * ch(&p.dw_gamma_fg, j) + (1.0 - cj) * ch(&p.dw_gamma_bg, j);
        let beta = cj * ch(&p.dw_beta_fg, j) + (1.0 - cj) * ch(&p.dw_beta_bg, j);
        let expect = (xh.data()[i] * ch(&p.affine_scale, j) + ch(&p.affine_shift, j)) * gamma + beta;
        assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
    }
}

#[test]
fn spn_forward_matches_composition_oracle() {
    for (k, mc) in [(3, MaskChannels::PerChannel), (1, MaskChannels::PerChannel), (5, MaskChannels::Single)] {
        let mut cfg = SpnConfig::new(3).with_kernel(k);
        cfg.mask_channels = mc;
        let p = jittered(&cfg, 19 + k as u64);
        let x = randn(&[2, 4, 4, 3], 1.0, &mut rng(20));
        let (y, _) = spn_forward(&fmap(x.clone()), &p, &SpnState::new(&cfg), Mode::Train).unwrap();
        assert!(max_diff(y.tensor(), &spn_oracle(&x, &p).0) < 1e-10, "k={k} {mc:?}");
    }
}

#[test]
fn single_scalar_mask_gives_global_modulation() {
    let mut cfg = SpnConfig::new(3).with_kernel(1);
    cfg.mask_channels = MaskChannels::Single;
    let p = jittered(&cfg, 21);
    let m = SelfLatentMask::new(Tensor::full([1, 2, 2, 1], 0.4)).unwrap();
    let f = estimate_affine_field(&m, &p, None).unwrap();
    for j in 0..3 {
        let g: Vec<f64> = f.gamma.data().iter().skip(j).step_by(3).copied().collect();
        assert!(g.iter().all(|&v| (v - g[0]).abs() < 1e-15));
    }
}

#[test]
fn mask_channel_perturbation_only_moves_that_channel() {
    let cfg = SpnConfig::new(8);
    let p = jittered(&cfg, 22);
    let mut r = rng(23);
    let raw = Tensor::from_fn([1, 5, 5, 8], |_| r.random_range(0.1..0.9));
    let base = estimate_affine_field(&SelfLatentMask::new(raw.clone()).unwrap(), &p, None).unwrap();
    for j in 0..8 {
        let mut bumped = raw.clone();
        for px in 0..25 {
            bumped.data_mut()[px * 8 + j] += 1e-3;
        }
        let f = estimate_affine_field(&SelfLatentMask::new(bumped).unwrap(), &p, None).unwrap();
        let mut own_moved = false;
        for (i, (a, b)) in f.gamma.data().iter().zip(base.gamma.data()).enumerate() {
            if i % 8 == j {
                own_moved |= a != b;
            } else {
                assert_eq!(a, b, "gamma channel {} moved when perturbing {j}", i % 8);
            }
        }
        assert!(own_moved, "gamma channel {j} did not respond");
        for (i, (a, b)) in f.beta.data().iter().zip(base.beta.data()).enumerate() {
            if i % 8 != j {
                assert_eq!(a, b);
            }
        }
    }
}

fn cond(ids: &[usize], k: usize, z: Option<Tensor<f64>>) -> Conditioning<f64> {
    Conditioning::new(ids.iter().map(|&i| ClassCondition::new(i, k).unwrap()).collect(), z)
}

fn cspn_cfg(c: usize, k: usize, latent_bias: bool, mode: KernelMode) -> SpnConfig {
    SpnConfig::new(c).conditional(ConditionalConfig { num_classes: k, embed_dim: 5, latent_dim: 6, latent_bias, kernel_mode: mode })
}

#[test]
fn cspn_distinct_classes_differ() {
    let cfg = cspn_cfg(3, 4, true, KernelMode::Modulated);
    let p = jittered(&cfg, 24);
    let x = fmap(randn(&[2, 4, 4, 3], 1.0, &mut rng(25)));
    let z = randn(&[2, 6], 1.0, &mut rng(26));
    let st = SpnState::new(&cfg);
    let (a, _) = cspn_forward(&x, &cond(&[0, 0], 4, Some(z.clone())), &p, &st, Mode::Train).unwrap();
    let (b, _) = cspn_forward(&x, &cond(&[1, 1], 4, Some(z)), &p, &st, Mode::Train).unwrap();
    assert!(max_diff(a.tensor(), b.tensor()) > 0.0);
}

#[test]
fn cspn_zero_latent_projection_ignores_z() {
    let cfg = cspn_cfg(3, 2, true, KernelMode::Modulated);
    let mut p = jittered(&cfg, 27);
    let lb = p.conditional.as_mut().unwrap().latent_bias_proj.as_mut().unwrap();
    *lb = Tensor::zeros(lb.shape().to_vec());
    let x = fmap(randn(&[2, 3, 3, 3], 1.0, &mut rng(28)));
    let st = SpnState::new(&cfg);
    let (a, _) = cspn_forward(&x, &cond(&[0, 1], 2, Some(randn(&[2, 6], 1.0, &mut rng(29)))), &p, &st, Mode::Train).unwrap();
    let (b, _) = cspn_forward(&x, &cond(&[0, 1], 2, Some(randn(&[2, 6], 5.0, &mut rng(30)))), &p, &st, Mode::Train).unwrap();
    assert_eq!(a.tensor(), b.tensor());
}

#[test]
fn cspn_with_zeroed_projections_reduces_to_spn() {
    for mode in [KernelMode::Modulated, KernelMode::PerClass] {
        let ccfg = cspn_cfg(3, 1, true, mode);
        let cp = SpnParams::<f64>::init(&ccfg, &mut rng(31)).unwrap();
        let ucfg = SpnConfig::new(3);
        let mut up = SpnParams::<f64>::init(&ucfg, &mut rng(31)).unwrap();
        up.mask_proj_weight = cp.mask_proj_weight.clone();
        let x = fmap(randn(&[2, 4, 4, 3], 1.0, &mut rng(32)));
        let z = randn(&[2, 6], 1.0, &mut rng(33));
        let (a, _) = cspn_forward(&x, &cond(&[0, 0], 1, Some(z)), &cp, &SpnState::new(&ccfg), Mode::Train).unwrap();
        let (b, _) = spn_forward(&x, &up, &SpnState::new(&ucfg), Mode::Train).unwrap();
        assert!(max_diff(a.tensor(), b.tensor()) < 1e-12, "{mode:?}");
    }
}

#[test]
fn conditioning_errors() {
    let cfg = cspn_cfg(2, 3, true, KernelMode::Modulated);
    let p = SpnParams::<f64>::init(&cfg, &mut rng(34)).unwrap();
    let x = fmap(randn(&[1, 2, 2, 2], 1.0, &mut rng(35)));
    let st = SpnState::new(&cfg);
    assert!(spn_forward(&x, &p, &st, Mode::Train).is_err());
    assert!(cspn_forward(&x, &cond(&[0], 3, None), &p, &st, Mode::Train).is_err());
    assert!(cspn_forward(&x, &cond(&[0], 4, Some(randn(&[1, 6], 1.0, &mut rng(0)))), &p, &st, Mode::Train).is_err());
    assert!(ClassCondition::new(3, 3).is_err());
    let wrong = fmap(randn(&[1, 2, 2, 3], 1.0, &mut rng(36)));
    assert!(build_self_latent_mask(&wrong, &p, &st, Some(&cond(&[0], 3, None)), Mode::Train).is_err());
}

#[test]
fn zero_upstream_gradient_gives_zero_gradients() {
    let cfg = SpnConfig::new(2);
    let p = jittered(&cfg, 37);
    let x = fmap(randn(&[2, 3, 3, 2], 1.0, &mut rng(38)));
    let g = layer_backward(&x, &p, &SpnState::new(&cfg), None, Mode::Train, &Tensor::zeros([2, 3, 3, 2])).unwrap();
    assert!(g.dx.data().iter().all(|&v| v == 0.0));
    for (_, t) in g.params.named() {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
    assert!(layer_backward(&x, &p, &SpnState::new(&cfg), None, Mode::Train, &Tensor::zeros([1, 3, 3, 2])).is_err());
}

#[test]
fn beta_bank_gradient_on_sum_loss_is_mask_sum() {
    let cfg = SpnConfig::new(2).with_kernel(1);
    let p = SpnParams::<f64>::init(&cfg, &mut rng(39)).unwrap();
    let x = fmap(randn(&[2, 3, 3, 2], 1.0, &mut rng(40)));
    let st = SpnState::new(&cfg);
    let (m, _) = build_self_latent_mask(&x, &p, &st, None, Mode::Train).unwrap();
    let g = layer_backward(&x, &p, &st, None, Mode::Train, &Tensor::ones([2, 3, 3, 2])).unwrap();
    for j in 0..2 {
        let fg: f64 = m.values().data().iter().skip(j).step_by(2).sum();
        let bg: f64 = m.inverse_values().data().iter().skip(j).step_by(2).sum();
        assert!((g.params.dw_beta_fg.data()[j] - fg).abs() < 1e-12);
        assert!((g.params.dw_beta_bg.data()[j] - bg).abs() < 1e-12);
    }
}

#[test]
fn output_shape_is_preserved() {
    for (b, h, w) in [(1, 1, 1), (3, 2, 5), (2, 7, 3)] {
        let cfg = SpnConfig::new(3);
        let p = jittered(&cfg, 41);
        let x = fmap(randn(&[b, h, w, 3], 1.0, &mut rng(42)));
        let (y, _) = spn_forward(&x, &p, &SpnState::new(&cfg), Mode::Train).unwrap();
        assert_eq!(y.tensor().shape(), &[b, h, w, 3]);
    }
}

#[test]
fn default_gradcheck_suite_passes() {
    let report = gradcheck::run_suite(&gradcheck::GradcheckOptions::default()).unwrap();
    let failed: Vec<_> = report.iter().filter(|c| !c.passed).collect();
    assert!(failed.is_empty(), "{failed:?}");
    let cases: std::collections::BTreeSet<_> = report.iter().map(|c| c.case.clone()).collect();
    assert_eq!(cases.len(), gradcheck::case_names().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mask_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.1f64..20.0, b in 1usize..3, hw in 1usize..5) {
        let cfg = SpnConfig::new(3);
        let p = jittered(&cfg, seed);
        let x = fmap(randn(&[b, hw, hw, 3], scale, &mut rng(seed ^ 1)));
        let (m, _) = build_self_latent_mask(&x, &p, &SpnState::new(&cfg), None, Mode::Train).unwrap();
        for (&a, &c) in m.values().data().iter().zip(m.inverse_values().data()) {
            prop_assert!(a > 0.0 && a < 1.0);
            prop_assert_eq!(a + c, 1.0);
        }
    }

    #[test]
    fn invert_twice_is_identity(vals in proptest::collection::vec(0.0001f64..0.9999, 1..64)) {
        let n = vals.len();
        let m = SelfLatentMask::new(Tensor::new([1, 1, n, 1], vals).unwrap()).unwrap();
        prop_assert_eq!(invert_mask(&invert_mask(&m)), m.clone());
        let inv = invert_mask(&m);
        for (&a, &b) in m.values().data().iter().zip(inv.values().data()) {
            prop_assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn train_normalization_standardizes(seed in any::<u64>(), shift in -50.0f64..50.0, scale in 0.5f64..20.0) {
        let x = randn(&[2, 3, 3, 2], scale, &mut rng(seed)).map(|v| v + shift);
        let (y, _) = channelwise_normalize(&fmap(x), &RunningStats::new(2), Mode::Train).unwrap();
        let (m, v) = two_pass_stats(y.tensor());
        for j in 0..2 {
            prop_assert!(m[j].abs() < 1e-5);
            prop_assert!((v[j] - 1.0).abs() < 1e-4);
        }
    }
}
