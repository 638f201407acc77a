use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spn::data::{shapes_dataset, ShapesConfig};
use spn::metrics::*;
use spn::models::{build_generator, GeneratorSpec, NormChoice};
use spn::autograd::Graph;
use spn::nn::{Ctx, Mode};
use spn::params::ParamStore;
use spn::{Error, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

fn gaussian(mean: Vec<f64>, cov: DMatrix<f64>) -> GaussianSummary {
    GaussianSummary { mean: DVector::from_vec(mean), cov, count: 100 }
}

fn random_spd(r: &mut ChaCha8Rng, f: usize) -> DMatrix<f64> {
    let a = randn(r, f, f);
    &a * a.transpose() / f as f64 + DMatrix::identity(f, f) * 0.1
}

#[test]
fn summary_of_two_points() {
    let s = summarize_features(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 5.0])).unwrap();
    assert_eq!(s.mean.as_slice(), &[1.0, 3.0]);
    assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 8.0]));
    assert!(summarize_features(&DMatrix::zeros(1, 3)).is_err());
}

#[test]
fn summary_matches_two_pass_oracle() {
    let x = randn(&mut rng(1), 100, 4);
    let s = summarize_features(&x).unwrap();
    for j in 0..4 {
        let mj = (0..100).map(|i| x[(i, j)]).sum::<f64>() / 100.0;
        assert!((s.mean[j] - mj).abs() < 1e-12);
        for k in 0..4 {
            let mk = (0..100).map(|i| x[(i, k)]).sum::<f64>() / 100.0;
            let c = (0..100).map(|i| (x[(i, j)] - mj) * (x[(i, k)] - mk)).sum::<f64>() / 99.0;
            assert!((s.cov[(j, k)] - c).abs() < 1e-12);
        }
    }
}

#[test]
fn univariate_frechet_distance() {
    let a = gaussian(vec![0.0], DMatrix::from_element(1, 1, 1.0));
    let b = gaussian(vec![1.0], DMatrix::from_element(1, 1, 4.0));
    assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn diagonal_frechet_distance() {
    let mut r = rng(2);
    let f = 6;
    let (ma, mb): (Vec<f64>, Vec<f64>) = (0..f).map(|_| (r.random::<f64>(), r.random::<f64>())).unzip();
    let (va, vb): (Vec<f64>, Vec<f64>) = (0..f).map(|_| (r.random_range(0.1..3.0), r.random_range(0.1..3.0))).unzip();
    let oracle: f64 = (0..f).map(|i| (ma[i] - mb[i]).powi(2) + (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum();
    let a = gaussian(ma, DMatrix::from_diagonal(&DVector::from_vec(va)));
    let b = gaussian(mb, DMatrix::from_diagonal(&DVector::from_vec(vb)));
    assert!((frechet_distance(&a, &b).unwrap() - oracle).abs() < 1e-10);
}

/// Trace of the root via a Cholesky factor: `Tr sqrt(Lᵀ B L)` with `A = L Lᵀ`.
fn cholesky_oracle(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
    let l = a.cov.clone().cholesky().unwrap().l();
    let m = l.transpose() * &b.cov * &l;
    let root: f64 = m.symmetric_eigenvalues().iter().map(|v| v.max(0.0).sqrt()).sum();
    (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * root
}

#[test]
fn full_covariance_matches_cholesky_oracle() {
    let mut r = rng(3);
    for f in [2, 5, 16] {
        let a = gaussian((0..f).map(|_| r.random()).collect(), random_spd(&mut r, f));
        let b = gaussian((0..f).map(|_| r.random()).collect(), random_spd(&mut r, f));
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - cholesky_oracle(&a, &b)).abs() < 1e-8 * (1.0 + d), "f = {f}");
        assert!((d - frechet_distance(&b, &a).unwrap()).abs() < 1e-8 * (1.0 + d));
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }
}

#[test]
fn identical_features_give_zero() {
    let x = randn(&mut rng(4), 50, 8);
    let s = summarize_features(&x).unwrap();
    assert!(frechet_distance(&s, &s).unwrap().abs() < 1e-9);
}

#[test]
fn indefinite_covariance_is_rejected() {
    let a = gaussian(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]));
    let b = gaussian(vec![0.0, 0.0], DMatrix::identity(2, 2));
    assert!(matches!(frechet_distance(&a, &b), Err(Error::NotPsd { .. })));
    let tiny = gaussian(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]));
    assert!(frechet_distance(&tiny, &b).is_ok());
}

#[test]
fn inception_score_extremes() {
    let uniform = DMatrix::from_element(20, 5, 0.2);
    let (m, s) = inception_score(&uniform, 4).unwrap();
    assert!((m - 1.0).abs() < 1e-12 && s.abs() < 1e-12);
    let onehot = DMatrix::<f64>::identity(10, 10);
    let (m, _) = inception_score(&onehot, 1).unwrap();
    assert!((m - 10.0).abs() < 1e-10);
}

fn random_probs(r: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    let mut p = DMatrix::from_fn(n, k, |_, _| r.random::<f64>().powi(3));
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

#[test]
fn inception_score_matches_double_loop() {
    let mut r = rng(5);
    let (n, k, splits) = (103, 7, 5);
    let p = random_probs(&mut r, n, k);
    let mut scores = Vec::new();
    for s in 0..splits {
        let (lo, hi) = (s * n / splits, (s + 1) * n / splits);
        let mut marg = vec![0.0; k];
        for i in lo..hi {
            for j in 0..k {
                marg[j] += p[(i, j)] / (hi - lo) as f64;
            }
        }
        let mut kl = 0.0;
        for i in lo..hi {
            for j in 0..k {
                kl += p[(i, j)] * (p[(i, j)] / marg[j]).ln();
            }
        }
        scores.push((kl / (hi - lo) as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let std = (scores.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / splits as f64).sqrt();
    let (m, s) = inception_score(&p, splits).unwrap();
    assert!((m - mean).abs() < 1e-12 && (s - std).abs() < 1e-12);
}

#[test]
fn inception_score_rejects_bad_input() {
    let p = DMatrix::from_element(4, 2, 0.4);
    assert!(inception_score(&p, 2).is_err());
    assert!(inception_score(&DMatrix::from_element(4, 2, 0.5), 5).is_err());
    assert!(inception_score(&DMatrix::from_element(4, 2, 0.5), 0).is_err());
}

proptest! {
    #[test]
    fn inception_score_is_bounded(seed in any::<u64>(), n in 2usize..60, k in 1usize..12) {
        let p = random_probs(&mut rng(seed), n, k);
        let (m, _) = inception_score(&p, 1).unwrap();
        prop_assert!(m >= 1.0 - 1e-12 && m <= k as f64 + 1e-9);
    }

    #[test]
    fn frechet_distance_is_non_negative(seed in any::<u64>(), f in 1usize..8) {
        let mut r = rng(seed);
        let a = gaussian((0..f).map(|_| r.random()).collect(), random_spd(&mut r, f));
        let b = gaussian((0..f).map(|_| r.random()).collect(), random_spd(&mut r, f));
        prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
    }
}

#[test]
fn toy_extractor_save_load_and_resize() {
    let ex = ToyExtractor::new(8, 16, 5, 9);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ex.ckpt");
    ex.save(&p).unwrap();
    assert_eq!(ToyExtractor::load(&p).unwrap(), ex);
    let boxed = load_extractor(&p).unwrap();
    assert_eq!((boxed.input_size(), boxed.feature_dim(), boxed.num_classes()), (8, 16, 5));
    let imgs = Tensor::from_fn([3, 32, 32, 3], |i| ((i % 97) as f32 / 48.0) - 1.0);
    let (f, probs) = boxed.extract_resized(&imgs).unwrap();
    assert_eq!(f.shape(), (3, 16));
    for row in probs.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    assert!(boxed.extract(&imgs).is_err());
}

fn tiny_generator() -> (spn::models::Generator, ParamStore<f32>) {
    let gen = build_generator(&GeneratorSpec::gen32(NormChoice::Spn).scaled(8)).unwrap();
    let store = gen.new_store(&mut rng(0)).unwrap();
    (gen, store)
}

fn warm_up(gen: &spn::models::Generator, store: &mut ParamStore<f32>) {
    let mut g = Graph::new();
    let z = g.input(Tensor::from_fn([8, gen.spec.z_dim], |i| (i as f32 * 0.91).sin()));
    let mut ctx = Ctx::new(store, Mode::Train);
    gen.forward(&mut g, &mut ctx, z, None).unwrap();
}

#[test]
fn evaluation_is_deterministic_in_seed() {
    let (gen, mut store) = tiny_generator();
    let ex = ToyExtractor::new(16, 8, 4, 1);
    let real = shapes_dataset(&ShapesConfig::new(30, 32, 2)).unwrap();
    assert!(matches!(evaluate_model(&gen, &mut store, &ex, &real, 24, 5, 8), Err(Error::UninitializedStats)));
    warm_up(&gen, &mut store);
    let a = evaluate_model(&gen, &mut store, &ex, &real, 24, 5, 8).unwrap();
    let b = evaluate_model(&gen, &mut store, &ex, &real, 24, 5, 8).unwrap();
    let rebatched = evaluate_model(&gen, &mut store, &ex, &real, 24, 5, 10).unwrap();
    assert!((a.fid - rebatched.fid).abs() < 1e-9 && (a.is_mean - rebatched.is_mean).abs() < 1e-9);
    let c = evaluate_model(&gen, &mut store, &ex, &real, 24, 6, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.fid, c.fid);
    assert_eq!((a.n_samples, a.n_real), (24, 24));
    assert!(a.fid >= 0.0 && a.is_mean >= 1.0);
    assert!(a.render_kv().contains("fid = "));
}

#[test]
fn zero_projection_masks_are_half_and_complementary() {
    let (gen, mut store) = tiny_generator();
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).filter(|n| n.ends_with(".mask.weight")).collect();
    assert!(!names.is_empty());
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(shape)).unwrap();
    }
    let z = Tensor::from_fn([2, gen.spec.z_dim], |i| (i as f32 * 0.7).cos());
    for layer in 0..gen.spn_sites().len() {
        let grid = visualize_masks(&gen, &mut store, &z, None, Some(layer), &[0, 1], Mode::Train).unwrap();
        assert!(grid.mask.iter().all(|&m| (m - 0.5).abs() < 1e-6), "site {}", grid.site);
    }
}

#[test]
fn mask_grid_png_has_two_rows_per_sample() {
    let (gen, mut store) = tiny_generator();
    let z = Tensor::from_fn([3, gen.spec.z_dim], |i| (i as f32 * 0.3).sin());
    let grid = visualize_masks(&gen, &mut store, &z, None, None, &[0, 2, 5], Mode::Train).unwrap();
    assert_eq!(grid.site, *gen.spn_sites().last().unwrap());
    for (m, mi) in grid.mask.iter().zip(&grid.mask_inv) {
        assert!((m + mi - 1.0).abs() < 1e-6);
        assert!(*m > 0.0 && *m < 1.0);
    }
    let tiles = grid.tiles();
    assert_eq!(tiles.len(), 2 * grid.mask.len());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    grid.save(&p).unwrap();
    let img = image::open(&p).unwrap().to_luma8();
    let (h, w) = (grid.height as u32, grid.width as u32);
    assert_eq!(img.width(), 3 * (w + 1) - 1);
    assert_eq!(img.height(), 6 * (h + 1) - 1);
    let m0 = grid.mask[0];
    assert!((f64::from(img.get_pixel(0, 0)[0]) - m0 * 255.0).abs() <= 0.5 + 1e-9);
    assert!((f64::from(img.get_pixel(0, h + 1)[0]) - (1.0 - m0) * 255.0).abs() <= 0.5 + 1e-9);
    assert!(visualize_masks(&gen, &mut store, &z, None, Some(99), &[], Mode::Train).is_err());
    assert!(visualize_masks(&gen, &mut store, &z, None, None, &[10_000], Mode::Train).is_err());
}

#[test]
fn spatial_variance_of_known_maps() {
    let flat = Tensor::full([2, 4, 4, 3], 0.3f32);
    assert_eq!(mask_spatial_variance(&flat).unwrap(), 0.0);
    let half = Tensor::from_fn([1, 2, 2, 1], |i| if i < 2 { 0.0f32 } else { 1.0 });
    assert!((mask_spatial_variance(&half).unwrap() - 0.25).abs() < 1e-12);
}
