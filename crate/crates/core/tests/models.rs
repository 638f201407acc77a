use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spn::autograd::Graph;
use spn::models::{
    build_discriminator, build_generator, count_flops, count_parameters, DiscriminatorSpec, FlopConvention,
    GeneratorSpec, NormChoice,
};
use spn::nn::{Ctx, Mode};
use spn::params::ParamStore;
use spn::tensor::Tensor;

#[test]
fn gen32_parameter_counts() {
    let bn = build_generator(&GeneratorSpec::gen32(NormChoice::Bn)).unwrap();
    let spn = build_generator(&GeneratorSpec::gen32(NormChoice::Spn)).unwrap();
    let (a, b) = (count_parameters(&bn), count_parameters(&spn));
    assert_eq!(a, 4_079_363);
    assert_eq!(b - a, 453_120);
    assert_eq!(b - a, 6 * 75_520);
}

#[test]
fn analytic_count_matches_store() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for norm in [NormChoice::Bn, NormChoice::Spn, NormChoice::Cbn, NormChoice::Ccbn, NormChoice::Cspn] {
        let mut spec = GeneratorSpec::gen32(norm).scaled(16);
        if norm.is_conditional() {
            spec = spec.with_classes(5);
        }
        let g = build_generator(&spec).unwrap();
        let store: ParamStore<f32> = g.new_store(&mut rng).unwrap();
        assert_eq!(store.count_trainable(), count_parameters(&g), "{norm:?}");
    }
    let d = build_discriminator(&DiscriminatorSpec::disc32().scaled(16).with_projection(5)).unwrap();
    let store: ParamStore<f32> = d.new_store(&mut rng);
    assert_eq!(store.count_trainable(), count_parameters(&d));
}

#[test]
fn gen32_flop_delta_brackets() {
    let bn = build_generator(&GeneratorSpec::gen32(NormChoice::Bn)).unwrap();
    let spn = build_generator(&GeneratorSpec::gen32(NormChoice::Spn)).unwrap();
    for c in [FlopConvention::Mac2, FlopConvention::Mac1] {
        let d = count_flops(&spn, 1, c) - count_flops(&bn, 1, c);
        println!("{c:?}: base {} delta {}", count_flops(&bn, 1, c), d);
        assert!((100_000_000..=260_000_000).contains(&d), "{c:?} {d}");
    }
}

#[test]
fn small_generator_forward_shape_and_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = build_generator(&GeneratorSpec::gen32(NormChoice::Spn).scaled(8)).unwrap();
    let mut store: ParamStore<f32> = g.new_store(&mut rng).unwrap();
    let mut graph = Graph::new();
    let z = graph.constant(Tensor::from_fn(vec![2, 128], |i| ((i * 37 % 11) as f32 - 5.0) / 3.0));
    let mut ctx = Ctx::new(&mut store, Mode::Train);
    let out = g.forward(&mut graph, &mut ctx, z, None).unwrap();
    assert_eq!(graph.shape(out.image), &[2, 32, 32, 3]);
    assert!(graph.value(out.image).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(out.traces.len(), 6);
}

#[test]
fn spectral_estimate_converges_to_svd_top_singular_value() {
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use spn::nn::spectral::{spectral_normalize, SpectralState};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let (m, n) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let w: Vec<f64> = (0..m * n).map(|_| rng.sample(StandardNormal)).collect();
        let st = SpectralState::random(&[m, n], &mut rng);
        let (wn, _) = spectral_normalize(&Tensor::new([m, n], w).unwrap(), &st, 1000).unwrap();
        let top = DMatrix::from_row_slice(m, n, wn.data()).singular_values()[0];
        assert!((top - 1.0).abs() <= 1e-3, "{m}x{n}: {top}");
    }
}

#[test]
fn spectral_state_tracks_weight_view_of_conv_kernels() {
    use nalgebra::DMatrix;
    use spn::nn::spectral::{matrix_view, spectral_normalize, SpectralState};
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [3, 3, 8, 16];
    assert_eq!(matrix_view(&shape), (72, 16));
    let w: Tensor<f64> = spn::params::normal_tensor(&shape, 1.0, &mut rng);
    let st = SpectralState::random(&shape, &mut rng);
    let (wn, _) = spectral_normalize(&w, &st, 2000).unwrap();
    let top = DMatrix::from_row_slice(72, 16, wn.data()).singular_values()[0];
    assert!((top - 1.0).abs() < 1e-6);
    let bad = SpectralState { u: vec![1.0; 3], v: vec![1.0; 16] };
    assert!(spectral_normalize(&w, &bad, 1).is_err());
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    use spn::data::{shapes_dataset, BatchIterator, ShapesConfig};
    use spn::training::{Trainer, TrainConfig};
    use std::sync::Arc;

    let mut gs = GeneratorSpec::gen32(NormChoice::Cspn).scaled(8).with_classes(3);
    gs.spatial_attention = true;
    gs.spn.embed_dim = 8;
    let ds = DiscriminatorSpec::disc32().scaled(8).with_projection(3);
    let cfg = TrainConfig { n_dis: 1, batch_d: 6, batch_g: 6, total_iters: 10, decay_last_iters: 0, ..TrainConfig::cifar() };
    let mut t = Trainer::new(cfg, build_generator(&gs).unwrap(), build_discriminator(&ds).unwrap()).unwrap();
    let data = Arc::new(shapes_dataset(&ShapesConfig::new(24, 32, 1)).unwrap());
    let mut it = BatchIterator::new(data, 6, 0, true).unwrap();
    // Zero-initialised projections block some paths until the first update.
    for _ in 0..2 {
        t.step(&mut it).unwrap();
    }

    let classes = [0, 1, 2, 0, 1, 2];
    let mut g = Graph::new();
    let z = g.input(Tensor::from_fn([6, gs.z_dim], |i| ((i * 7919 % 113) as f32 / 56.0) - 1.0));
    let fake = {
        let mut ctx = Ctx::new(&mut t.state.g_params, Mode::Train);
        t.gen.forward(&mut g, &mut ctx, z, Some(&classes)).unwrap().image
    };
    let logits = {
        let mut ctx = Ctx::new(&mut t.state.d_params, Mode::Train);
        t.disc.forward(&mut g, &mut ctx, fake, Some(&classes)).unwrap()
    };
    let loss = g.sum(logits);
    let grads = g.backward(loss).unwrap();
    let mut dead = Vec::new();
    for store in [&t.state.g_params, &t.state.d_params] {
        for e in store.trainable() {
            match grads.param(&e.name) {
                Some(gr) if gr.data().iter().any(|&v| v != 0.0) => {}
                _ => dead.push(e.name.clone()),
            }
        }
    }
    assert!(dead.is_empty(), "no gradient reaches {dead:?}");
}
