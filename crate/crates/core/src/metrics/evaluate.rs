use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::extractor::FeatureExtractor;
use super::fid::{frechet_distance, summarize_features};
use super::inception::inception_score;
use crate::autograd::Graph;
use crate::data::batches::epoch_permutation;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Generator;
use crate::nn::{Ctx, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fid: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub n_samples: usize,
    pub n_real: usize,
}

impl EvalReport {
    pub fn render_kv(&self) -> String {
        format!(
            "fid = {}\nis_mean = {}\nis_std = {}\nn_samples = {}\nn_real = {}\n",
            self.fid, self.is_mean, self.is_std, self.n_samples, self.n_real
        )
    }
}

fn stack(parts: Vec<DMatrix<f64>>) -> DMatrix<f64> {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for p in parts {
        out.rows_mut(r, p.nrows()).copy_from(&p);
        r += p.nrows();
    }
    out
}

/// FID against up to `n_samples` real images and IS of `n_samples`
/// generated ones, in eval mode. Deterministic in `seed`.
pub fn evaluate_model(
    gen: &Generator,
    params: &mut ParamStore<f32>,
    extractor: &dyn FeatureExtractor,
    real: &Dataset,
    n_samples: usize,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    if n_samples < 2 || batch == 0 {
        return Err(Error::Invalid(format!("need ≥ 2 samples and a positive batch, got {n_samples} / {batch}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let k = gen.spec.num_classes.filter(|_| gen.is_conditional());
    let (mut feats, mut probs) = (Vec::new(), Vec::new());
    let mut done = 0;
    while done < n_samples {
        let b = batch.min(n_samples - done);
        let z = Tensor::from_fn([b, gen.spec.z_dim], |_| rng.sample::<f32, _>(StandardNormal));
        let classes: Option<Vec<usize>> = k.map(|k| (0..b).map(|_| rng.random_range(0..k)).collect());
        let mut g = Graph::new();
        let zv = g.input(z);
        let mut ctx = Ctx::frozen(params, Mode::Eval);
        let out = gen.forward(&mut g, &mut ctx, zv, classes.as_deref())?;
        let (f, p) = extractor.extract_resized(g.value(out.image))?;
        feats.push(f);
        probs.push(p);
        done += b;
    }
    let n_real = n_samples.min(real.len());
    let order = epoch_permutation(real.len(), seed, 0);
    let mut real_feats = Vec::new();
    for chunk in order[..n_real].chunks(batch) {
        real_feats.push(extractor.extract_resized(&real.gather::<f32>(chunk))?.0);
    }
    let fake = summarize_features(&stack(feats))?;
    let real_s = summarize_features(&stack(real_feats))?;
    let (is_mean, is_std) = inception_score(&stack(probs), 10.min(n_samples))?;
    Ok(EvalReport { fid: frechet_distance(&real_s, &fake)?, is_mean, is_std, n_samples, n_real })
}
