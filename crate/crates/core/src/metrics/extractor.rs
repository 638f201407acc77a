use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::Checkpoint;
use crate::data::{from_model_range, resize_bilinear, to_model_range};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Image → (features, class probabilities) evaluator.
pub trait FeatureExtractor {
    /// Square input side; images are resized to it.
    fn input_size(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `images`: `(N, S, S, 3)` in `[−1, 1]`. Returns `N × F` features and
    /// `N × K` probabilities.
    fn extract(&self, images: &Tensor<f32>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;

    /// Resizes model-range images of any square size, then extracts.
    fn extract_resized(&self, images: &Tensor<f32>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (n, h, w, _) = images.dims4()?;
        let s = self.input_size();
        if h == s && w == s {
            return self.extract(images);
        }
        let bytes = from_model_range(images);
        let per = h * w * 3;
        let mut out = Vec::with_capacity(n * s * s * 3);
        for i in 0..n {
            out.extend(resize_bilinear(&bytes[i * per..(i + 1) * per], h, w, s, s));
        }
        self.extract(&to_model_range(&out, [n, s, s, 3])?)
    }
}

/// Fixed random projection with a `tanh` feature layer and a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExtractor {
    pub size: usize,
    /// `F × (S·S·3)`.
    pub proj: DMatrix<f64>,
    /// `K × F`.
    pub head: DMatrix<f64>,
}

const KIND: &str = "toy-extractor";

impl ToyExtractor {
    pub fn new(size: usize, features: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = size * size * 3;
        let ps = 1.0 / (d as f64).sqrt();
        let proj = DMatrix::from_fn(features, d, |_, _| ps * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let hs = 2.0 / (features as f64).sqrt();
        let head = DMatrix::from_fn(classes, features, |_, _| hs * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        Self { size, proj, head }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", KIND);
        ckpt.set_meta("size", self.size);
        let t = |m: &DMatrix<f64>| Tensor::new([m.nrows(), m.ncols()], m.transpose().as_slice().to_vec()).unwrap();
        ckpt.insert("proj", false, t(&self.proj));
        ckpt.insert("head", false, t(&self.head));
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.meta("kind")? != KIND {
            return Err(Error::Checkpoint(format!("{} is not a toy extractor", path.display())));
        }
        let size: usize = ckpt.meta_parse("size")?;
        let m = |name: &str| -> Result<DMatrix<f64>> {
            let t = ckpt.tensor(name)?;
            let (r, c) = t.dims2()?;
            Ok(DMatrix::from_row_slice(r, c, t.data()))
        };
        let (proj, head) = (m("proj")?, m("head")?);
        if proj.ncols() != size * size * 3 || head.ncols() != proj.nrows() {
            return Err(Error::Checkpoint(format!("{}: inconsistent extractor shapes", path.display())));
        }
        Ok(Self { size, proj, head })
    }
}

impl FeatureExtractor for ToyExtractor {
    fn input_size(&self) -> usize {
        self.size
    }

    fn feature_dim(&self) -> usize {
        self.proj.nrows()
    }

    fn num_classes(&self) -> usize {
        self.head.nrows()
    }

    fn extract(&self, images: &Tensor<f32>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (n, h, w, c) = images.dims4()?;
        if h != self.size || w != self.size || c != 3 {
            return Err(Error::Shape(format!("extractor expects ({s}, {s}, 3), got ({h}, {w}, {c})", s = self.size)));
        }
        let x = DMatrix::from_row_iterator(n, h * w * c, images.data().iter().map(|&v| f64::from(v)));
        let feats = (x * self.proj.transpose()).map(f64::tanh);
        let mut probs = &feats * self.head.transpose();
        for mut row in probs.row_iter_mut() {
            let mx = row.max();
            row.apply(|v| *v = (*v - mx).exp());
            let s = row.sum();
            row /= s;
        }
        Ok((feats, probs))
    }
}

/// Loads an extractor model file.
pub fn load_extractor(path: &Path) -> Result<Box<dyn FeatureExtractor>> {
    Ok(Box::new(ToyExtractor::load(path)?))
}
