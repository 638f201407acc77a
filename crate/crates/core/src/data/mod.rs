//! Datasets, loaders and batching.

pub mod batches;
pub mod cifar;
pub mod folder;
pub mod shapes;

pub use batches::{epoch_permutation, Batch, BatchIterator, IteratorState};
pub use cifar::{load_cifar, CifarVariant};
pub use folder::{load_image_folder, resize_bilinear};
pub use shapes::{shapes_dataset, ShapesConfig};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `N × H × W × 3` u8 images with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    len: usize,
    height: usize,
    width: usize,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, height: usize, width: usize, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let per = height * width * 3;
        if per == 0 || pixels.is_empty() || pixels.len() % per != 0 {
            return Err(Error::Dataset(format!(
                "{} bytes do not form whole {height}x{width}x3 images",
                pixels.len()
            )));
        }
        let len = pixels.len() / per;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Dataset(format!("{} labels for {len} images", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= num_classes) {
                return Err(Error::ClassOutOfRange { class: bad, num_classes });
            }
        }
        Ok(Self { pixels, len, height, width, labels, num_classes: num_classes.max(1) })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.height * self.width * 3;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Images at `indices` mapped to `[-1, 1]`, shape `(n, H, W, 3)`.
    pub fn gather<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let mut bytes = Vec::with_capacity(indices.len() * self.height * self.width * 3);
        for &i in indices {
            bytes.extend_from_slice(self.image(i));
        }
        to_model_range(&bytes, [indices.len(), self.height, self.width, 3]).expect("whole images")
    }
}

/// `x / 127.5 − 1`.
pub fn to_model_range<T: Real>(pixels: &[u8], shape: [usize; 4]) -> Result<Tensor<T>> {
    let scale = T::from_f64_lossy(1.0 / 127.5);
    Tensor::new(shape, pixels.iter().map(|&p| T::from_f64_lossy(f64::from(p)) * scale - T::one()).collect())
}

/// Inverse of [`to_model_range`], rounding to the nearest level and clamping.
pub fn from_model_range<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    t.data().iter().map(|&v| ((v.as_f64() + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
}
