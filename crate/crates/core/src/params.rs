//! Named parameter and buffer storage shared by every network.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Learnable parameters are updated by the optimizer; buffers (running
    /// statistics, power-iteration vectors) are not.
    pub trainable: bool,
}

/// Ordered map of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].tensor = tensor;
                self.entries[i].trainable = trainable;
            }
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push(Entry { name: name.to_string(), tensor, trainable });
            }
        }
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor<T>) {
        self.insert(name, tensor, true);
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) {
        self.insert(name, tensor, false);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    /// Replaces the value of an existing entry, checking the shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|&i| self.entries[i].trainable)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Entry<T>> {
        self.entries.iter().filter(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of learnable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|e| e.tensor.len()).sum()
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.trainable().filter(|e| e.name.starts_with(prefix)).map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), tensor: e.tensor.cast(), trainable: e.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Copies every entry present in both stores with matching shape from `other`.
    /// Returns the number of entries copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(src) = other.index.get(&e.name).map(|&i| &other.entries[i].tensor) {
                if src.shape() == e.tensor.shape() {
                    e.tensor = src.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

pub fn normal_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(v * std)
    })
}

/// Orthogonal initialization of a weight whose trailing axis is the output
/// dimension; the tensor is viewed as `(fan_in, fan_out)`.
pub fn orthogonal_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    let (big, small) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(big, small, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Sign correction makes the draw uniform over the orthogonal group.
    for j in 0..small {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Tensor::from_fn(shape.to_vec(), |i| {
        let (r_, c_) = (i / cols, i % cols);
        let v = if rows >= cols { q[(r_, c_)] } else { q[(c_, r_)] };
        T::from_f64_lossy(v * gain)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = orthogonal_tensor(&[3, 3, 4, 5], 1.0, &mut rng);
        let (rows, cols) = (36, 5);
        for a in 0..cols {
            for b in 0..cols {
                let d: f64 = (0..rows).map(|r| w.data()[r * cols + a] * w.data()[r * cols + b]).sum();
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((d - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_only_trainable() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a.w", Tensor::zeros([3, 4]));
        s.add_buffer("a.stats", Tensor::zeros([4]));
        s.add_param("b.w", Tensor::zeros([2]));
        assert_eq!(s.count_trainable(), 14);
        assert_eq!(s.count_with_prefix("a."), 12);
        assert!(s.set("b.w", Tensor::zeros([3])).is_err());
    }
}
