//! Spectral normalization by power iteration.
//!
//! A weight tensor is viewed as the row-major matrix `(numel / out, out)`,
//! i.e. the trailing axis indexes columns. The largest singular value is the
//! same for this view and its transpose.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::normal_tensor;
use crate::tensor::{Real, Tensor};

const SN_EPS: f64 = 1e-12;

/// Power-iteration state of one weight: left (`u`) and right (`v`) singular
/// vector estimates, both unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

pub fn matrix_view(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

fn normalize<T: Real>(x: &mut [T]) {
    let n = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let d = n.max(T::from_f64_lossy(SN_EPS));
    for v in x {
        *v = *v / d;
    }
}

impl<T: Real> SpectralState<T> {
    pub fn random<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let (rows, cols) = matrix_view(shape);
        let mut u = normal_tensor::<T, _>(&[rows], 1.0, rng).into_data();
        normalize(&mut u);
        let mut v = normal_tensor::<T, _>(&[cols], 1.0, rng).into_data();
        normalize(&mut v);
        Self { u, v }
    }

    /// One power-iteration step on `w` (row-major `(rows, cols)`).
    pub fn step(&mut self, w: &[T]) {
        let (rows, cols) = (self.u.len(), self.v.len());
        let mut v = vec![T::zero(); cols];
        for r in 0..rows {
            let ur = self.u[r];
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc = *vc + wv * ur;
            }
        }
        normalize(&mut v);
        let mut u: Vec<T> =
            (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum()).collect();
        normalize(&mut u);
        self.u = u;
        self.v = v;
    }

    /// `σ̂ = uᵀ W v`, floored at a tiny epsilon.
    pub fn sigma(&self, w: &[T]) -> T {
        crate::autograd::spectral_sigma(w, &self.u, &self.v).max(T::from_f64_lossy(SN_EPS))
    }
}

/// Runs `iters` power iterations and returns `W / σ̂` with the updated state.
pub fn spectral_normalize<T: Real>(
    weight: &Tensor<T>,
    state: &SpectralState<T>,
    iters: usize,
) -> Result<(Tensor<T>, SpectralState<T>)> {
    let (rows, cols) = matrix_view(weight.shape());
    if state.u.len() != rows || state.v.len() != cols {
        return Err(Error::Shape(format!(
            "spectral state ({}, {}) does not match weight view ({rows}, {cols})",
            state.u.len(),
            state.v.len()
        )));
    }
    let mut st = state.clone();
    for _ in 0..iters {
        st.step(weight.data());
    }
    let sigma = st.sigma(weight.data());
    Ok((weight.map(|x| x / sigma), st))
}
