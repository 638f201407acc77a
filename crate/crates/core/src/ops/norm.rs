//! Channel-wise statistics and normalization kernels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel mean and biased variance over every leading axis.
pub fn channel_moments<T: Real>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let c = *x.shape().last().ok_or_else(|| Error::Shape("scalar has no channels".into()))?;
    let n = x.len() / c;
    if n == 0 {
        return Err(Error::Shape("empty tensor".into()));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m = *m + v;
        }
    }
    for m in &mut mean {
        *m = *m * inv_n;
    }
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] = var[j] + d * d;
        }
    }
    for v in &mut var {
        *v = *v * inv_n;
    }
    Ok((mean, var))
}

/// `(x - mean) * inv_std` per channel.
pub fn normalize_with<T: Real>(x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Tensor<T> {
    let c = mean.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for j in 0..c {
            row[j] = (row[j] - mean[j]) * inv_std[j];
        }
    }
    out
}

pub fn inv_std<T: Real>(var: &[T], eps: T) -> Vec<T> {
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

/// Gradient of train-mode normalization given the normalized output `xhat`.
///
/// `dx = inv_std / N · (N·g − Σg − x̂·Σ(g·x̂))` per channel.
pub fn normalize_train_backward<T: Real>(xhat: &Tensor<T>, inv_std: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let c = inv_std.len();
    let n = xhat.len() / c;
    let nf = T::from_usize(n).unwrap();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (gr, xr) in dy.data().chunks(c).zip(xhat.data().chunks(c)) {
        for j in 0..c {
            sum_g[j] = sum_g[j] + gr[j];
            sum_gx[j] = sum_gx[j] + gr[j] * xr[j];
        }
    }
    let mut dx = dy.clone();
    for (dr, xr) in dx.data_mut().chunks_mut(c).zip(xhat.data().chunks(c)) {
        for j in 0..c {
            dr[j] = inv_std[j] / nf * (nf * dr[j] - sum_g[j] - xr[j] * sum_gx[j]);
        }
    }
    dx
}
