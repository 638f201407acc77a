//! Resampling, pooling and broadcast helpers.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![T::zero(); b * oh * ow * c];
    for n in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((n * h + y / 2) * w + xx / 2) * c;
                let dst = ((n * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&xs[src..src + c]);
            }
        }
    }
    Tensor::new([b, oh, ow, c], out)
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    sum_blocks(dy, T::one())
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2x2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    sum_blocks(x, T::from_f64_lossy(0.25))
}

fn sum_blocks<T: Real>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("2x2 pooling needs even spatial size, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = vec![T::zero(); b * oh * ow * c];
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((n * h + y) * w + xx) * c;
                let dst = ((n * oh + y / 2) * ow + xx / 2) * c;
                for j in 0..c {
                    out[dst + j] = out[dst + j] + xs[src + j] * scale;
                }
            }
        }
    }
    Tensor::new([b, oh, ow, c], out)
}

pub fn avg_pool2x2_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let up = upsample2x(dy)?;
    Ok(up.map(|v| v * T::from_f64_lossy(0.25)))
}

/// Global sum pooling `(B,H,W,C) -> (B,C)`.
pub fn sum_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    let mut out = vec![T::zero(); b * c];
    for (n, plane) in x.data().chunks(h * w * c).enumerate() {
        for row in plane.chunks(c) {
            for j in 0..c {
                out[n * c + j] = out[n * c + j] + row[j];
            }
        }
    }
    Tensor::new([b, c], out)
}

/// Channel-wise mean `(B,H,W,C) -> (B,H,W,1)`.
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    let inv = T::one() / T::from_usize(c).unwrap();
    let data = x.data().chunks(c).map(|r| r.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([b, h, w, 1], data)
}

/// Channel-wise max and the winning channel per pixel.
pub fn channel_max<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (b, h, w, c) = x.dims4()?;
    let mut vals = Vec::with_capacity(b * h * w);
    let mut arg = Vec::with_capacity(b * h * w);
    for row in x.data().chunks(c) {
        let (mut best, mut at) = (row[0], 0);
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                at = j;
            }
        }
        vals.push(best);
        arg.push(at);
    }
    Ok((Tensor::new([b, h, w, 1], vals)?, arg))
}

/// Offsets of a same-rank operand broadcast (size-1 axes repeat) across `shape`.
pub fn broadcast_offsets(shape: &[usize], operand: &[usize]) -> Result<Vec<usize>> {
    if shape.len() != operand.len() || shape.iter().zip(operand).any(|(&s, &o)| o != s && o != 1) {
        return Err(Error::Shape(format!("cannot broadcast {operand:?} to {shape:?}")));
    }
    let rank = shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if operand[i] == 1 { 0 } else { acc };
        acc *= operand[i];
    }
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(out)
}
