//! Same-padded stride-1 convolutions over NHWC feature maps.

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{Real, Tensor};

/// Samples whose weight gradients are accumulated into one partial before the
/// partials are summed in order. Fixed so results do not depend on thread count.
const WGRAD_GROUP: usize = 4;

fn check_kernel(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Invalid(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Kernel geometry `(k, in, out)` of a `(k, k, in, out)` weight.
fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (_, _, _, c) = x.dims4()?;
    let (k, k2, ci, co) = match w.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::Shape(format!("conv weight must be (k,k,in,out), got {:?}", w.shape()))),
    };
    if k != k2 {
        return Err(Error::Shape(format!("square kernels only, got {k}x{k2}")));
    }
    check_kernel(k)?;
    if ci != c {
        return Err(Error::Shape(format!("conv expects {ci} input channels, map has {c}")));
    }
    Ok((k, ci, co))
}

fn im2col<T: Real>(x: &[T], h: usize, w: usize, c: usize, k: usize, col: &mut [T]) {
    let p = (k / 2) as isize;
    let kc = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut col[(y * w + xx) * kc..(y * w + xx + 1) * kc];
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - p;
                    let dst = &mut row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        dst.fill(T::zero());
                    } else {
                        let o = (sy as usize * w + sx as usize) * c;
                        dst.copy_from_slice(&x[o..o + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], h: usize, w: usize, c: usize, k: usize, dx: &mut [T]) {
    let p = (k / 2) as isize;
    let kc = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &col[(y * w + xx) * kc..(y * w + xx + 1) * kc];
            for ky in 0..k {
                let sy = y as isize + ky as isize - p;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - p;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let o = (sy as usize * w + sx as usize) * c;
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (d, &s) in dx[o..o + c].iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + bias` with zero padding `(k-1)/2`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (b, h, wd, c) = x.dims4()?;
    let (k, _, co) = conv_dims(x, w)?;
    if let Some(bias) = bias {
        if bias.len() != co {
            return Err(Error::Shape(format!("conv bias has {} entries, need {co}", bias.len())));
        }
    }
    let hw = h * wd;
    let kc = k * k * c;
    let mut out = vec![T::zero(); b * hw * co];
    let xs = x.data();
    let ws = w.data();
    parallel::for_each_chunk(&mut out, hw * co, |n, y| {
        let xb = &xs[n * hw * c..(n + 1) * hw * c];
        if let Some(bias) = bias {
            for row in y.chunks_mut(co) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if k == 1 {
            T::gemm(hw, c, co, xb, c as isize, 1, ws, co as isize, 1, beta, y, co as isize, 1);
        } else {
            let mut col = vec![T::zero(); hw * kc];
            im2col(xb, h, wd, c, k, &mut col);
            T::gemm(hw, kc, co, &col, kc as isize, 1, ws, co as isize, 1, beta, y, co as isize, 1);
        }
    });
    Tensor::new([b, h, wd, co], out)
}

/// Gradients of [`conv2d`] for the requested operands.
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<ConvGrads<T>> {
    let (b, h, wd, c) = x.dims4()?;
    let (k, _, co) = conv_dims(x, w)?;
    let hw = h * wd;
    let kc = k * k * c;
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    if dys.len() != b * hw * co {
        return Err(Error::Shape(format!("conv upstream gradient {:?} does not match output", dy.shape())));
    }

    let dx = if need_dx {
        let mut dx = vec![T::zero(); b * hw * c];
        parallel::for_each_chunk(&mut dx, hw * c, |n, dxb| {
            let dyb = &dys[n * hw * co..(n + 1) * hw * co];
            if k == 1 {
                // dx = dy · wᵀ
                T::gemm(hw, co, c, dyb, co as isize, 1, ws, 1, co as isize, T::zero(), dxb, c as isize, 1);
            } else {
                let mut dcol = vec![T::zero(); hw * kc];
                T::gemm(hw, co, kc, dyb, co as isize, 1, ws, 1, co as isize, T::zero(), &mut dcol, kc as isize, 1);
                col2im_add(&dcol, h, wd, c, k, dxb);
            }
        });
        Some(Tensor::new([b, h, wd, c], dx)?)
    } else {
        None
    };

    let dw = if need_dw {
        let groups = b.div_ceil(WGRAD_GROUP);
        let partials = parallel::map_range(groups, |g| {
            let mut acc = vec![T::zero(); kc * co];
            let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); hw * kc] };
            for n in g * WGRAD_GROUP..((g + 1) * WGRAD_GROUP).min(b) {
                let xb = &xs[n * hw * c..(n + 1) * hw * c];
                let dyb = &dys[n * hw * co..(n + 1) * hw * co];
                let src: &[T] = if k == 1 {
                    xb
                } else {
                    im2col(xb, h, wd, c, k, &mut col);
                    &col
                };
                // dw += colᵀ · dy
                T::gemm(kc, hw, co, src, 1, kc as isize, dyb, co as isize, 1, T::one(), &mut acc, co as isize, 1);
            }
            acc
        });
        let mut total = vec![T::zero(); kc * co];
        for p in partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t = *t + v;
            }
        }
        Some(Tensor::new(w.shape().to_vec(), total)?)
    } else {
        None
    };

    let db = if need_db {
        let mut db = vec![T::zero(); co];
        for row in dys.chunks(co) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
        Some(Tensor::new([co], db)?)
    } else {
        None
    };

    Ok(ConvGrads { dx, dw, db })
}

/// Kernel bank geometry: `(k, k, C)` shared or `(B, k, k, C)` per sample.
fn dw_dims<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<(usize, bool)> {
    let (b, _, _, c) = x.dims4()?;
    let (k, kc, per_sample) = match kernels.shape()[..] {
        [k1, k2, kc] if k1 == k2 => (k1, kc, false),
        [kb, k1, k2, kc] if k1 == k2 => {
            if kb != b {
                return Err(Error::Shape(format!("per-sample kernels for {kb} samples, batch is {b}")));
            }
            (k1, kc, true)
        }
        _ => {
            return Err(Error::Shape(format!(
                "depth-wise kernels must be (k,k,C) or (B,k,k,C), got {:?}",
                kernels.shape()
            )))
        }
    };
    check_kernel(k)?;
    if kc != c {
        return Err(Error::Shape(format!("depth-wise kernels have {kc} channels, map has {c}")));
    }
    Ok((k, per_sample))
}

/// Per-channel convolution: output channel `j` only sees input channel `j`
/// filtered by `kernels[.., .., j]`. Zero padding keeps the spatial size.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, kernels: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, h, w, c) = x.dims4()?;
    let (k, per_sample) = dw_dims(x, kernels)?;
    let p = (k / 2) as isize;
    let xs = x.data();
    let ks = kernels.data();
    let kstride = if per_sample { k * k * c } else { 0 };
    let mut out = vec![T::zero(); x.len()];
    parallel::for_each_chunk(&mut out, h * w * c, |n, yb| {
        let xb = &xs[n * h * w * c..(n + 1) * h * w * c];
        let kb = &ks[n * kstride..n * kstride + k * k * c];
        for y in 0..h {
            for xx in 0..w {
                let dst = &mut yb[(y * w + xx) * c..(y * w + xx + 1) * c];
                for ky in 0..k {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - p;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &xb[(sy as usize * w + sx as usize) * c..][..c];
                        let kern = &kb[(ky * k + kx) * c..][..c];
                        for j in 0..c {
                            dst[j] = dst[j] + src[j] * kern[j];
                        }
                    }
                }
            }
        }
    });
    Tensor::new([b, h, w, c], out)
}

/// Returns `(dx, dkernels)`; `dkernels` has the same shape as `kernels`.
pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dk: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, h, w, c) = x.dims4()?;
    let (k, per_sample) = dw_dims(x, kernels)?;
    x.expect_same_shape(dy)?;
    let p = (k / 2) as isize;
    let xs = x.data();
    let ks = kernels.data();
    let dys = dy.data();
    let kstride = if per_sample { k * k * c } else { 0 };
    let plane = h * w * c;

    let dx = if need_dx {
        let mut dx = vec![T::zero(); x.len()];
        parallel::for_each_chunk(&mut dx, plane, |n, dxb| {
            let dyb = &dys[n * plane..(n + 1) * plane];
            let kb = &ks[n * kstride..n * kstride + k * k * c];
            for y in 0..h {
                for xx in 0..w {
                    let g = &dyb[(y * w + xx) * c..][..c];
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let o = (sy as usize * w + sx as usize) * c;
                            let kern = &kb[(ky * k + kx) * c..][..c];
                            for j in 0..c {
                                dxb[o + j] = dxb[o + j] + g[j] * kern[j];
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::new([b, h, w, c], dx)?)
    } else {
        None
    };

    let dk = if need_dk {
        let per: Vec<Vec<T>> = parallel::map_range(b, |n| {
            let xb = &xs[n * plane..(n + 1) * plane];
            let dyb = &dys[n * plane..(n + 1) * plane];
            let mut acc = vec![T::zero(); k * k * c];
            for y in 0..h {
                for xx in 0..w {
                    let g = &dyb[(y * w + xx) * c..][..c];
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - p;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as isize + kx as isize - p;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = &xb[(sy as usize * w + sx as usize) * c..][..c];
                            let a = &mut acc[(ky * k + kx) * c..][..c];
                            for j in 0..c {
                                a[j] = a[j] + g[j] * src[j];
                            }
                        }
                    }
                }
            }
            acc
        });
        let data = if per_sample {
            per.into_iter().flatten().collect()
        } else {
            let mut total = vec![T::zero(); k * k * c];
            for p in per {
                for (t, v) in total.iter_mut().zip(p) {
                    *t = *t + v;
                }
            }
            total
        };
        Some(Tensor::new(kernels.shape().to_vec(), data)?)
    } else {
        None
    };
    Ok((dx, dk))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f64>::zeros([1, 4, 4, 2]);
        let k = Tensor::<f64>::zeros([2, 2, 2]);
        assert!(matches!(depthwise_conv2d(&x, &k), Err(Error::Invalid(_))));
        let w = Tensor::<f64>::zeros([2, 2, 2, 3]);
        assert!(conv2d(&x, &w, None).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros([1, 4, 4, 2]);
        let k = Tensor::<f64>::zeros([3, 3, 3]);
        assert!(matches!(depthwise_conv2d(&x, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn ones_kernel_on_constant_map() {
        let c = 2.5;
        let x = Tensor::<f64>::full([1, 4, 4, 1], c);
        let k = Tensor::<f64>::ones([3, 3, 1]);
        let y = depthwise_conv2d(&x, &k).unwrap();
        assert_eq!(y.at4(0, 1, 1, 0), 9.0 * c);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0 * c);
        assert_eq!(y.at4(0, 0, 1, 0), 6.0 * c);
        assert_eq!(y.at4(0, 3, 3, 0), 4.0 * c);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 5, 3], |i| (i as f64 * 0.37).sin());
        let mut k = Tensor::<f64>::zeros([3, 3, 3]);
        for j in 0..3 {
            k.data_mut()[(3 + 1) * 3 + j] = 1.0;
        }
        assert_eq!(depthwise_conv2d(&x, &k).unwrap(), x);
    }

    #[test]
    fn pointwise_conv_is_matrix_product() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64);
        let w = Tensor::<f64>::new([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::new([3], vec![0.5, 0.0, -1.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b)).unwrap();
        // pixel (0,1): x = [2, 3]
        assert_eq!(&y.data()[3..6], &[2. + 12. + 0.5, 4. + 15., 6. + 18. - 1.]);
    }
}
