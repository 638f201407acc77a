//! Tensor kernels. Each forward kernel has a matching backward routine used by
//! the autograd tape in [`crate::autograd`].

pub mod conv;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, depthwise_conv2d};
pub use pool::{avg_pool2x2, upsample2x};

use crate::tensor::Real;

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^v)` without overflow.
pub fn softplus<T: Real>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
