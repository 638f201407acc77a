use rand::Rng;

use super::{Ctx, SpectralState};
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{normal_tensor, orthogonal_tensor, ParamStore};
use crate::tensor::{Real, Tensor};

fn add_sn_buffers<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, shape: &[usize], rng: &mut R) {
    let st = SpectralState::<T>::random(shape, rng);
    let (nu, nv) = (st.u.len(), st.v.len());
    store.add_buffer(&format!("{name}.sn_u"), Tensor::new([nu], st.u).unwrap());
    store.add_buffer(&format!("{name}.sn_v"), Tensor::new([nv], st.v).unwrap());
}

/// Same-padded stride-1 convolution, weight `(k, k, in, out)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
    pub spectral_norm: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, kernel: usize, in_channels: usize, out_channels: usize) -> Self {
        Self { name: name.into(), kernel, in_channels, out_channels, bias: true, spectral_norm: false }
    }

    pub fn with_sn(mut self, sn: bool) -> Self {
        self.spectral_norm = sn;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_channels, self.out_channels]
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let shape = self.weight_shape();
        store.add_param(&self.weight_name(), orthogonal_tensor(&shape, 1.0, rng));
        if self.bias {
            store.add_param(&self.bias_name(), Tensor::zeros([self.out_channels]));
        }
        if self.spectral_norm {
            add_sn_buffers(store, &self.weight_name(), &shape, rng);
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.weight(g, &self.weight_name())?;
        let b = if self.bias { Some(ctx.param(g, &self.bias_name())?) } else { None };
        g.conv2d(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.kernel * self.kernel * self.in_channels * self.out_channels + if self.bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates for an `h × w` output map (batch 1).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.kernel * self.kernel * self.in_channels * self.out_channels) as u64
    }
}

/// Fully connected layer, weight `(in, out)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub spectral_norm: bool,
}

impl Dense {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Self { name: name.into(), in_features, out_features, bias: true, spectral_norm: false }
    }

    pub fn with_sn(mut self, sn: bool) -> Self {
        self.spectral_norm = sn;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let shape = [self.in_features, self.out_features];
        store.add_param(&self.weight_name(), orthogonal_tensor(&shape, 1.0, rng));
        if self.bias {
            store.add_param(&format!("{}.bias", self.name), Tensor::zeros([self.out_features]));
        }
        if self.spectral_norm {
            add_sn_buffers(store, &self.weight_name(), &shape, rng);
        }
    }

    /// Zero-initialized variant used for projections that must start inert.
    pub fn init_zero<T: Real>(&self, store: &mut ParamStore<T>) {
        store.add_param(&self.weight_name(), Tensor::zeros([self.in_features, self.out_features]));
        if self.bias {
            store.add_param(&format!("{}.bias", self.name), Tensor::zeros([self.out_features]));
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.weight(g, &self.weight_name())?;
        let b = if self.bias { Some(ctx.param(g, &format!("{}.bias", self.name))?) } else { None };
        g.linear(x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + if self.bias { self.out_features } else { 0 }
    }
}

/// Lookup table `(num_classes, dim)`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub name: String,
    pub num_classes: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, num_classes: usize, dim: usize) -> Self {
        Self { name: name.into(), num_classes, dim }
    }

    pub fn table_name(&self) -> String {
        format!("{}.table", self.name)
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        store.add_param(&self.table_name(), normal_tensor(&[self.num_classes, self.dim], 0.02, rng));
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: &mut Ctx<T>, classes: &[usize]) -> Result<Var> {
        let t = ctx.param(g, &self.table_name())?;
        g.embedding(t, classes)
    }

    pub fn param_count(&self) -> usize {
        self.num_classes * self.dim
    }
}
