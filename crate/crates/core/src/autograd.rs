//! Reverse-mode autodiff over coarse tensor operations.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Each op keeps
//! the context its analytic backward rule needs; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for every node that requires one.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, conv, norm, pool};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var, Option<Vec<usize>>),
    Mul(Var, Var, Option<Vec<usize>>),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Conv2d { x: Var, w: Var, b: Option<Var> },
    Depthwise { x: Var, k: Var },
    NormTrain { x: Var, inv_std: Vec<T> },
    ChannelScale { x: Var, scale: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Upsample2x(Var),
    AvgPool2(Var),
    SumPool(Var),
    ChannelMean(Var),
    ChannelMax(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    BroadcastTo(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    SpectralScale { w: Var, u: Vec<T>, v: Vec<T>, sigma: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), param_index: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Named parameter leaf. Repeated requests for one name return the same var.
    pub fn param(&mut self, name: &str, t: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, trainable);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    fn binary_offsets(&self, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(None)
        } else {
            Ok(Some(pool::broadcast_offsets(sa, sb)?))
        }
    }

    /// `a + b`, where `b` may broadcast along size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let offs = self.binary_offsets(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = match &offs {
            None => va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect(),
            Some(o) => va.data().iter().zip(o).map(|(&x, &i)| x + vb.data()[i]).collect(),
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b, offs), rg))
    }

    /// `a ⊙ b`, where `b` may broadcast along size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let offs = self.binary_offsets(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = match &offs {
            None => va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
            Some(o) => va.data().iter().zip(o).map(|(&x, &i)| x * vb.data()[i]).collect(),
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b, offs), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a - b` (same broadcasting as [`Graph::add`]).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    /// `s·a + c` elementwise with constant scalars.
    pub fn affine_scalar(&mut self, a: Var, s: T, c: T) -> Result<Var> {
        let scaled = self.scale(a, s);
        if c == T::zero() {
            return Ok(scaled);
        }
        let shape = vec![1; self.shape(a).len()];
        let cst = self.constant(Tensor::full(shape, c));
        self.add(scaled, cst)
    }

    /// `1 - a`, computed as a single rounding so `a + (1 - a) == 1` holds for
    /// values in (0, 1).
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine_scalar(a, -T::one(), T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Sigmoid clamped to `[ε, 1 − ε]` so outputs stay strictly inside (0, 1)
    /// even where the exact value rounds to 0 or 1.
    pub fn sigmoid_open(&mut self, a: Var) -> Var {
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        let value = self.value(a).map(|x| ops::sigmoid(x).max(lo).min(hi));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(ops::softplus);
        let rg = self.rg(a);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b }, rg))
    }

    /// Depth-wise convolution with `(k,k,C)` or per-sample `(B,k,k,C)` kernels.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var) -> Result<Var> {
        let value = conv::depthwise_conv2d(self.value(x), self.value(k))?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(value, Op::Depthwise { x, k }, rg))
    }

    /// Train-mode channel normalization. Returns the normalized var together
    /// with the batch mean and biased variance.
    pub fn normalize_train(&mut self, x: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (mean, var) = norm::channel_moments(self.value(x))?;
        let inv = norm::inv_std(&var, eps);
        let value = norm::normalize_with(self.value(x), &mean, &inv);
        let rg = self.rg(x);
        let v = self.push(value, Op::NormTrain { x, inv_std: inv }, rg);
        Ok((v, mean, var))
    }

    /// `x · scale + shift` per channel with constant vectors.
    pub fn channel_affine_const(&mut self, x: Var, scale: Vec<T>, shift: Vec<T>) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if scale.len() != c || shift.len() != c {
            return Err(Error::Shape(format!("channel affine of length {} on {c} channels", scale.len())));
        }
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * scale[j] + shift[j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelScale { x, scale }, rg))
    }

    /// `x · w + b` for `x: (B, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bn, fin) = self.value(x).dims2()?;
        let (win, fout) = self.value(w).dims2()?;
        if win != fin {
            return Err(Error::Shape(format!("linear expects {win} inputs, got {fin}")));
        }
        let mut out = vec![T::zero(); bn * fout];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != fout {
                return Err(Error::Shape(format!("linear bias has {} entries, need {fout}", bv.len())));
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        T::gemm(
            bn,
            fin,
            fout,
            self.value(x).data(),
            fin as isize,
            1,
            self.value(w).data(),
            fout as isize,
            1,
            beta,
            &mut out,
            fout as isize,
            1,
        );
        let value = Tensor::new([bn, fout], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    /// Row lookup `table[ids]` for a `(K, E)` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (k, e) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= k {
                return Err(Error::ClassOutOfRange { class: id, num_classes: k });
            }
            data.extend_from_slice(&self.value(table).data()[id * e..(id + 1) * e]);
        }
        let value = Tensor::new([ids.len(), e], data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let value = pool::upsample2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let value = pool::avg_pool2x2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// Global sum pooling `(B,H,W,C) -> (B,C)`.
    pub fn sum_pool(&mut self, x: Var) -> Result<Var> {
        let value = pool::sum_pool(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumPool(x), rg))
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let value = pool::channel_mean(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelMean(x), rg))
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (value, arg) = pool::channel_max(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::ChannelMax(x, arg), rg))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let lead: Vec<usize> = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape(format!("cannot concatenate {:?} with {:?}", s, self.shape(first))));
            }
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::Shape("cannot slice a scalar".into()))?;
        if start + len > w {
            return Err(Error::Shape(format!("slice {}..{} of last axis {w}", start, start + len)));
        }
        let data: Vec<T> =
            self.value(x).data().chunks(w).flat_map(|r| r[start..start + len].iter().copied()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceLast { x, start }, rg))
    }

    /// Repeats size-1 axes of `x` to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let offs = pool::broadcast_offsets(shape, self.shape(x))?;
        let data = offs.iter().map(|&o| self.value(x).data()[o]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::BroadcastTo(x, offs), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let value = Tensor::scalar(self.value(x).sum() / n);
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Sum over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::Shape("cannot reduce a scalar".into()))?;
        let data = self.value(x).data().chunks(w).map(|r| r.iter().copied().sum()).collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumLast(x), rg))
    }

    /// `w / σ` where `σ = uᵀ W v` for the weight viewed as `(rows, rest)` and
    /// `u`, `v` held constant.
    pub fn spectral_scale(&mut self, w: Var, u: Vec<T>, v: Vec<T>) -> Result<Var> {
        let wv = self.value(w);
        let rows = u.len();
        if rows == 0 || wv.len() != rows * v.len() {
            return Err(Error::Shape(format!(
                "spectral vectors ({}, {}) do not match weight {:?}",
                rows,
                v.len(),
                wv.shape()
            )));
        }
        let mut u = u;
        let mut sigma = spectral_sigma(wv.data(), &u, &v);
        let floor = T::from_f64_lossy(1e-12);
        if sigma < floor {
            // Degenerate weight: σ̂ is pinned to the floor and treated as constant.
            sigma = floor;
            u.iter_mut().for_each(|x| *x = T::zero());
        }
        let inv = T::one() / sigma;
        let value = wv.map(|x| x * inv);
        let rg = self.rg(w);
        Ok(self.push(value, Op::SpectralScale { w, u, v, sigma }, rg))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let seed = Tensor::full(self.shape(loss).to_vec(), T::one());
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                seed.shape(),
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, names: self.param_index.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    /// Reduces a full-shape gradient onto a broadcast operand.
    fn reduce_broadcast(&self, g: &[T], offs: &[usize], target: Var) -> Result<Tensor<T>> {
        let shape = self.shape(target).to_vec();
        let mut out = Tensor::zeros(shape);
        let od = out.data_mut();
        for (&gv, &o) in g.iter().zip(offs) {
            od[o] = od[o] + gv;
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, offs) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.clone())?;
                }
                if self.rg(*b) {
                    let gb = match offs {
                        None => g.clone(),
                        Some(o) => self.reduce_broadcast(g.data(), o, *b)?,
                    };
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Mul(a, b, offs) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let data = match offs {
                        None => g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect(),
                        Some(o) => g.data().iter().zip(o).map(|(&x, &k)| x * vb.data()[k]).collect(),
                    };
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), data)?)?;
                }
                if self.rg(*b) {
                    let prod: Vec<T> = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    let gb = match offs {
                        None => Tensor::new(vb.shape().to_vec(), prod)?,
                        Some(o) => self.reduce_broadcast(&prod, o, *b)?,
                    };
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s))?;
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let ga = g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gv, xv| gv * ops::sigmoid(xv))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Conv2d { x, w, b } => {
                let cg = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                )?;
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw)?;
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Depthwise { x, k } => {
                let (dx, dk) = conv::depthwise_conv2d_backward(
                    self.value(*x),
                    self.value(*k),
                    g,
                    self.rg(*x),
                    self.rg(*k),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx)?;
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *k, dk)?;
                }
            }
            Op::NormTrain { x, inv_std } => {
                let dx = norm::normalize_train_backward(&node.value, inv_std, g);
                self.accumulate(grads, *x, dx)?;
            }
            Op::ChannelScale { x, scale } => {
                let c = scale.len();
                let mut dx = g.clone();
                for row in dx.data_mut().chunks_mut(c) {
                    for j in 0..c {
                        row[j] = row[j] * scale[j];
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Linear { x, w, b } => {
                let (bn, fin) = self.value(*x).dims2()?;
                let fout = self.value(*w).shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); bn * fin];
                    // dx = g · wᵀ
                    T::gemm(
                        bn,
                        fout,
                        fin,
                        g.data(),
                        fout as isize,
                        1,
                        self.value(*w).data(),
                        1,
                        fout as isize,
                        T::zero(),
                        &mut dx,
                        fin as isize,
                        1,
                    );
                    self.accumulate(grads, *x, Tensor::new([bn, fin], dx)?)?;
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fin * fout];
                    // dw = xᵀ · g
                    T::gemm(
                        fin,
                        bn,
                        fout,
                        self.value(*x).data(),
                        1,
                        fin as isize,
                        g.data(),
                        fout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        fout as isize,
                        1,
                    );
                    self.accumulate(grads, *w, Tensor::new([fin, fout], dw)?)?;
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in g.data().chunks(fout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new([fout], db)?)?;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let e = shape[1];
                let mut dt = Tensor::zeros(shape);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * e..(id + 1) * e];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[r * e..(r + 1) * e]) {
                        *d = *d + v;
                    }
                }
                self.accumulate(grads, *table, dt)?;
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x).to_vec())?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Upsample2x(x) => {
                self.accumulate(grads, *x, pool::upsample2x_backward(g)?)?;
            }
            Op::AvgPool2(x) => {
                self.accumulate(grads, *x, pool::avg_pool2x2_backward(g)?)?;
            }
            Op::SumPool(x) => {
                let (b, h, w, c) = self.value(*x).dims4()?;
                let mut dx = Tensor::zeros([b, h, w, c]);
                for (n, plane) in dx.data_mut().chunks_mut(h * w * c).enumerate() {
                    for row in plane.chunks_mut(c) {
                        row.copy_from_slice(&g.data()[n * c..(n + 1) * c]);
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ChannelMean(x) => {
                let c = *self.shape(*x).last().unwrap();
                let inv = T::one() / T::from_usize(c).unwrap();
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, c)).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), data)?)?;
            }
            Op::ChannelMax(x, arg) => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = Tensor::zeros(self.shape(*x).to_vec());
                for (p, (&gv, &j)) in g.data().iter().zip(arg).enumerate() {
                    dx.data_mut()[p * c + j] = gv;
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Concat(parts) => {
                let total = *g.shape().last().unwrap();
                let mut start = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.rg(p) {
                        let data = g.data().chunks(total).flat_map(|r| r[start..start + w].iter().copied()).collect();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?)?;
                    }
                    start += w;
                }
            }
            Op::SliceLast { x, start } => {
                let shape = self.shape(*x).to_vec();
                let w = *shape.last().unwrap();
                let len = *g.shape().last().unwrap();
                let mut dx = Tensor::zeros(shape);
                for (dr, gr) in dx.data_mut().chunks_mut(w).zip(g.data().chunks(len)) {
                    dr[*start..*start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::BroadcastTo(x, offs) => {
                let gx = self.reduce_broadcast(g.data(), offs, *x)?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv))?;
            }
            Op::MeanAll(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                let gv = g.data()[0] / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x).to_vec(), gv))?;
            }
            Op::SumLast(x) => {
                let w = *self.shape(*x).last().unwrap();
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, w)).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), data)?)?;
            }
            Op::SpectralScale { w, u, v, sigma } => {
                // d(W/σ) = g/σ − (⟨g, W⟩/σ²) u vᵀ
                let wv = self.value(*w);
                let sigma = *sigma;
                let inner = g.dot(wv) / (sigma * sigma);
                let cols = v.len();
                let mut dw = g.map(|x| x / sigma);
                for (r, &ur) in u.iter().enumerate() {
                    for (cidx, &vc) in v.iter().enumerate() {
                        let d = &mut dw.data_mut()[r * cols + cidx];
                        *d = *d - inner * ur * vc;
                    }
                }
                self.accumulate(grads, *w, dw)?;
            }
        }
        Ok(())
    }
}

/// `uᵀ W v` with `W` stored row-major as `(u.len(), v.len())`.
pub fn spectral_sigma<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(&a, &b)| a * b).sum::<T>())
        .sum()
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    names: HashMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter; zero-shaped lookups fail with `None`.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|&v| self.get(v))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph<f64>, Var) -> Var, x0: Tensor<f64>) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let eval = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(t);
            let y = build(&mut g, x);
            g.value(y).sum()
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            assert!((num - analytic.data()[i]).abs() < 1e-6, "entry {i}: {num} vs {}", analytic.data()[i]);
        }
    }

    fn sample(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| ((i as f64 + 0.3) * 1.7).sin())
    }

    #[test]
    fn broadcast_mul_gradients() {
        let w = sample(&[1, 1, 1, 3]).map(|v| v + 2.0);
        fd_check(
            move |g, x| {
                let c = g.constant(w.clone());
                let y = g.mul(x, c).unwrap();
                g.mul(y, y).unwrap()
            },
            sample(&[2, 2, 2, 3]),
        );
    }

    #[test]
    fn normalization_gradients() {
        fd_check(
            |g, x| {
                let (n, _, _) = g.normalize_train(x, 1e-5).unwrap();
                let w = g.constant(sample(&[2, 3, 3, 2]));
                g.mul(n, w).unwrap()
            },
            sample(&[2, 3, 3, 2]).map(|v| 3.0 * v + 1.0),
        );
    }

    #[test]
    fn pooling_and_attention_primitives() {
        fd_check(
            |g, x| {
                let a = g.channel_mean(x).unwrap();
                let m = g.channel_max(x).unwrap();
                let cat = g.concat_last(&[a, m]).unwrap();
                let s = g.sigmoid(cat);
                let up = g.upsample2x(s).unwrap();
                let p = g.avg_pool2x2(up).unwrap();
                g.sum_pool(p).unwrap()
            },
            sample(&[1, 2, 2, 3]),
        );
    }

    #[test]
    fn spectral_scale_gradient() {
        let u = vec![0.6, 0.8];
        let v = vec![1.0, 0.0, 0.0];
        fd_check(
            move |g, x| {
                let s = g.spectral_scale(x, u.clone(), v.clone()).unwrap();
                let t = g.tanh(s);
                g.mul(t, t).unwrap()
            },
            sample(&[2, 3]).map(|v| v + 1.5),
        );
    }

    #[test]
    fn linear_slice_and_embedding() {
        fd_check(
            |g, x| {
                let w = g.constant(sample(&[3, 4]));
                let b = g.constant(sample(&[4]));
                let y = g.linear(x, w, Some(b)).unwrap();
                let s = g.slice_last(y, 1, 2).unwrap();
                let sp = g.softplus(s);
                g.sum_last(sp).unwrap()
            },
            sample(&[2, 3]),
        );
        let mut g = Graph::<f64>::new();
        let t = g.input(sample(&[3, 2]));
        let e = g.embedding(t, &[2, 0, 2]).unwrap();
        let l = g.sum(e);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(t).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(g.embedding(t, &[3]), Err(Error::ClassOutOfRange { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(sample(&[2, 2]));
        let x = g.input(sample(&[2, 2]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), g.value(c));
    }
}
