use std::collections::BTreeMap;

use crate::autograd::Gradients;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched and keep their moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update of every trainable entry of `store` that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
        let lr = T::from_f64_lossy(lr);
        let names: Vec<String> = store.trainable().map(|e| e.name.clone()).collect();
        for name in names {
            let Some(g) = grads.param(&name) else { continue };
            let p = store.get_mut(&name)?;
            p.expect_same_shape(g)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi = *pi - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(&format!("{prefix}.step"), self.step);
        for (k, t) in &self.m {
            ckpt.insert(&format!("{prefix}/m/{k}"), false, t.cast());
        }
        for (k, t) in &self.v {
            ckpt.insert(&format!("{prefix}/v/{k}"), false, t.cast());
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.step = ckpt.meta_parse(&format!("{prefix}.step"))?;
        self.m.clear();
        self.v.clear();
        let (pm, pv) = (format!("{prefix}/m/"), format!("{prefix}/v/"));
        for t in &ckpt.tensors {
            if let Some(k) = t.name.strip_prefix(&pm) {
                self.m.insert(k.to_string(), t.tensor.cast());
            } else if let Some(k) = t.name.strip_prefix(&pv) {
                self.v.insert(k.to_string(), t.tensor.cast());
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Checkpoint(format!("optimizer `{prefix}` has unmatched moment tensors")));
        }
        Ok(())
    }
}

/// Global L2 norm of the gradients of `store`'s trainable entries.
pub fn grad_norm<T: Real>(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
    store
        .trainable()
        .filter_map(|e| grads.param(&e.name))
        .flat_map(|g| g.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2)))
        .sum::<f64>()
        .sqrt()
}

/// Names of trainable entries whose gradient holds a non-finite value.
pub fn non_finite_grads<T: Real>(store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<String> {
    store
        .trainable()
        .filter(|e| grads.param(&e.name).is_some_and(|g| !g.all_finite()))
        .map(|e| e.name.clone())
        .collect()
}
