//! Building blocks shared by the normalization layers and the networks.

pub mod layers;
pub mod norm;
pub mod spectral;

pub use layers::{Conv2d, Dense, Embedding};
pub use norm::{BatchNorm, NormKind, RunningStats};
pub use spectral::{spectral_normalize, SpectralState};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Class labels and latent codes fed to conditional layers.
#[derive(Clone, Debug)]
pub struct Cond {
    pub classes: Vec<usize>,
    pub z: Option<Var>,
}

impl Cond {
    pub fn check(&self, num_classes: usize, batch: usize) -> Result<()> {
        if self.classes.len() != batch {
            return Err(Error::Conditioning(format!(
                "{} class labels for a batch of {batch}",
                self.classes.len()
            )));
        }
        if let Some(&c) = self.classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::ClassOutOfRange { class: c, num_classes });
        }
        Ok(())
    }
}

/// Forward context: where parameters live, the mode, and whether this pass
/// should produce parameter gradients.
pub struct Ctx<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    pub trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self { store, mode, trainable: true }
    }

    pub fn frozen(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self { store, mode, trainable: false }
    }

    pub fn param(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(g.param(name, t, self.trainable && self.store.is_trainable(name)))
    }

    /// Weight leaf, spectrally normalized when the store holds power-iteration
    /// buffers for it. Train mode advances the iteration by one step.
    pub fn weight(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let w = self.param(g, name)?;
        let (u_name, v_name) = (format!("{name}.sn_u"), format!("{name}.sn_v"));
        if !self.store.contains(&u_name) {
            return Ok(w);
        }
        let mut st = SpectralState {
            u: self.store.get(&u_name)?.data().to_vec(),
            v: self.store.get(&v_name)?.data().to_vec(),
        };
        if self.mode == Mode::Train {
            st.step(self.store.get(name)?.data());
            let n = st.u.len();
            self.store.set(&u_name, crate::tensor::Tensor::new([n], st.u.clone())?)?;
            let n = st.v.len();
            self.store.set(&v_name, crate::tensor::Tensor::new([n], st.v.clone())?)?;
        }
        g.spectral_scale(w, st.u, st.v)
    }
}
