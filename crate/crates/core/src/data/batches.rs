use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One mini-batch. `(epoch, start)` identifies it uniquely within a stream.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub epoch: u64,
    pub start: usize,
}

/// Position within the stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IteratorState {
    pub epoch: u64,
    pub pos: usize,
}

/// Endless stream of batches; every epoch draws a fresh permutation from
/// `(seed, epoch)`.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    ds: Arc<Dataset>,
    batch: usize,
    seed: u64,
    drop_last: bool,
    epoch: u64,
    pos: usize,
    perm: Vec<usize>,
}

pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

impl BatchIterator {
    pub fn new(ds: Arc<Dataset>, batch: usize, seed: u64, drop_last: bool) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if drop_last && batch > ds.len() {
            return Err(Error::Invalid(format!("batch {batch} exceeds dataset size {} with drop_last", ds.len())));
        }
        let perm = epoch_permutation(ds.len(), seed, 0);
        Ok(Self { ds, batch, seed, drop_last, epoch: 0, pos: 0, perm })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.ds
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn state(&self) -> IteratorState {
        IteratorState { epoch: self.epoch, pos: self.pos }
    }

    pub fn restore(&mut self, state: IteratorState) -> Result<()> {
        if state.pos > self.ds.len() {
            return Err(Error::Invalid(format!("iterator position {} beyond dataset size {}", state.pos, self.ds.len())));
        }
        self.epoch = state.epoch;
        self.pos = state.pos;
        self.perm = epoch_permutation(self.ds.len(), self.seed, self.epoch);
        Ok(())
    }

    fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.pos = 0;
        self.perm = epoch_permutation(self.ds.len(), self.seed, self.epoch);
    }

    pub fn next_batch<T: Real>(&mut self) -> Batch<T> {
        let n = self.ds.len();
        let remaining = n - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch) {
            self.advance_epoch();
        }
        let take = self.batch.min(n - self.pos);
        let indices = self.perm[self.pos..self.pos + take].to_vec();
        let batch = Batch {
            images: self.ds.gather(&indices),
            labels: self.ds.labels().map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices,
            epoch: self.epoch,
            start: self.pos,
        };
        self.pos += take;
        batch
    }
}
