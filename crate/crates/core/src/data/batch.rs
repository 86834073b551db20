use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Shuffled index batches over a dataset of `len` items.
///
/// Every epoch is an independent permutation seeded by `(seed, epoch)`. With
/// `cycle` the stream of permutations is concatenated indefinitely and a
/// batch may straddle two epochs, so a smaller dataset can be consumed in
/// lock-step with a larger one. Without `cycle` exactly one epoch is yielded
/// and the last batch may be short.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    cycle: bool,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
    exhausted: bool,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64, cycle: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if len == 0 {
            return Err(Error::InvalidInput("cannot iterate an empty dataset".into()));
        }
        if !cycle && batch_size > len {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds dataset size {len} without cycling"
            )));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            cycle,
            epoch: 0,
            order: Self::permutation(len, seed, 0),
            pos: 0,
            exhausted: false,
        })
    }

    fn permutation(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng_for(seed, &[0xba7c, epoch]));
        order
    }

    /// Index of the epoch the next slot is drawn from.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.exhausted {
            return None;
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.pos == self.len {
                if !self.cycle {
                    self.exhausted = true;
                    break;
                }
                self.epoch += 1;
                self.order = Self::permutation(self.len, self.seed, self.epoch);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        if !self.cycle && self.pos == self.len {
            self.exhausted = true;
        }
        (!batch.is_empty()).then_some(batch)
    }
}
