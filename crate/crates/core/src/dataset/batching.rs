use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use vqg_tensor::init::seeded;

/// Position of a batch iterator: which epoch, and how many samples of
/// that epoch's permutation have been consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub position: usize,
}

/// Endless seeded batch schedule over sample indices. Each epoch draws a
/// fresh permutation from `(seed, epoch)`, so a cursor alone is enough to
/// resume.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    min_batch: usize,
    cursor: Cursor,
    order: Vec<usize>,
}

impl Batcher {
    /// `min_batch` > 1 folds a short tail batch into the preceding one
    /// (batch norm cannot train on a single row).
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool, min_batch: usize) -> Self {
        assert!(batch_size >= 1, "batch_size must be at least 1");
        let mut b = Self {
            n,
            batch_size,
            seed,
            shuffle,
            min_batch,
            cursor: Cursor::default(),
            order: Vec::new(),
        };
        b.order = b.permutation(0);
        b
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn seek(&mut self, cursor: Cursor) {
        if cursor.epoch != self.cursor.epoch || self.order.is_empty() {
            self.order = self.permutation(cursor.epoch);
        }
        self.cursor = cursor;
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        if self.shuffle {
            let mut rng = seeded(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        order
    }

    /// Sizes of the batches of one epoch.
    pub fn epoch_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        let mut left = self.n;
        while left > 0 {
            let mut take = left.min(self.batch_size);
            if left - take > 0 && left - take < self.min_batch {
                take = left;
            }
            sizes.push(take);
            left -= take;
        }
        sizes
    }

    /// Indices of the next batch; rolls into the next epoch when the
    /// current one is exhausted. Returns an empty batch only when there
    /// are no samples.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        if self.cursor.position >= self.n {
            self.seek(Cursor {
                epoch: self.cursor.epoch + 1,
                position: 0,
            });
        }
        let start = self.cursor.position;
        let left = self.n - start;
        let mut take = left.min(self.batch_size);
        if left - take > 0 && left - take < self.min_batch {
            take = left;
        }
        self.cursor.position += take;
        self.order[start..start + take].to_vec()
    }

    /// One pass over the data in batches, without affecting the cursor.
    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        let order = self.permutation(epoch);
        let mut out = Vec::new();
        let mut start = 0;
        for size in self.epoch_sizes() {
            out.push(order[start..start + size].to_vec());
            start += size;
        }
        out
    }
}
