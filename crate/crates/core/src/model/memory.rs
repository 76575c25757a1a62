use std::collections::VecDeque;

use rmot_autograd::Tensor;

use crate::error::{CoreError, Result};

/// FIFO store of each query's past final embeddings. Every push holds one
/// `N×d` slot, so all queries share the same `valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    n_queries: usize,
    d_model: usize,
    slots: VecDeque<Tensor>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize, n_queries: usize, d_model: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be positive");
        MemoryBuffer { capacity, n_queries, d_model, slots: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn valid_len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Appends `q_final` (`N×d`), evicting the oldest slot when full.
    pub fn push(&mut self, q_final: Tensor) -> Result<()> {
        if q_final.shape() != [self.n_queries, self.d_model] {
            return Err(CoreError::Invalid(format!(
                "memory slot must be {}×{}, got {:?}",
                self.n_queries,
                self.d_model,
                q_final.shape()
            )));
        }
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(q_final);
        Ok(())
    }

    /// Slots oldest first.
    pub fn slots(&self) -> impl ExactSizeIterator<Item = &Tensor> + '_ {
        self.slots.iter()
    }

    pub fn slot(&self, k: usize) -> Option<&Tensor> {
        self.slots.get(k)
    }

    /// History of query `i`, oldest first (`valid_len×d`).
    pub fn history(&self, i: usize) -> Vec<&[f64]> {
        self.slots.iter().map(|s| s.row(i)).collect()
    }
}
