use crate::error::{Error, Result};

/// FIFO ring buffer of key embeddings used as shared negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    data: Vec<f32>,
    cursor: usize,
    filled: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self { dim, capacity, data: vec![0.0; capacity * dim], cursor: 0, filled: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Overwrites the oldest rows with `keys` (`B × dim`, `B ≤ capacity`).
    pub fn push(&mut self, keys: &[f32]) -> Result<()> {
        if keys.len() % self.dim != 0 {
            return Err(Error::Shape(format!("{} values is not a whole number of {}-d rows", keys.len(), self.dim)));
        }
        let b = keys.len() / self.dim;
        if b > self.capacity {
            return Err(Error::invalid(format!("cannot push {b} rows into a queue of {}", self.capacity)));
        }
        for row in keys.chunks_exact(self.dim) {
            let at = self.cursor * self.dim;
            self.data[at..at + self.dim].copy_from_slice(row);
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }

    /// The filled rows, oldest first, `len × dim`.
    pub fn view(&self) -> Vec<f32> {
        let start = if self.filled < self.capacity { 0 } else { self.cursor };
        (0..self.filled)
            .flat_map(|i| {
                let r = (start + i) % self.capacity;
                self.data[r * self.dim..(r + 1) * self.dim].iter().copied()
            })
            .collect()
    }
}
