use crate::error::{Error, Result};
use crate::numcore::Tensor;

const NORM_TOL: f64 = 1e-5;

/// Fixed-capacity FIFO queue of unit-norm key vectors used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    storage: Vec<f64>,
    write_pointer: usize,
    fill_count: usize,
}

impl MemoryBank {
    /// An empty bank.
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!("memory bank {capacity}x{dim}")));
        }
        Ok(MemoryBank {
            capacity,
            dim,
            storage: vec![0.0; capacity * dim],
            write_pointer: 0,
            fill_count: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    pub fn write_pointer(&self) -> usize {
        self.write_pointer
    }

    pub fn is_empty(&self) -> bool {
        self.fill_count == 0
    }

    /// Appends rows of `keys` (`[B, dim]`, unit norm), evicting the oldest
    /// entries once full.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let s = keys.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "enqueue",
                lhs: vec![self.capacity, self.dim],
                rhs: s.to_vec(),
            });
        }
        if s[0] > self.capacity {
            return Err(Error::InvalidArgument(format!(
                "enqueue of {} keys exceeds bank capacity {}",
                s[0], self.capacity
            )));
        }
        for i in 0..s[0] {
            let row = keys.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(Error::InvalidArgument(format!("enqueued key {i} has norm {norm}")));
            }
        }
        for i in 0..s[0] {
            let p = self.write_pointer;
            self.storage[p * self.dim..(p + 1) * self.dim].copy_from_slice(keys.row(i));
            self.write_pointer = (p + 1) % self.capacity;
            self.fill_count = (self.fill_count + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Occupied rows in slot order, `[fill_count, dim]`.
    pub fn keys(&self) -> Tensor {
        Tensor::new([self.fill_count, self.dim], self.storage[..self.fill_count * self.dim].to_vec())
            .expect("bank storage")
    }

    /// Occupied rows from oldest to newest.
    pub fn keys_in_arrival_order(&self) -> Vec<Vec<f64>> {
        let start = if self.fill_count == self.capacity { self.write_pointer } else { 0 };
        (0..self.fill_count)
            .map(|i| {
                let slot = (start + i) % self.capacity;
                self.storage[slot * self.dim..(slot + 1) * self.dim].to_vec()
            })
            .collect()
    }

    /// Full storage `[capacity, dim]` for checkpointing.
    pub fn storage_tensor(&self) -> Tensor {
        Tensor::new([self.capacity, self.dim], self.storage.clone()).expect("bank storage")
    }

    pub fn restore(storage: &Tensor, write_pointer: usize, fill_count: usize) -> Result<Self> {
        let s = storage.shape();
        if s.len() != 2 || s[0] == 0 || write_pointer >= s[0] || fill_count > s[0] {
            return Err(Error::StructureMismatch {
                path: "bank".into(),
                reason: format!("storage {s:?}, pointer {write_pointer}, fill {fill_count}"),
            });
        }
        Ok(MemoryBank {
            capacity: s[0],
            dim: s[1],
            storage: storage.data().to_vec(),
            write_pointer,
            fill_count,
        })
    }
}
