//! Class prototypes from labeled data and the FIFO memory bank of teacher
//! embeddings with their pseudo-labels.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::norm;

/// Tolerance on the unit-norm precondition of stored embeddings.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    dim: usize,
    prototypes: Vec<Option<Vec<f64>>>,
}

impl PrototypeTable {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self { dim, prototypes: vec![None; num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class_id: usize) -> Option<&[f64]> {
        self.prototypes.get(class_id)?.as_deref()
    }

    pub fn is_initialized(&self, class_id: usize) -> bool {
        self.get(class_id).is_some()
    }

    /// First sample of a class sets its prototype; later samples blend in as
    /// `X ← (1−β)·f + β·X`. The result is not re-normalized.
    pub fn update(&mut self, class_id: usize, embedding: &[f64], beta: f64) -> Result<()> {
        let len = self.prototypes.len();
        let slot = self.prototypes.get_mut(class_id).ok_or(Error::IndexOutOfRange { index: class_id, len })?;
        if embedding.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {} for prototypes of length {}",
                embedding.len(),
                self.dim
            )));
        }
        match slot {
            None => *slot = Some(embedding.to_vec()),
            Some(proto) => {
                for (x, f) in proto.iter_mut().zip(embedding) {
                    *x = (1.0 - beta) * f + beta * *x;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    pub pseudo_label: usize,
}

/// Bounded FIFO of teacher embeddings; the oldest entry is evicted first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&BankEntry> {
        self.entries.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn push(&mut self, embedding: Vec<f64>, pseudo_label: usize) -> Result<()> {
        let n = norm(&embedding);
        if !((n - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::NotNormalized(n));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(BankEntry { embedding, pseudo_label });
        Ok(())
    }

    /// Bank indices of entries carrying `class_id`, oldest first.
    pub fn indices_of(&self, class_id: usize) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| e.pseudo_label == class_id).map(|(i, _)| i).collect()
    }

    /// Embeddings of entries carrying `class_id`, oldest first.
    pub fn candidates_of(&self, class_id: usize) -> Vec<&[f64]> {
        self.entries.iter().filter(|e| e.pseudo_label == class_id).map(|e| e.embedding.as_slice()).collect()
    }
}
