//! Labelled token sequences and batching.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::Batch;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Examples padded to a common `seq_len` when batched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub seq_len: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, seq_len: usize) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.ids.is_empty() || e.ids.len() > seq_len) {
            return Err(invalid(format!("example of length {} outside 1..={seq_len}", e.ids.len())));
        }
        Ok(Self { examples, seq_len })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Pads the selected examples with token 0 up to the longest of them.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let seq_len = indices.iter().map(|&i| self.examples[i].ids.len()).max().unwrap_or(1);
        let mut ids = vec![0; indices.len() * seq_len];
        let mut lengths = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (b, &i) in indices.iter().enumerate() {
            let e = &self.examples[i];
            ids[b * seq_len..b * seq_len + e.ids.len()].copy_from_slice(&e.ids);
            lengths.push(e.ids.len());
            labels.push(e.label);
        }
        Batch {
            ids,
            lengths,
            seq_len,
            labels,
        }
    }

    /// Consecutive index chunks covering the whole set in order.
    pub fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// `size` distinct indices drawn uniformly (all of them if the set is smaller).
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let (chosen, _) = idx.partial_shuffle(rng, size.min(self.len()));
        chosen.to_vec()
    }
}

/// Infinite shuffled epochs over a dataset.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
