use std::collections::VecDeque;

use tokentrack_tensor::Tensor;

use crate::error::{contract, Result};

/// The most recent `capacity` post-backbone track tokens, oldest first.
#[derive(Clone, Debug)]
pub struct WindowBuffer {
    capacity: usize,
    slots: VecDeque<Tensor>,
}

impl WindowBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity must be positive");
        Self {
            capacity,
            slots: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Append a `1×D` token, evicting the oldest one when full.
    pub fn push(&mut self, token: Tensor) -> Result<()> {
        if let Some(first) = self.slots.front() {
            if first.shape() != token.shape() {
                return contract(format!(
                    "window token shape {:?} differs from {:?}",
                    token.shape(),
                    first.shape()
                ));
            }
        }
        if self.slots.len() == self.capacity {
            self.slots.pop_front();
        }
        self.slots.push_back(token);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.slots.iter()
    }

    /// Window contents stacked into an `L×D` tensor.
    pub fn stacked(&self) -> Result<Tensor> {
        let Some(first) = self.slots.front() else {
            return contract("empty window");
        };
        let d = first.numel();
        let data = self.slots.iter().flat_map(|t| t.data().iter().copied()).collect();
        Ok(Tensor::from_vec(vec![self.slots.len(), d], data))
    }
}
