//! The leaky baseline: nodes are never reused.

use std::sync::Arc;

use crate::arena::Arena;
use crate::error::{Error, Result};

/// Allocation without reclamation. The pool must cover the whole run.
#[derive(Debug, Clone)]
pub struct NoReclaim {
    arena: Arc<Arena>,
}

impl NoReclaim {
    pub fn new(arena: Arc<Arena>) -> Self {
        Self { arena }
    }

    pub fn arena(&self) -> &Arc<Arena> {
        &self.arena
    }

    pub fn nr_alloc(&self) -> Result<u64> {
        self.arena
            .pop_free(0)
            .map(|n| n.raw())
            .ok_or(Error::Exhausted {
                capacity: self.arena.capacity(),
            })
    }

    /// Does nothing: the node is never reused.
    pub fn nr_free(&self, _node: u64) {}
}
