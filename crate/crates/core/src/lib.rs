//! SparseK: a differentiable top-k operator and the sparse attention built on it.
//!
//! Everything in this crate is pure computation over owned buffers and only
//! needs `alloc`. File formats, timing, the training driver and the command
//! line live in the `sparsek` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod cache;
pub mod error;
pub mod numerics;
pub mod selection;
pub mod sparsek;
pub mod stream;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor2};
pub use sparsek::{sparsek, sparsek_jvp, sparsek_partial, topk_hard, KBudget, SparseKSolution};
pub use stream::StreamState;
