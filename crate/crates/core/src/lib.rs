//! Dataset distillation into addressable memories.
//!
//! A labeled dataset is compressed into a small bank of shared bases plus a
//! set of learned addressing matrices. A query vector (usually a one-hot
//! label) is mapped by each addressing matrix to a coefficient vector over
//! the bases, and the resulting linear combinations are the synthetic
//! training images. Bases and addressing matrices are learned by
//! differentiating a held-out loss through an unrolled SGD-with-momentum
//! training run of a freshly initialized classifier.
//!
//! This crate is `no_std` (it needs `alloc`). File formats, parallel
//! evaluation and the command line live in the `memdistill` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod bptt;
pub mod continual;
pub mod data;
pub mod distill;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod models;
pub mod rng;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
