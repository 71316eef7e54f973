//! Training core for dimensional speech emotion estimation.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (an allocator is required). File formats, manifests
//! and the command line live in the companion `emodim` crate.
//!
//! Layout:
//! - [`nnstack`]: reverse-mode differentiation tape, GRU and depthwise
//!   temporal convolution layers, finite-difference checker.
//! - [`model`]: GRU / TCGRU multi-task emotion network.
//! - [`losses`]: CCC, cross-entropy, confidence-weighted cosine distillation,
//!   and the epoch-dependent loss weighting schedule.
//! - [`data`]: feature sequences, stream fusion, length-bucketed batching.
//! - [`synth`]: seeded synthetic corpus generator.
//! - [`training`]: Adam, teacher cache, epoch loop with early stopping.
//! - [`evaluation`]: split-level CCC, per-valence-bin RMSE, embeddings.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nnstack;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Matrix;

/// Number of dimensional emotion outputs (activation, valence, dominance).
pub const N_DIMS: usize = 3;
/// Number of discrete emotion classes.
pub const N_CLASSES: usize = 7;
/// Column index of each emotion dimension in score/label matrices.
pub const ACT: usize = 0;
pub const VAL: usize = 1;
pub const DOM: usize = 2;
