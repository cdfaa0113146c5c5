//! Dense-to-MoE transformation of a toy diffusion transformer.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation:
//!
//! * [`tape`]: a define-by-run reverse-mode autodiff tape over [`tensor::Tensor`]
//! * [`dit`]: a FLUX-style hybrid DiT with double- and single-stream blocks
//! * [`flow`] and [`corpus`]: rectified flow objective, Euler sampler and a
//!   procedural prompt-conditioned image set
//! * [`moe`], [`taylor`], [`mob`]: the sparse layers and how they are carved
//!   out of a dense model
//! * [`distill`]: distillation losses and the staged trainer
//! * [`analysis`]: routing histograms, block probes and parameter/FLOP accounting
//!
//! IO, checkpoints and the command line live in the `dense2moe` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod corpus;
pub mod dit;
pub mod distill;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod mob;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod taylor;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
