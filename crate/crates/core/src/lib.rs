//! Three-network adversarial training: a generator, a discriminator and a
//! classifier trained simultaneously, with pseudo-label and KL-consistency
//! losses coupling the classifier into the adversarial game.
//!
//! The crate is self-contained: a minimal reverse-mode autodiff engine
//! ([`graph::Graph`]), DCGAN-family network builders ([`net`]), the loss
//! components ([`loss`]), per-step trainers for the method and its baselines
//! ([`train`]), a synthetic dataset plus batching utilities ([`data`]) and
//! the Adam optimizer ([`adam`]).
//!
//! Everything runs on 64-bit floats, single-threaded, and is deterministic
//! per seed. The crate is `no_std`-compatible (requires `alloc`); file IO,
//! checkpoints and the CLI live in the companion `trigan-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adam;
pub mod data;
pub mod error;
pub mod graph;
mod kernels;
pub mod loss;
mod math;
pub mod net;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, Primitive};
pub use tensor::Tensor;
