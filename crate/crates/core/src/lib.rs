//! Core engine for multi-step station-level transit flow forecasting.
//!
//! Everything in this crate is pure computation over owned buffers: dense
//! matrix arithmetic with reverse-mode automatic differentiation, the five
//! inter-station correlation graph builders, the multi-graph convolutional
//! recurrent model itself, the preprocessing/inverse chain, and the metric
//! and baseline implementations used for evaluation. File formats, CLI and
//! anything that touches the filesystem live in the companion `mgcrnn` crate.
//!
//! The crate is `no_std` (alloc required); all randomness flows through an
//! explicitly seeded [`rng::SplitRng`] so that every result is reproducible.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graphs;
pub mod ingest;
pub mod matrix;
pub mod mgc;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod seq;
pub mod tape;
pub mod train;

pub use error::{CoreError, Result};
pub use matrix::Matrix;
pub use rng::SplitRng;
