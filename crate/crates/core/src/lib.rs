//! Trainable representation pooling for long-sequence encoder-decoders.
//!
//! The crate is built bottom-up:
//!
//! - [`Matrix`], [`Tape`] and [`optim`]: a small float64 numeric core with
//!   reverse-mode gradients, finite-difference checking and Adam.
//! - [`topk`]: successive halving top-k, the hard top-k and the iterative
//!   softmax baseline; [`metrics`] scores them.
//! - [`scorers`], [`attention`] and [`model`]: the transformer pieces and the
//!   pooled encoder-decoder built from them.
//! - [`complexity`]: closed-form multiplication counts per architecture.

pub mod attention;
pub mod checkpoint;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod scorers;
pub mod tape;
pub mod task;
pub mod topk;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tape::{Elementwise, Gradients, Tape, Var, WindowMode};
