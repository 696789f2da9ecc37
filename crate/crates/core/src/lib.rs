//! Training engine for gated recurrent networks whose gates use a flexible,
//! kernel-expanded sigmoid.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense matrices, stable scalar nonlinearities, the seeded
//!   generator and a small Cholesky solver.
//! * [`kafgate`]: the kernel activation function, the flexible gate built on
//!   it and its analytic gradients.
//! * [`recurrent`]: the GRU cell, sequence unrolling and BPTT.
//! * [`head`]: batch norm, softmax classifier, cross-entropy and checkpoints.
//! * [`model`]: the full network and its gradient set.
//! * [`optim`]: Adam, global-norm clipping and early stopping.
//! * [`data`]: MNIST IDX ingestion and the sequential variants.
//! * [`harness`]: run configuration, training loop, evaluation and exports.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod harness;
pub mod head;
pub mod kafgate;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod recurrent;

pub use error::{Error, Result};

/// Short git revision captured at build time, `unknown` outside a checkout.
pub const BUILD_ID: &str = env!("KAFGRU_GIT_REV");
