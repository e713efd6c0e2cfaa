//! Derivative-free fine-tuning against black-box prediction APIs.
//!
//! The pipeline: [`subspace`] maps a low-dimensional latent to a soft
//! prompt through a frozen random projection, [`cma`] searches that latent
//! space from fitness values alone, [`refine`] trains a small residual
//! network on the returned predictions, and [`trainer`] alternates the two
//! under a shared query budget with mutual consistency losses. [`blackbox`]
//! draws the only boundary that matters: prompts in, a prediction matrix
//! out, every query metered. [`tasks`] generates seeded synthetic few-shot
//! problems to run against, and [`service`] puts the surrogate behind a
//! TCP wire so the client code path is honest end to end.

// Indexed loops are kept where they mirror per-coordinate math, and
// `!(a < b)`-style comparisons are NaN-rejecting on purpose.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blackbox;
pub mod cma;
pub mod error;
pub mod numerics;
pub mod refine;
pub mod service;
pub mod subspace;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
