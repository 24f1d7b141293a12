//! Ensemble data assimilation with kernel-based model error correction.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod da;
pub mod error;
pub mod exec;
pub mod gmm;
pub mod grf;
pub mod io;
pub mod kernel_init;
pub mod kernels;
pub mod metrics;
pub mod rng;
pub mod slp;
pub mod smoother;

pub use error::{Error, Result};
