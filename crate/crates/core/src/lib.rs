//! Translation-equivariant transformer neural processes.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with a reverse-mode tape.
//! * [`nn`]: MLPs, layer normalization, the Gaussian head and likelihood.
//! * [`attention`]: MHSA / MHCA, masked attention, and the translation-equivariant
//!   attention with input-location updates.
//! * [`models`]: CNP, RCNP, TNP, PT-TNP, TE-TNP and TE-PT-TNP.
//! * [`data`]: GP task sampling, shifts, and the binary task cache.
//! * [`gp`]: exact GP posterior predictive, used as a ground-truth oracle.
//! * [`train`]: objective, AdamW, training loop, evaluation and equivariance audit.
//! * [`verify`]: the property suites behind `tetnp verify`.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gp;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
