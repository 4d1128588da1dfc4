//! Tensor completion with a variational auto-encoder over CP factor rows.
//!
//! A small neural decoder maps the concatenated latent factor rows of a
//! tensor entry to the mean and variance of a Gaussian over that entry's
//! value; free-form Gaussian posteriors over the rows are trained jointly
//! with the decoder by reparameterized stochastic variational inference.
//! A masked ALS-CP baseline and an experiment harness reproduce a
//! held-out RMSE evaluation protocol on synthetic and COO-file tensors.

#![allow(clippy::needless_range_loop)]

pub mod adam;
pub mod checkpoint;
pub mod cp;
pub mod error;
pub mod harness;
pub mod mat;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
