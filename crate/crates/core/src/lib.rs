//! Latent equivariant shift operators for out-of-distribution
//! classification of transformed noisy MNIST digits.
//!
//! The pipeline: [`datagen`] renders transformed digits, [`model`] encodes
//! them linearly into a 70-dimensional latent space where [`operators`]
//! undo the transformation, [`trainer`] fits everything with Adam, and
//! [`pose`] recovers unknown transformation indices by k-NN voting.
//! [`expcli`] drives the experiments behind the `latop` binary.

mod binio;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod expcli;
pub mod model;
pub mod ndmath;
pub mod operators;
pub mod pose;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
