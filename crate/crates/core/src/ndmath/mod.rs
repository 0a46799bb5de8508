//! Dense linear algebra, reverse-mode gradients and the Adam optimizer.

mod adam;
mod linalg;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use linalg::{
    log_sum_exp, matrix_power, orthogonalize, softmax, softmax_cross_entropy, RANK_TOLERANCE,
};
pub use matrix::DenseMatrix;
pub use tape::{Gradients, Tape, Var};
