//! Dense kernels with hand-derived adjoints, a replay tape, and a
//! finite-difference gradient oracle.

mod gradcheck;
pub mod kernel_check;
mod kernels;
mod matrix;
mod solve;
mod tape;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport};
pub use kernels::{
    bce, bce_grad, matmul_backward, matmul_fwd_bwd, sigmoid, softmax_backward, softmax_weights,
    softplus, BCE_EPS,
};
pub use matrix::{dot, DenseMatrix};
pub use solve::{solve_spd, solve_spd_adjoint, SpdFactor};
pub use tape::{Grads, ParamId, ParamStore, Tape, Var};
pub(crate) use tape::abs_sim;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error(
        "singular system of size {dim}: factorization failed with jitter up to {max_jitter:e} \
         (condition estimate {condition:e})"
    )]
    Singular {
        dim: usize,
        max_jitter: f64,
        condition: f64,
    },
    #[error("non-finite loss while perturbing parameter `{param}` entry {index}")]
    NonFinite { param: String, index: usize },
}

impl MathError {
    pub(crate) fn shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Self {
        MathError::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        }
    }
}
