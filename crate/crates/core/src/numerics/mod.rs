//! Dense tensors, a reverse-mode tape, a Jacobi eigensolver and a
//! finite-difference gradient oracle.

mod eig;
mod gradcheck;
mod tape;
mod tensor;

pub use eig::{sym_eig, SymEig};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use tape::{
    gelu, normal_cdf, sigmoid, AttentionOpts, Dropout, Gradients, MaskMode, OpKind, Tape, Var,
    LAYER_NORM_EPS,
};
pub use tensor::{matmul, softmax_lastdim, Tensor};

pub(crate) use tape::stcb_forward;
pub(crate) use tensor::write_csv_row;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[cfg(test)]
mod tape_tests;
