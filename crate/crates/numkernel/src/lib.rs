// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numerical kernel for the layer-pruning laboratory.
//!
//! - [`Tensor`]: row-major dense `f64` storage with finiteness checks.
//! - [`Graph`]: the differentiable operation set, implemented eagerly by
//!   [`Eager`] and with reverse-mode recording by [`Tape`].
//! - [`linalg`]: Jacobi SVD, least squares, pseudo-inverse, QR and seeded
//!   random orthogonal matrices.

pub mod error;
pub mod graph;
pub mod linalg;
pub mod ops;
pub mod tensor;

pub use error::{KernelError, Result};
pub use graph::{Eager, Gradients, Graph, Tape, Var};
pub use linalg::{
    least_squares, pseudo_inverse, qr, random_orthogonal, svd, SvdResult, PINV_RTOL,
};
pub use ops::AttentionShape;
pub use tensor::Tensor;
