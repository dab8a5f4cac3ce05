//! Deterministic dense linear algebra for symmetric and SPD matrices.
//!
//! Everything here is plain fp64 on row-major storage. The eigensolver and the
//! Cholesky routines are written so that identical input bytes always produce
//! identical output bytes, independent of thread count.

mod cholesky;
mod eigen;
mod mat;

pub use cholesky::{chol_logdet_spd, spd_solve, Cholesky};
pub use eigen::{eig_sym_desc, SymEigen};
pub use mat::{axpy, dot, pairwise_sum, Mat};

use thiserror::Error;

/// Errors from the linear-algebra kernels.
#[derive(Debug, Error, Clone, PartialEq)]
#[allow(clippy::enum_variant_names)]
pub enum NumericsError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric: |A[{row}][{col}] - A[{col}][{row}]| = {delta:e}")]
    NotSymmetric { row: usize, col: usize, delta: f64 },
    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("matrix is not positive definite: Cholesky pivot {index} is {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}
