//! Dense linear algebra: row-major `f64` matrices, symmetric positive
//! definite factorization with a jitter-escalation schedule, and a
//! reverse-mode differentiation tape over matrix operations.

mod chol;
mod matrix;
mod tape;

pub use chol::{
    chol_solve, factor_spd, factor_spd_escalating, CholeskyFactor, DEFAULT_JITTER_REL,
    MAX_JITTER_REL,
};
pub use matrix::Matrix;
pub use tape::{Gradients, NodeId, OpaqueVjp, Tape};

use thiserror::Error;

/// Errors reported by factorizations and the differentiation tape.
#[derive(Debug, Error)]
pub enum LinalgError {
    /// The (jittered) matrix is not positive definite even after the
    /// jitter-escalation schedule ran out. Usually a degenerate kernel or a
    /// batch of duplicate rows.
    #[error(
        "Cholesky factorization failed for a {size}x{size} matrix \
         (leading minor {leading_minor}, final relative jitter {jitter_rel:.3e})"
    )]
    FactorizationFailed {
        size: usize,
        leading_minor: usize,
        jitter_rel: f64,
    },
    /// The input to an SPD factorization was not symmetric within tolerance.
    #[error("matrix is not symmetric: max |a_ij - a_ji| = {max_asymmetry:.3e}")]
    NotSymmetric { max_asymmetry: f64 },
    /// A loss node handed to `backward` was not a 1x1 scalar.
    #[error("backward requires a scalar loss node, got a {rows}x{cols} value")]
    NotScalarLoss { rows: usize, cols: usize },
    /// Reserved for tape nodes without an adjoint rule.
    #[error("no adjoint rule for primitive `{name}`")]
    UnsupportedPrimitive { name: &'static str },
}
