//! Cholesky factorization of symmetric positive definite matrices with a
//! relative jitter and an escalation schedule.
//!
//! Gram matrices of near-duplicate rows are routinely near-singular, so every
//! factorization adds `jitter_rel * mean(diag(A))` to the diagonal. When a
//! factorization fails at the requested jitter, the escalating entry points
//! multiply the jitter by 10 (starting from 1e-8 relative when the caller
//! supplied zero) until it exceeds 1e-2 relative, at which point the matrix is
//! declared degenerate. Inverses are never formed explicitly; every `A^{-1}B`
//! in the crate is a factorization plus triangular solves.

use super::{LinalgError, Matrix};

/// Relative jitter used when a caller passes zero and the plain factorization
/// fails; also the crate-wide default for Gram-matrix solves.
pub const DEFAULT_JITTER_REL: f64 = 1e-8;

/// Upper end of the jitter-escalation schedule. Beyond this the matrix is
/// reported as degenerate rather than silently regularized into mush.
pub const MAX_JITTER_REL: f64 = 1e-2;

/// Tolerance for the symmetry precondition, relative to the largest entry.
const SYMMETRY_TOL: f64 = 1e-10;

/// Block size for the right-looking blocked factorization.
const BLOCK: usize = 64;

/// A lower-triangular Cholesky factor `L` with `L L^T = A + jitter_abs * I`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Matrix,
    jitter_rel: f64,
    jitter_abs: f64,
}

impl CholeskyFactor {
    /// The lower-triangular factor (strict upper triangle is zero).
    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn size(&self) -> usize {
        self.l.rows()
    }

    /// Relative jitter that actually produced this factor (after escalation).
    pub fn jitter_rel(&self) -> f64 {
        self.jitter_rel
    }

    /// Absolute diagonal shift that was applied.
    pub fn jitter_abs(&self) -> f64 {
        self.jitter_abs
    }

    /// Solves `(A + jitter_abs * I) X = B` for all columns of `B` at once via
    /// forward and backward substitution.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.size();
        assert_eq!(
            b.rows(),
            n,
            "solve shape mismatch: factor is {}x{}, rhs has {} rows",
            n,
            n,
            b.rows()
        );
        let m = b.cols();
        let l = &self.l;
        let mut x = b.clone();

        // Forward substitution: L y = B, overwriting x row by row.
        for i in 0..n {
            for k in 0..i {
                let lik = l.get(i, k);
                if lik != 0.0 {
                    let (head, tail) = x.data_mut().split_at_mut(i * m);
                    let yk = &head[k * m..(k + 1) * m];
                    let yi = &mut tail[..m];
                    for j in 0..m {
                        yi[j] -= lik * yk[j];
                    }
                }
            }
            let inv = 1.0 / l.get(i, i);
            for v in &mut x.row_mut(i)[..] {
                *v *= inv;
            }
        }

        // Backward substitution: L^T x = y.
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l.get(k, i);
                if lki != 0.0 {
                    let (head, tail) = x.data_mut().split_at_mut(k * m);
                    let xi = &mut head[i * m..(i + 1) * m];
                    let xk = &tail[..m];
                    for j in 0..m {
                        xi[j] -= lki * xk[j];
                    }
                }
            }
            let inv = 1.0 / l.get(i, i);
            for v in &mut x.row_mut(i)[..] {
                *v *= inv;
            }
        }
        x
    }
}

/// Checks the symmetry precondition and returns the worst asymmetry.
fn check_symmetric(a: &Matrix) -> Result<(), LinalgError> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "factor_spd requires a square matrix");
    let scale = a.max_abs().max(1.0);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(LinalgError::NotSymmetric {
            max_asymmetry: worst,
        });
    }
    Ok(())
}

/// In-place blocked right-looking Cholesky of the lower triangle.
/// On failure returns the 1-based order of the non-positive leading minor.
fn cholesky_lower_in_place(a: &mut Matrix) -> Result<(), usize> {
    let n = a.rows();
    let mut k0 = 0;
    while k0 < n {
        let kb = BLOCK.min(n - k0);

        // Unblocked factorization of the diagonal block.
        for j in k0..k0 + kb {
            let mut d = a.get(j, j);
            for k in k0..j {
                let v = a.get(j, k);
                d -= v * v;
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(j + 1);
            }
            let ljj = d.sqrt();
            a.set(j, j, ljj);
            let inv = 1.0 / ljj;
            for i in j + 1..k0 + kb {
                let mut v = a.get(i, j);
                for k in k0..j {
                    v -= a.get(i, k) * a.get(j, k);
                }
                a.set(i, j, v * inv);
            }
        }

        let rest = k0 + kb;
        if rest < n {
            // Panel solve: L21 = A21 * L11^{-T}, row by row of the panel.
            for i in rest..n {
                for j in k0..k0 + kb {
                    let mut v = a.get(i, j);
                    for k in k0..j {
                        v -= a.get(i, k) * a.get(j, k);
                    }
                    a.set(i, j, v / a.get(j, j));
                }
            }

            // Trailing update: A22 -= L21 * L21^T via dgemm on submatrices.
            let m = n - rest;
            let stride = a.cols() as isize;
            let ptr = a.data_mut().as_mut_ptr();
            unsafe {
                let panel = ptr.add(rest * n + k0) as *const f64;
                let trailing = ptr.add(rest * n + rest);
                matrixmultiply::dgemm(
                    m,
                    kb,
                    m,
                    -1.0,
                    panel,
                    stride,
                    1,
                    panel,
                    1,
                    stride,
                    1.0,
                    trailing,
                    stride,
                    1,
                );
            }
        }
        k0 += kb;
    }

    // Zero the strict upper triangle so the factor is exactly triangular.
    for i in 0..n {
        for j in i + 1..n {
            a.set(i, j, 0.0);
        }
    }
    Ok(())
}

/// Single-attempt factorization of `A + jitter_rel * mean(diag(A)) * I`.
pub fn factor_spd(a: &Matrix, jitter_rel: f64) -> Result<CholeskyFactor, LinalgError> {
    assert!(jitter_rel >= 0.0, "jitter must be nonnegative");
    check_symmetric(a)?;
    factor_spd_unchecked(a, jitter_rel)
}

/// Factorization without the symmetry re-check (used by the escalation loop).
fn factor_spd_unchecked(a: &Matrix, jitter_rel: f64) -> Result<CholeskyFactor, LinalgError> {
    let n = a.rows();
    let jitter_abs = jitter_rel * a.mean_diag();
    let mut work = a.clone();
    for i in 0..n {
        let v = work.get(i, i) + jitter_abs;
        work.set(i, i, v);
    }
    match cholesky_lower_in_place(&mut work) {
        Ok(()) => Ok(CholeskyFactor {
            l: work,
            jitter_rel,
            jitter_abs,
        }),
        Err(minor) => Err(LinalgError::FactorizationFailed {
            size: n,
            leading_minor: minor,
            jitter_rel,
        }),
    }
}

/// Factorization with the jitter-escalation schedule: starts at the supplied
/// relative jitter, multiplies by 10 on failure (entering at
/// [`DEFAULT_JITTER_REL`] when starting from zero), and gives up past
/// [`MAX_JITTER_REL`].
pub fn factor_spd_escalating(
    a: &Matrix,
    start_jitter_rel: f64,
) -> Result<CholeskyFactor, LinalgError> {
    assert!(start_jitter_rel >= 0.0, "jitter must be nonnegative");
    check_symmetric(a)?;
    let mut jitter = start_jitter_rel;
    loop {
        match factor_spd_unchecked(a, jitter) {
            Ok(f) => {
                if jitter != start_jitter_rel {
                    log::warn!(
                        "factorization of a {0}x{0} matrix needed jitter escalation \
                         from {1:.1e} to {2:.1e} (relative)",
                        a.rows(),
                        start_jitter_rel,
                        jitter
                    );
                }
                return Ok(f);
            }
            Err(err) => {
                let next = if jitter == 0.0 {
                    DEFAULT_JITTER_REL
                } else {
                    jitter * 10.0
                };
                if next > MAX_JITTER_REL {
                    return Err(err);
                }
                jitter = next;
            }
        }
    }
}

/// Solves `(A + jitter * mean(diag(A)) * I)^{-1} B` via Cholesky, escalating
/// the jitter per the schedule when needed.
pub fn chol_solve(a: &Matrix, b: &Matrix, jitter_rel: f64) -> Result<Matrix, LinalgError> {
    Ok(factor_spd_escalating(a, jitter_rel)?.solve(b))
}
