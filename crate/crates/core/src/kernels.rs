//! Parametric kernel families with Gram assembly and analytic gradients.
//!
//! Two stationary families are provided: the RBF (squared-exponential)
//! kernel, the crate default, and a rational-quadratic alternative behind the
//! same interface. All parameters are stored in log space so the effective
//! lengthscale(s) and signal variance are positive by construction, which is
//! what lets Gram evaluation promise finite output unconditionally.
//!
//! Lengthscales may be shared (a single 1x1 log value) or per-dimension
//! (a 1xD row of log values).
//!
//! Gradients come in two flavors: pure functions ([`gram_param_grad`],
//! [`gram_input_grad`]) used directly by tests and oracles, and a tape hook
//! ([`gram_on_tape`]) that records Gram assembly as an opaque node whose
//! vector-Jacobian product routes adjoints to the parameters *and* to the
//! input rows — the path by which kernel-flow losses reach LSTM weights.

use crate::linalg::{Matrix, NodeId, OpaqueVjp, Tape};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Kernel family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Rbf,
    RationalQuadratic,
}

/// Trainable kernel parameters in log space.
///
/// `log_lengthscale` is 1x1 for a shared lengthscale or 1xD for
/// per-dimension lengthscales. `log_alpha` (shape parameter) is present
/// exactly for the rational-quadratic family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub log_lengthscale: Matrix,
    pub log_signal_variance: Matrix,
    pub log_alpha: Option<Matrix>,
}

impl KernelParams {
    /// RBF kernel with a shared lengthscale.
    pub fn rbf(log_lengthscale: f64, log_signal_variance: f64) -> Self {
        KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscale: Matrix::scalar(log_lengthscale),
            log_signal_variance: Matrix::scalar(log_signal_variance),
            log_alpha: None,
        }
    }

    /// RBF kernel with one lengthscale per input dimension.
    pub fn rbf_per_dim(log_lengthscales: &[f64], log_signal_variance: f64) -> Self {
        KernelParams {
            family: KernelFamily::Rbf,
            log_lengthscale: Matrix::from_vec(1, log_lengthscales.len(), log_lengthscales.to_vec()),
            log_signal_variance: Matrix::scalar(log_signal_variance),
            log_alpha: None,
        }
    }

    /// Rational-quadratic kernel with a shared lengthscale.
    pub fn rational_quadratic(
        log_lengthscale: f64,
        log_signal_variance: f64,
        log_alpha: f64,
    ) -> Self {
        KernelParams {
            family: KernelFamily::RationalQuadratic,
            log_lengthscale: Matrix::scalar(log_lengthscale),
            log_signal_variance: Matrix::scalar(log_signal_variance),
            log_alpha: Some(Matrix::scalar(log_alpha)),
        }
    }

    /// Effective signal variance sigma^2.
    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.scalar_value().exp()
    }

    /// Per-dimension inverse squared lengthscales, broadcast when shared.
    fn inv_sq_lengthscales(&self, dim: usize) -> Vec<f64> {
        let ells = self.log_lengthscale.data();
        assert!(
            ells.len() == 1 || ells.len() == dim,
            "lengthscale count {} does not match input dimension {}",
            ells.len(),
            dim
        );
        if ells.len() == 1 {
            let inv = (-2.0 * ells[0]).exp();
            vec![inv; dim]
        } else {
            ells.iter().map(|&l| (-2.0 * l).exp()).collect()
        }
    }

    fn alpha(&self) -> f64 {
        self.log_alpha
            .as_ref()
            .expect("rational-quadratic parameters carry log_alpha")
            .scalar_value()
            .exp()
    }

    /// All trainable values finite and consistently shaped for inputs of the
    /// given dimension.
    pub fn validate(&self, dim: usize) -> Result<(), String> {
        let ells = self.log_lengthscale.data().len();
        if ells != 1 && ells != dim {
            return Err(format!(
                "lengthscale count {ells} matches neither 1 nor input dimension {dim}"
            ));
        }
        if self.log_signal_variance.shape() != (1, 1) {
            return Err("log_signal_variance must be 1x1".into());
        }
        match (self.family, &self.log_alpha) {
            (KernelFamily::Rbf, Some(_)) => {
                return Err("RBF parameters must not carry log_alpha".into())
            }
            (KernelFamily::RationalQuadratic, None) => {
                return Err("rational-quadratic parameters require log_alpha".into())
            }
            _ => {}
        }
        if !self.log_lengthscale.all_finite()
            || !self.log_signal_variance.all_finite()
            || !self.log_alpha.as_ref().map_or(true, Matrix::all_finite)
        {
            return Err("kernel parameters contain non-finite values".into());
        }
        Ok(())
    }
}

/// Pairwise squared distances between rows, scaled per dimension by the
/// inverse squared lengthscales. When `a` and `b` are the same object the
/// diagonal is exactly zero; tiny negative values from cancellation are
/// clamped to zero everywhere.
fn sq_dists_scaled(params: &KernelParams, a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.cols(), "kernel inputs must share column count");
    let dim = a.cols();
    let inv_sq = params.inv_sq_lengthscales(dim);
    let scale: Vec<f64> = inv_sq.iter().map(|v| v.sqrt()).collect();

    let sa = Matrix::from_fn(a.rows(), dim, |i, k| a.get(i, k) * scale[k]);
    let same = std::ptr::eq(a, b);
    let sb = if same {
        sa.clone()
    } else {
        Matrix::from_fn(b.rows(), dim, |j, k| b.get(j, k) * scale[k])
    };

    let norms_a: Vec<f64> = (0..sa.rows())
        .map(|i| sa.row(i).iter().map(|v| v * v).sum())
        .collect();
    let norms_b: Vec<f64> = if same {
        norms_a.clone()
    } else {
        (0..sb.rows())
            .map(|j| sb.row(j).iter().map(|v| v * v).sum())
            .collect()
    };

    let cross = sa.matmul_nt(&sb);
    let mut d2 = Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        (norms_a[i] + norms_b[j] - 2.0 * cross.get(i, j)).max(0.0)
    });
    if same {
        for i in 0..d2.rows() {
            d2.set(i, i, 0.0);
        }
    }
    d2
}

fn gram_from_dists(params: &KernelParams, d2: &Matrix) -> Matrix {
    let sig2 = params.signal_variance();
    match params.family {
        KernelFamily::Rbf => d2.map(|d| sig2 * (-0.5 * d).exp()),
        KernelFamily::RationalQuadratic => {
            let alpha = params.alpha();
            d2.map(|d| sig2 * (1.0 + d / (2.0 * alpha)).powf(-alpha))
        }
    }
}

/// Gram matrix: entry `(i, j)` is `k(a_i, b_j)`.
///
/// Pass the same `&Matrix` for both arguments to get an exactly symmetric
/// Gram with `k(x, x) = sigma^2` on the diagonal.
pub fn gram(params: &KernelParams, a: &Matrix, b: &Matrix) -> Matrix {
    gram_from_dists(params, &sq_dists_scaled(params, a, b))
}

/// Gradients of a scalar loss with respect to the kernel parameters, given
/// the upstream adjoint of the Gram matrix.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    pub log_lengthscale: Matrix,
    pub log_signal_variance: Matrix,
    pub log_alpha: Option<Matrix>,
}

/// Per-entry weight matrix `W` such that input gradients take the form
/// `dA_ik = sum_j W_ij (b_jk - a_ik) / l_k^2`, plus the matrix `1 + u`
/// needed by the rational-quadratic shape gradient.
fn entry_weights(
    params: &KernelParams,
    k: &Matrix,
    d2: &Matrix,
    upstream: &Matrix,
) -> (Matrix, Option<Matrix>) {
    match params.family {
        KernelFamily::Rbf => (upstream.hadamard(k), None),
        KernelFamily::RationalQuadratic => {
            let alpha = params.alpha();
            let one_plus_u = d2.map(|d| 1.0 + d / (2.0 * alpha));
            let w = upstream
                .hadamard(k)
                .zip_map(&one_plus_u, |v, opu| v / opu);
            (w, Some(one_plus_u))
        }
    }
}

fn param_grad_with(
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
    k: &Matrix,
    d2: &Matrix,
    upstream: &Matrix,
) -> KernelGrad {
    let gk = upstream.hadamard(k);
    let d_log_sig2 = Matrix::scalar(gk.sum());
    let (w, one_plus_u) = entry_weights(params, k, d2, upstream);

    let shared = params.log_lengthscale.len() == 1;
    let d_log_ell = if shared {
        Matrix::scalar(w.hadamard(d2).sum())
    } else {
        // Per-dimension: sum_ij W_ij (a_im - b_jm)^2 / l_m^2, expanded so it
        // reuses one W*B product instead of a loop over entries per dim.
        let dim = a.cols();
        let inv_sq = params.inv_sq_lengthscales(dim);
        let wb = w.matmul(b);
        let row_sums: Vec<f64> = (0..w.rows()).map(|i| w.row(i).iter().sum()).collect();
        let col_sums = w.col_sums();
        let mut out = Matrix::zeros(1, dim);
        for m in 0..dim {
            let mut acc = 0.0;
            for i in 0..a.rows() {
                let aim = a.get(i, m);
                acc += row_sums[i] * aim * aim - 2.0 * aim * wb.get(i, m);
            }
            for j in 0..b.rows() {
                let bjm = b.get(j, m);
                acc += col_sums.get(0, j) * bjm * bjm;
            }
            out.set(0, m, acc * inv_sq[m]);
        }
        out
    };

    let d_log_alpha = match params.family {
        KernelFamily::Rbf => None,
        KernelFamily::RationalQuadratic => {
            let alpha = params.alpha();
            let opu = one_plus_u.expect("rational-quadratic weights carry 1 + u");
            // d k / d log(alpha) = k * alpha * (u / (1 + u) - ln(1 + u)).
            let factor = opu.map(|v| alpha * ((v - 1.0) / v - v.ln()));
            Some(Matrix::scalar(gk.hadamard(&factor).sum()))
        }
    };

    KernelGrad {
        log_lengthscale: d_log_ell,
        log_signal_variance: d_log_sig2,
        log_alpha: d_log_alpha,
    }
}

fn input_grad_with(
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
    k: &Matrix,
    d2: &Matrix,
    upstream: &Matrix,
) -> (Matrix, Matrix) {
    let dim = a.cols();
    let inv_sq = params.inv_sq_lengthscales(dim);
    let (w, _) = entry_weights(params, k, d2, upstream);

    // dA_ik = [ (W B)_ik - rowsum(W)_i * A_ik ] / l_k^2 and symmetrically
    // dB_jk = [ (W^T A)_jk - colsum(W)_j * B_jk ] / l_k^2.
    let wb = w.matmul(b);
    let row_sums: Vec<f64> = (0..w.rows()).map(|i| w.row(i).iter().sum()).collect();
    let da = Matrix::from_fn(a.rows(), dim, |i, kk| {
        (wb.get(i, kk) - row_sums[i] * a.get(i, kk)) * inv_sq[kk]
    });

    let wta = w.matmul_tn(a);
    let col_sums = w.col_sums();
    let db = Matrix::from_fn(b.rows(), dim, |j, kk| {
        (wta.get(j, kk) - col_sums.get(0, j) * b.get(j, kk)) * inv_sq[kk]
    });
    (da, db)
}

/// Analytic parameter gradients of `sum(upstream .* gram(params, a, b))`.
pub fn gram_param_grad(
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
    upstream: &Matrix,
) -> KernelGrad {
    let d2 = sq_dists_scaled(params, a, b);
    let k = gram_from_dists(params, &d2);
    param_grad_with(params, a, b, &k, &d2, upstream)
}

/// Analytic input-row gradients of `sum(upstream .* gram(params, a, b))`.
pub fn gram_input_grad(
    params: &KernelParams,
    a: &Matrix,
    b: &Matrix,
    upstream: &Matrix,
) -> (Matrix, Matrix) {
    let d2 = sq_dists_scaled(params, a, b);
    let k = gram_from_dists(params, &d2);
    input_grad_with(params, a, b, &k, &d2, upstream)
}

/// Tape node ids for one set of kernel parameters.
#[derive(Debug, Clone, Copy)]
pub struct KernelParamNodes {
    pub family: KernelFamily,
    pub log_lengthscale: NodeId,
    pub log_signal_variance: NodeId,
    pub log_alpha: Option<NodeId>,
}

/// Pushes kernel parameters onto a tape as trainable leaves.
pub fn push_kernel_params(tape: &mut Tape, params: &KernelParams) -> KernelParamNodes {
    KernelParamNodes {
        family: params.family,
        log_lengthscale: tape.leaf(params.log_lengthscale.clone()),
        log_signal_variance: tape.leaf(params.log_signal_variance.clone()),
        log_alpha: params.log_alpha.as_ref().map(|m| tape.leaf(m.clone())),
    }
}

/// Reassembles a [`KernelParams`] from the current tape values of its nodes.
pub fn kernel_params_from_nodes(tape: &Tape, nodes: &KernelParamNodes) -> KernelParams {
    KernelParams {
        family: nodes.family,
        log_lengthscale: tape.value(nodes.log_lengthscale).clone(),
        log_signal_variance: tape.value(nodes.log_signal_variance).clone(),
        log_alpha: nodes.log_alpha.map(|id| tape.value(id).clone()),
    }
}

struct GramVjp {
    family: KernelFamily,
}

impl GramVjp {
    fn params_from(&self, parents: &[&Matrix]) -> KernelParams {
        KernelParams {
            family: self.family,
            log_lengthscale: parents[2].clone(),
            log_signal_variance: parents[3].clone(),
            log_alpha: parents.get(4).map(|m| (*m).clone()),
        }
    }
}

impl OpaqueVjp for GramVjp {
    fn name(&self) -> &'static str {
        "gram"
    }

    fn vjp(&self, upstream: &Matrix, output: &Matrix, parents: &[&Matrix]) -> Vec<Matrix> {
        let params = self.params_from(parents);
        let (a, b) = (parents[0], parents[1]);
        let d2 = sq_dists_scaled(&params, a, b);
        let (da, db) = input_grad_with(&params, a, b, output, &d2, upstream);
        let pg = param_grad_with(&params, a, b, output, &d2, upstream);
        let mut grads = vec![da, db, pg.log_lengthscale, pg.log_signal_variance];
        if let Some(dalpha) = pg.log_alpha {
            grads.push(dalpha);
        }
        grads
    }
}

/// Records `gram(params, a, b)` on the tape. Gradients flow to the parameter
/// nodes and to the entries of `a` and `b`. Passing the same node for `a` and
/// `b` yields an exactly symmetric Gram with `sigma^2` on the diagonal, and
/// adjoints from both roles accumulate into that node.
pub fn gram_on_tape(
    tape: &mut Tape,
    nodes: &KernelParamNodes,
    a: NodeId,
    b: NodeId,
) -> NodeId {
    let params = kernel_params_from_nodes(tape, nodes);
    let value = gram(&params, tape.value(a), tape.value(b));
    let mut parents = vec![
        a,
        b,
        nodes.log_lengthscale,
        nodes.log_signal_variance,
    ];
    if let Some(alpha) = nodes.log_alpha {
        parents.push(alpha);
    }
    tape.opaque(
        parents,
        value,
        Box::new(GramVjp {
            family: nodes.family,
        }),
    )
}

/// Median-heuristic initial log-lengthscale: the log of the median pairwise
/// Euclidean distance over (a seeded subsample of) the rows, capped at
/// `max_rows` rows. Falls back to 0 (lengthscale 1) for degenerate inputs.
pub fn median_heuristic(rows: &Matrix, max_rows: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = rows.rows();
    if n < 2 {
        return 0.0;
    }
    let picked: Vec<usize> = if n > max_rows {
        rand::seq::index::sample(rng, n, max_rows).into_vec()
    } else {
        (0..n).collect()
    };
    let mut dists = Vec::with_capacity(picked.len() * (picked.len() - 1) / 2);
    for (ii, &i) in picked.iter().enumerate() {
        for &j in &picked[ii + 1..] {
            let d2: f64 = rows
                .row(i)
                .iter()
                .zip(rows.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let median = dists[dists.len() / 2];
    if median < 1e-12 {
        0.0
    } else {
        median.ln()
    }
}
