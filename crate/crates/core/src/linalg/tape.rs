//! Reverse-mode differentiation tape over matrix operations.
//!
//! A [`Tape`] records a computation as an append-only list of nodes; parents
//! always precede children, so the node list itself is a topological order.
//! Calling [`Tape::backward`] on a scalar loss walks the list once in reverse
//! and accumulates adjoints for every tracked node. Leaves are the trainable
//! inputs; constants participate in the forward pass but receive no adjoint
//! (and no work is spent computing one where it can be avoided).
//!
//! Recording is value-faithful: each node's primal value is produced by the
//! same [`Matrix`] kernels a tape-free computation would use, so enabling the
//! tape never perturbs forward numerics.
//!
//! Operations that are not part of the built-in set can be recorded through
//! [`Tape::opaque`] with a caller-supplied vector-Jacobian product, which is
//! how the kernel Gram assembly plugs in its analytic gradients without this
//! module knowing anything about kernels.

use super::chol::{factor_spd_escalating, CholeskyFactor};
use super::{LinalgError, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Custom vector-Jacobian product for an [`Tape::opaque`] node.
///
/// `vjp` receives the upstream adjoint, the node's own primal output, and the
/// primal values of all parents, and must return one gradient matrix per
/// parent, each with the parent's shape.
pub trait OpaqueVjp {
    fn name(&self) -> &'static str;
    fn vjp(&self, upstream: &Matrix, output: &Matrix, parents: &[&Matrix]) -> Vec<Matrix>;
}

enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    DivElem(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, f64),
    RowSlice {
        src: NodeId,
        start: usize,
    },
    CholSolve {
        a: NodeId,
        b: NodeId,
        factor: Box<CholeskyFactor>,
    },
    Opaque {
        parents: Vec<NodeId>,
        vjp: Box<dyn OpaqueVjp>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

/// Append-only computation record; single-owner during recording.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`NodeId`].
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of the loss with respect to the node, if any gradient reached
    /// it (tracked nodes on a path to the loss always have one).
    pub fn wrt(&self, id: NodeId) -> Option<&Matrix> {
        self.adj[id.0].as_ref()
    }

    /// Moves the adjoint out, leaving `None`.
    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.adj[id.0].take()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Primal value of a node.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, tracked });
        id
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Trainable input: receives an adjoint in `backward`.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable input: participates in the forward pass only.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// 1x1 constant.
    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMul(a, b), value, tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), value, tracked)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub(a, b), value, tracked)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).hadamard(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::MulElem(a, b), value, tracked)
    }

    pub fn div_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::DivElem(a, b), value, tracked)
    }

    /// Adds a 1xC row vector to every row of an RxC matrix.
    pub fn add_row_broadcast(&mut self, m: NodeId, row: NodeId) -> NodeId {
        let (mv, rv) = (self.value(m), self.value(row));
        assert_eq!(rv.rows(), 1, "broadcast row must be 1xC");
        assert_eq!(mv.cols(), rv.cols(), "broadcast width mismatch");
        let mut value = mv.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(rv.row(0)) {
                *v += b;
            }
        }
        let tracked = self.tracked(m) || self.tracked(row);
        self.push(Op::AddRowBroadcast(m, row), value, tracked)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let tracked = self.tracked(a);
        self.push(Op::Transpose(a), value, tracked)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let tracked = self.tracked(a);
        self.push(Op::Exp(a), value, tracked)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        let tracked = self.tracked(a);
        self.push(Op::Square(a), value, tracked)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        let tracked = self.tracked(a);
        self.push(Op::Relu(a), value, tracked)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(stable_sigmoid);
        let tracked = self.tracked(a);
        self.push(Op::Sigmoid(a), value, tracked)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        let tracked = self.tracked(a);
        self.push(Op::Tanh(a), value, tracked)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(Op::Sum(a), value, tracked)
    }

    /// Mean of all entries as a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(a).mean());
        let tracked = self.tracked(a);
        self.push(Op::Mean(a), value, tracked)
    }

    /// Multiplication by a compile-time-known scalar (not differentiated
    /// with respect to the scalar).
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        let tracked = self.tracked(a);
        self.push(Op::Scale(a, c), value, tracked)
    }

    /// Copy of rows `[start, start + len)`.
    pub fn row_slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.value(a).row_slice(start, len);
        let tracked = self.tracked(a);
        self.push(Op::RowSlice { src: a, start }, value, tracked)
    }

    /// Records `(A + jitter * mean(diag A) * I)^{-1} B`, escalating the jitter
    /// per the factorization schedule. The factor is cached on the tape so the
    /// backward pass reuses it.
    pub fn chol_solve(
        &mut self,
        a: NodeId,
        b: NodeId,
        jitter_rel: f64,
    ) -> Result<NodeId, LinalgError> {
        let factor = factor_spd_escalating(self.value(a), jitter_rel)?;
        let value = factor.solve(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Op::CholSolve {
                a,
                b,
                factor: Box::new(factor),
            },
            value,
            tracked,
        ))
    }

    /// Records a node with a caller-supplied vector-Jacobian product.
    pub fn opaque(
        &mut self,
        parents: Vec<NodeId>,
        value: Matrix,
        vjp: Box<dyn OpaqueVjp>,
    ) -> NodeId {
        let tracked = parents.iter().any(|&p| self.tracked(p));
        self.push(Op::Opaque { parents, vjp }, value, tracked)
    }

    /// Reverse pass from a scalar loss node. Visits every node at most once,
    /// in reverse insertion order, accumulating adjoints into the parents of
    /// each visited node. Returns the full adjoint table.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, LinalgError> {
        let loss_value = self.value(loss);
        if loss_value.shape() != (1, 1) {
            return Err(LinalgError::NotScalarLoss {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        let da = g.matmul_nt(self.value(*b));
                        accumulate(&mut adj, *a, da);
                    }
                    if self.tracked(*b) {
                        let db = self.value(*a).matmul_tn(&g);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g.scale(-1.0));
                    }
                }
                Op::MulElem(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.hadamard(self.value(*b)));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g.hadamard(self.value(*a)));
                    }
                }
                Op::DivElem(a, b) => {
                    let bv = self.value(*b);
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.zip_map(bv, |gv, y| gv / y));
                    }
                    if self.tracked(*b) {
                        // d(a/b)/db = -a/b^2 = -out/b.
                        let mut db = g.hadamard(&node.value);
                        db = db.zip_map(bv, |v, y| -v / y);
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::AddRowBroadcast(m, row) => {
                    if self.tracked(*m) {
                        accumulate(&mut adj, *m, g.clone());
                    }
                    if self.tracked(*row) {
                        accumulate(&mut adj, *row, g.col_sums());
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, g.transpose());
                }
                Op::Exp(a) => {
                    accumulate(&mut adj, *a, g.hadamard(&node.value));
                }
                Op::Square(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv);
                    accumulate(&mut adj, *a, da);
                }
                Op::Relu(a) => {
                    let da = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s));
                    accumulate(&mut adj, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip_map(&node.value, |gv, t| gv * (1.0 - t * t));
                    accumulate(&mut adj, *a, da);
                }
                Op::Sum(a) => {
                    let gv = g.scalar_value();
                    let src = self.value(*a);
                    accumulate(&mut adj, *a, Matrix::filled(src.rows(), src.cols(), gv));
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let gv = g.scalar_value() / src.len() as f64;
                    accumulate(&mut adj, *a, Matrix::filled(src.rows(), src.cols(), gv));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut adj, *a, g.scale(*c));
                }
                Op::RowSlice { src, start } => {
                    let full = self.value(*src);
                    let mut da = Matrix::zeros(full.rows(), full.cols());
                    for r in 0..g.rows() {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *src, da);
                }
                Op::CholSolve { a, b, factor } => {
                    // S = (A + eps(A) I)^{-1} B with eps(A) = jr * mean(diag A):
                    //   dB = (A + eps I)^{-1} g
                    //   dA = -dB S^T, symmetrized, plus the diagonal term from
                    //        eps depending on A through its mean diagonal.
                    let db = factor.solve(&g);
                    if self.tracked(*a) {
                        let raw = db.matmul_nt(&node.value).scale(-1.0);
                        let n = raw.rows();
                        let trace: f64 = (0..n).map(|i| raw.get(i, i)).sum();
                        let mut da = Matrix::from_fn(n, n, |i, j| {
                            0.5 * (raw.get(i, j) + raw.get(j, i))
                        });
                        let diag_term = factor.jitter_rel() * trace / n as f64;
                        for i in 0..n {
                            let v = da.get(i, i) + diag_term;
                            da.set(i, i, v);
                        }
                        accumulate(&mut adj, *a, da);
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, db);
                    }
                }
                Op::Opaque { parents, vjp } => {
                    let parent_values: Vec<&Matrix> =
                        parents.iter().map(|&p| self.value(p)).collect();
                    let grads = vjp.vjp(&g, &node.value, &parent_values);
                    assert_eq!(
                        grads.len(),
                        parents.len(),
                        "opaque `{}` returned {} gradients for {} parents",
                        vjp.name(),
                        grads.len(),
                        parents.len()
                    );
                    for (&p, dp) in parents.iter().zip(grads) {
                        if self.tracked(p) {
                            assert_eq!(
                                dp.shape(),
                                self.value(p).shape(),
                                "opaque `{}` gradient shape mismatch",
                                vjp.name()
                            );
                            accumulate(&mut adj, p, dp);
                        }
                    }
                }
            }
        }
        Ok(Gradients { adj })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Sigmoid evaluated without overflow for large negative inputs.
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let b = random_matrix(n, n, seed);
        let mut a = b.matmul_nt(&b);
        for i in 0..n {
            let v = a.get(i, i) + n as f64;
            a.set(i, i, v);
        }
        a
    }

    /// Central-difference check of all leaf gradients of `build`.
    ///
    /// `build` must construct the same scalar loss from the given leaves every
    /// time it is called. Relative error uses `max(1, |analytic|, |numeric|)`
    /// as the denominator.
    fn fd_check(inputs: &[Matrix], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId, tol: f64) {
        let eval = |xs: &[Matrix]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss).scalar_value()
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .wrt(ids[k])
                .unwrap_or_else(|| panic!("no gradient for input {k}"));
            for r in 0..input.rows() {
                for c in 0..input.cols() {
                    let mut plus = inputs.to_vec();
                    plus[k].set(r, c, input.get(r, c) + h);
                    let mut minus = inputs.to_vec();
                    minus[k].set(r, c, input.get(r, c) - h);
                    let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                    let a = analytic.get(r, c);
                    let denom = 1.0f64.max(a.abs()).max(numeric.abs());
                    assert!(
                        (a - numeric).abs() / denom <= tol,
                        "input {k} entry ({r},{c}): analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_matrix(1, 5, 1));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Matrix::filled(1, 5, 1.0));
    }

    #[test]
    fn squared_norm_gradient_is_two_x() {
        let mut tape = Tape::new();
        let xv = random_matrix(3, 2, 2);
        let x = tape.leaf(xv.clone());
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let expected = xv.scale(2.0);
        assert!(grads.wrt(x).unwrap().sub(&expected).max_abs() < 1e-14);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_matrix(2, 2, 3));
        assert!(matches!(
            tape.backward(x),
            Err(LinalgError::NotScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn elementwise_primitives_pass_finite_differences() {
        let x = random_matrix(3, 4, 10);
        let y = random_matrix(3, 4, 11);
        fd_check(&[x, y], |t, ids| {
            let a = t.mul_elem(ids[0], ids[1]);
            let b = t.tanh(a);
            let c = t.sigmoid(ids[0]);
            let d = t.add(b, c);
            let e = t.exp(ids[1]);
            let f = t.sub(d, e);
            let g = t.square(f);
            t.mean(g)
        }, 1e-6);
    }

    #[test]
    fn div_and_scale_pass_finite_differences() {
        // Keep the denominator away from zero.
        let x = random_matrix(2, 3, 12);
        let y = random_matrix(2, 3, 13).map(|v| v + 4.0);
        fd_check(&[x, y], |t, ids| {
            let d = t.div_elem(ids[0], ids[1]);
            let s = t.scale(d, -1.7);
            let sq = t.square(s);
            t.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn relu_passes_finite_differences_away_from_kinks() {
        let x = random_matrix(3, 3, 14).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        fd_check(&[x], |t, ids| {
            let r = t.relu(ids[0]);
            let s = t.square(r);
            t.sum(s)
        }, 1e-6);
    }

    #[test]
    fn matmul_transpose_broadcast_pass_finite_differences() {
        let a = random_matrix(3, 4, 15);
        let b = random_matrix(4, 2, 16);
        let row = random_matrix(1, 2, 17);
        fd_check(&[a, b, row], |t, ids| {
            let p = t.matmul(ids[0], ids[1]);
            let q = t.add_row_broadcast(p, ids[2]);
            let r = t.transpose(q);
            let s = t.square(r);
            t.mean(s)
        }, 1e-6);
    }

    #[test]
    fn row_slice_passes_finite_differences() {
        let x = random_matrix(5, 3, 18);
        fd_check(&[x], |t, ids| {
            let top = t.row_slice(ids[0], 1, 3);
            let sq = t.square(top);
            t.sum(sq)
        }, 1e-6);
    }

    #[test]
    fn chol_solve_quadratic_form_matches_finite_differences() {
        // loss = y^T S^{-1} y with S = (K + K^T) / 2, mirroring how every
        // in-graph system matrix comes from a symmetric producer. The
        // symmetrization keeps each entrywise probe a valid SPD input and
        // makes the entrywise slope match the symmetric A-adjoint.
        let k = random_spd(4, 20);
        let y = random_matrix(4, 1, 21);
        fd_check(&[k, y], |t, ids| {
            let kt = t.transpose(ids[0]);
            let twice = t.add(ids[0], kt);
            let sym = t.scale(twice, 0.5);
            let sol = t.chol_solve(sym, ids[1], 0.0).unwrap();
            let qf = t.mul_elem(ids[1], sol);
            t.sum(qf)
        }, 1e-6);
    }

    #[test]
    fn chol_solve_general_rhs_adjoints() {
        // For a general (non-symmetric-adjoint) loss the A-gradient is defined
        // on symmetric perturbations, so test it with paired entries.
        let a0 = random_spd(4, 22);
        let b0 = random_matrix(4, 2, 23);
        let w = random_matrix(4, 2, 24);

        let eval = |a: &Matrix, b: &Matrix| -> f64 {
            let mut tape = Tape::new();
            let an = tape.leaf(a.clone());
            let bn = tape.leaf(b.clone());
            let wn = tape.constant(w.clone());
            let sol = tape.chol_solve(an, bn, 0.0).unwrap();
            let weighted = tape.mul_elem(sol, wn);
            let loss = tape.sum(weighted);
            tape.value(loss).scalar_value()
        };

        let mut tape = Tape::new();
        let an = tape.leaf(a0.clone());
        let bn = tape.leaf(b0.clone());
        let wn = tape.constant(w.clone());
        let sol = tape.chol_solve(an, bn, 0.0).unwrap();
        let weighted = tape.mul_elem(sol, wn);
        let loss = tape.sum(weighted);
        let grads = tape.backward(loss).unwrap();
        let da = grads.wrt(an).unwrap();
        let db = grads.wrt(bn).unwrap();

        let h = 1e-5;
        // B-gradient: plain entrywise central differences.
        for r in 0..4 {
            for c in 0..2 {
                let mut plus = b0.clone();
                plus.set(r, c, b0.get(r, c) + h);
                let mut minus = b0.clone();
                minus.set(r, c, b0.get(r, c) - h);
                let numeric = (eval(&a0, &plus) - eval(&a0, &minus)) / (2.0 * h);
                let a = db.get(r, c);
                assert!((a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs()) <= 1e-6);
            }
        }
        // A-gradient: symmetric pair perturbations; the paired numeric slope
        // equals d/dA_ij + d/dA_ji = 2 * sym(dA)_ij.
        for i in 0..4 {
            for j in 0..4 {
                let mut plus = a0.clone();
                let mut minus = a0.clone();
                if i == j {
                    plus.set(i, i, a0.get(i, i) + h);
                    minus.set(i, i, a0.get(i, i) - h);
                } else {
                    plus.set(i, j, a0.get(i, j) + h);
                    plus.set(j, i, a0.get(j, i) + h);
                    minus.set(i, j, a0.get(i, j) - h);
                    minus.set(j, i, a0.get(j, i) - h);
                }
                let numeric = (eval(&plus, &b0) - eval(&minus, &b0)) / (2.0 * h);
                let analytic = if i == j {
                    da.get(i, i)
                } else {
                    2.0 * da.get(i, j)
                };
                assert!(
                    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
                        <= 1e-6,
                    "A entry ({i},{j}): analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn chol_solve_relative_jitter_gradient_includes_diagonal_term() {
        // With a large relative jitter the dependence of the shift on
        // mean(diag A) is a first-order effect; finite differences catch a
        // missing correction immediately.
        let k = random_spd(3, 25);
        let y = random_matrix(3, 1, 26);
        fd_check(&[k, y], |t, ids| {
            let kt = t.transpose(ids[0]);
            let twice = t.add(ids[0], kt);
            let sym = t.scale(twice, 0.5);
            let sol = t.chol_solve(sym, ids[1], 1e-2).unwrap();
            let qf = t.mul_elem(ids[1], sol);
            t.sum(qf)
        }, 1e-6);
    }

    #[test]
    fn gradient_accumulation_is_order_independent() {
        let x = random_matrix(2, 2, 30);
        let y = random_matrix(2, 2, 31);
        let z = random_matrix(2, 2, 32);

        let run = |order: [usize; 3]| -> Vec<Matrix> {
            let mut tape = Tape::new();
            let ids = [
                tape.leaf(x.clone()),
                tape.leaf(y.clone()),
                tape.leaf(z.clone()),
            ];
            let mut terms = Vec::new();
            for &i in &order {
                let sq = tape.square(ids[i]);
                terms.push(tape.sum(sq));
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = tape.add(total, t);
            }
            let grads = tape.backward(total).unwrap();
            ids.iter().map(|&id| grads.wrt(id).unwrap().clone()).collect()
        };

        let g1 = run([0, 1, 2]);
        let g2 = run([2, 0, 1]);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.sub(b).max_abs() <= 1e-12);
        }
    }

    #[test]
    fn recording_does_not_perturb_forward_values() {
        // The same computation through the tape and through direct matrix
        // calls must agree bit for bit.
        let a = random_matrix(4, 3, 40);
        let b = random_matrix(3, 5, 41);
        let row = random_matrix(1, 5, 42);

        let mut tape = Tape::new();
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let rn = tape.constant(row.clone());
        let p = tape.matmul(an, bn);
        let q = tape.add_row_broadcast(p, rn);
        let s = tape.tanh(q);
        let m = tape.mean(s);

        let direct = {
            let p = a.matmul(&b);
            let mut q = p.clone();
            for r in 0..q.rows() {
                for (v, add) in q.row_mut(r).iter_mut().zip(row.row(0)) {
                    *v += add;
                }
            }
            let s = q.map(f64::tanh);
            s.mean()
        };
        assert_eq!(tape.value(m).scalar_value(), direct);
        assert_eq!(tape.value(s).data(), {
            let p = a.matmul(&b);
            let mut q = p;
            for r in 0..q.rows() {
                for (v, add) in q.row_mut(r).iter_mut().zip(row.row(0)) {
                    *v += add;
                }
            }
            q.map(f64::tanh)
        }
        .data());
    }

    struct CubeVjp;

    impl OpaqueVjp for CubeVjp {
        fn name(&self) -> &'static str {
            "cube"
        }

        fn vjp(&self, upstream: &Matrix, _output: &Matrix, parents: &[&Matrix]) -> Vec<Matrix> {
            vec![upstream.zip_map(parents[0], |g, x| g * 3.0 * x * x)]
        }
    }

    #[test]
    fn opaque_vjp_passes_finite_differences() {
        let x = random_matrix(3, 2, 50);
        fd_check(&[x], |t, ids| {
            let v = t.value(ids[0]).map(|v| v * v * v);
            let cubed = t.opaque(vec![ids[0]], v, Box::new(CubeVjp));
            t.sum(cubed)
        }, 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_matrix(2, 2, 60));
        let c = tape.constant(random_matrix(2, 2, 61));
        let p = tape.mul_elem(x, c);
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(x).is_some());
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_matrix(2, 2, 70));
        let s = tape.square(x);
        let loss = tape.sum(s);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.wrt(x).unwrap(), g2.wrt(x).unwrap());
    }
}
