//! Learned-kernel interpolating forecaster.
//!
//! Prediction is kernel ridge interpolation: given a support set `(X, Y)`,
//! a query batch `Q` is predicted as `K(Q, X) (K(X, X) + eps I)^{-1} Y`.
//! Training never fits weights — it adapts the kernel's log-parameters so
//! that interpolation generalizes, by minimizing how much *worse* half of a
//! random batch explains the batch than the batch explains itself:
//!
//! `rho = 1 - (Yc' Kcc^{-1} Yc) / (Yb' Kbb^{-1} Yb)`
//!
//! where `(Xb, Yb)` is a shuffled minibatch, `(Xc, Yc)` its first half, and
//! the quadratic forms are summed over target columns. A kernel under which
//! the half-batch interpolant already explains the full batch drives `rho`
//! toward zero; `rho` lives in `[0, 1]` up to rounding because the half-batch
//! quadratic form can never exceed the full-batch one under a shared jitter.
//! The squared-error variant replaces the ratio with the literal
//! reconstruction error of the held-out half.

use crate::data::{shuffled_batches, DataError, Split, WindowedDataset};
use crate::kernels::{
    gram, gram_on_tape, median_heuristic, push_kernel_params, KernelParamNodes, KernelParams,
};
use crate::linalg::{factor_spd_escalating, LinalgError, Matrix, NodeId, Tape, DEFAULT_JITTER_REL};
use crate::nn::{Optimizer, OptimizerKind};
use crate::record::{evaluate_predictions, EpochRecord, LossDecomposition, MetricSpace};
use crate::rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;
use thiserror::Error;

/// A batch whose support quadratic form falls at or below this value carries
/// no signal to normalize by; the loss is rejected rather than divided.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

/// Largest support set a trained model keeps; larger training splits are
/// subsampled with a seeded draw.
pub const DEFAULT_SUPPORT_CAP: usize = 2048;

/// Default step size for kernel parameter training.
pub const DEFAULT_KF_LEARNING_RATE: f64 = 1e-2;

/// Query rows interpolated per factorization reuse block.
const PREDICT_CHUNK: usize = 1024;

/// Errors from interpolation and kernel training.
#[derive(Debug, Error)]
pub enum KernelFlowError {
    /// The full-batch quadratic form is too small to normalize by.
    #[error(
        "degenerate batch: support quadratic form {denominator:.3e} is at or below \
         {DEGENERATE_DENOMINATOR:.0e}"
    )]
    DegenerateBatch { denominator: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid kernel training configuration: {reason}")]
    InvalidConfig { reason: String },
}

/// Which training objective adapts the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KfLossKind {
    /// The interpolation-degradation ratio `rho`.
    Rho,
    /// Squared reconstruction error of the held-out half-batch.
    L2,
}

/// Interpolates `queries` from a support set in one shot.
///
/// The support gram matrix is regularized with `jitter_rel` (relative to its
/// mean diagonal, escalating tenfold on factorization failure), so support
/// points are reproduced up to a deviation on the order of the jitter.
pub fn interpolate(
    params: &KernelParams,
    support_x: &Matrix,
    support_y: &Matrix,
    queries: &Matrix,
    jitter_rel: f64,
) -> Result<Matrix, LinalgError> {
    let k_ss = gram(params, support_x, support_x);
    let factor = factor_spd_escalating(&k_ss, jitter_rel)?;
    let alpha = factor.solve(support_y);
    let k_qs = gram(params, queries, support_x);
    Ok(k_qs.matmul(&alpha))
}

/// Records the `rho` loss on a tape. `xb`/`yb` are a full batch, `xc`/`yc`
/// the retained half; only the kernel parameter nodes need to be trainable.
///
/// Both gram solves share the jitter at which the full-batch gram actually
/// factored (probed up front), which is what keeps `rho` nonnegative: under a
/// common ridge the half-batch quadratic form is a Schur complement bound of
/// the full one.
pub fn rho_loss_on_tape(
    tape: &mut Tape,
    nodes: &KernelParamNodes,
    xb: NodeId,
    yb: NodeId,
    xc: NodeId,
    yc: NodeId,
    jitter_rel: f64,
) -> Result<NodeId, KernelFlowError> {
    let kbb = gram_on_tape(tape, nodes, xb, xb);
    let probe = factor_spd_escalating(tape.value(kbb), jitter_rel)?;
    let shared_jitter = probe.jitter_rel();

    let solve_b = tape.chol_solve(kbb, yb, shared_jitter)?;
    let prod_b = tape.mul_elem(yb, solve_b);
    let qf_b = tape.sum(prod_b);
    let denominator = tape.value(qf_b).scalar_value();
    if denominator <= DEGENERATE_DENOMINATOR {
        return Err(KernelFlowError::DegenerateBatch { denominator });
    }

    let kcc = gram_on_tape(tape, nodes, xc, xc);
    let solve_c = tape.chol_solve(kcc, yc, shared_jitter)?;
    let prod_c = tape.mul_elem(yc, solve_c);
    let qf_c = tape.sum(prod_c);

    let ratio = tape.div_elem(qf_c, qf_b);
    let one = tape.constant_scalar(1.0);
    Ok(tape.sub(one, ratio))
}

/// Records the squared-error variant on a tape: the held-out half `(Xc, Yc)`
/// is predicted by interpolation from the full batch `(Xb, Yb)` and the
/// squared residual is averaged over the half's rows.
pub fn l2_kf_loss_on_tape(
    tape: &mut Tape,
    nodes: &KernelParamNodes,
    xb: NodeId,
    yb: NodeId,
    xc: NodeId,
    yc: NodeId,
    jitter_rel: f64,
) -> Result<NodeId, KernelFlowError> {
    let kbb = gram_on_tape(tape, nodes, xb, xb);
    let kcb = gram_on_tape(tape, nodes, xc, xb);
    let alpha = tape.chol_solve(kbb, yb, jitter_rel)?;
    let pred = tape.matmul(kcb, alpha);
    let resid = tape.sub(yc, pred);
    let sq = tape.square(resid);
    let total = tape.sum(sq);
    let rows = tape.value(yc).rows();
    Ok(tape.scale(total, 1.0 / rows as f64))
}

fn loss_values(
    kind: KfLossKind,
    params: &KernelParams,
    xb: &Matrix,
    yb: &Matrix,
    xc: &Matrix,
    yc: &Matrix,
    jitter_rel: f64,
) -> Result<f64, KernelFlowError> {
    let mut tape = Tape::new();
    let nodes = push_kernel_params(&mut tape, params);
    let xb = tape.constant(xb.clone());
    let yb = tape.constant(yb.clone());
    let xc = tape.constant(xc.clone());
    let yc = tape.constant(yc.clone());
    let loss = match kind {
        KfLossKind::Rho => rho_loss_on_tape(&mut tape, &nodes, xb, yb, xc, yc, jitter_rel)?,
        KfLossKind::L2 => l2_kf_loss_on_tape(&mut tape, &nodes, xb, yb, xc, yc, jitter_rel)?,
    };
    Ok(tape.value(loss).scalar_value())
}

/// Plain-value `rho` loss; see [`rho_loss_on_tape`].
pub fn rho_loss(
    params: &KernelParams,
    xb: &Matrix,
    yb: &Matrix,
    xc: &Matrix,
    yc: &Matrix,
    jitter_rel: f64,
) -> Result<f64, KernelFlowError> {
    loss_values(KfLossKind::Rho, params, xb, yb, xc, yc, jitter_rel)
}

/// Plain-value squared-error variant; see [`l2_kf_loss_on_tape`].
pub fn l2_kf_loss(
    params: &KernelParams,
    xb: &Matrix,
    yb: &Matrix,
    xc: &Matrix,
    yc: &Matrix,
    jitter_rel: f64,
) -> Result<f64, KernelFlowError> {
    loss_values(KfLossKind::L2, params, xb, yb, xc, yc, jitter_rel)
}

/// A trained (or directly constructed) interpolating forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFlowModel {
    pub params: KernelParams,
    pub support_x: Matrix,
    pub support_y: Matrix,
    pub jitter_rel: f64,
}

impl KernelFlowModel {
    /// Builds a model over a support set. Bitwise-duplicate support rows are
    /// collapsed to one row whose target is the mean of the duplicates' —
    /// exact duplicates would otherwise make the gram matrix singular without
    /// adding information.
    pub fn from_support(
        params: KernelParams,
        inputs: &Matrix,
        targets: &Matrix,
        jitter_rel: f64,
    ) -> Self {
        assert_eq!(inputs.rows(), targets.rows());
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut order: Vec<usize> = Vec::new();
        let mut sums: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for r in 0..inputs.rows() {
            let key: Vec<u64> = inputs.row(r).iter().map(|v| v.to_bits()).collect();
            match seen.get(&key) {
                Some(&slot) => {
                    for (acc, v) in sums[slot].iter_mut().zip(targets.row(r)) {
                        *acc += v;
                    }
                    counts[slot] += 1;
                }
                None => {
                    let slot = order.len();
                    seen.insert(key, slot);
                    order.push(r);
                    sums.push(targets.row(r).to_vec());
                    counts.push(1);
                }
            }
        }
        let support_x = inputs.gather_rows(&order);
        let support_y = Matrix::from_fn(order.len(), targets.cols(), |r, c| {
            sums[r][c] / counts[r] as f64
        });
        KernelFlowModel {
            params,
            support_x,
            support_y,
            jitter_rel,
        }
    }

    pub fn support_len(&self) -> usize {
        self.support_x.rows()
    }

    /// Predicts all query rows, factoring the support gram matrix once and
    /// streaming the queries through in chunks.
    pub fn predict(&self, queries: &Matrix) -> Result<Matrix, LinalgError> {
        assert_eq!(queries.cols(), self.support_x.cols());
        let k_ss = gram(&self.params, &self.support_x, &self.support_x);
        let factor = factor_spd_escalating(&k_ss, self.jitter_rel)?;
        let alpha = factor.solve(&self.support_y);
        let mut out = Matrix::zeros(queries.rows(), self.support_y.cols());
        let mut start = 0;
        while start < queries.rows() {
            let len = PREDICT_CHUNK.min(queries.rows() - start);
            let chunk = queries.row_slice(start, len);
            let k_qs = gram(&self.params, &chunk, &self.support_x);
            let pred = k_qs.matmul(&alpha);
            for r in 0..len {
                out.row_mut(start + r).copy_from_slice(pred.row(r));
            }
            start += len;
        }
        Ok(out)
    }
}

/// Configuration of a kernel training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFlowConfig {
    pub epochs: usize,
    /// Minibatch size; must be even and at least 2.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub loss: KfLossKind,
    pub jitter_rel: f64,
    pub support_cap: usize,
    /// Stop after this many epochs without validation improvement; `None`
    /// runs all epochs.
    pub patience: Option<usize>,
    /// Improvement below this does not reset patience.
    pub min_delta: f64,
    /// Load the best-validation parameters back at the end; without a
    /// validation split the final parameters are always the last ones.
    pub restore_best: bool,
    pub metric_space: MetricSpace,
    pub seed: u64,
}

impl Default for KernelFlowConfig {
    fn default() -> Self {
        KernelFlowConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::adam(DEFAULT_KF_LEARNING_RATE),
            loss: KfLossKind::Rho,
            jitter_rel: DEFAULT_JITTER_REL,
            support_cap: DEFAULT_SUPPORT_CAP,
            patience: None,
            min_delta: 0.0,
            restore_best: true,
            metric_space: MetricSpace::Raw,
            seed: 0,
        }
    }
}

/// A finished training run.
#[derive(Debug)]
pub struct KernelFlowTraining {
    pub model: KernelFlowModel,
    pub records: Vec<EpochRecord>,
    /// Diagnostics for aborted epochs and evaluation hiccups, in order.
    pub warnings: Vec<String>,
}

/// Seeded subsample of the training split used as the support set, sorted to
/// keep chronological order. The whole split when it fits under the cap.
fn support_rows(dataset: &WindowedDataset, cap: usize, seed: u64) -> Vec<usize> {
    let train: Vec<usize> = dataset.train_rows().collect();
    if train.len() <= cap {
        return train;
    }
    let mut stream = rng::stream(seed, "support", 0);
    let mut picked = rand::seq::index::sample(&mut stream, train.len(), cap).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| train[i]).collect()
}

/// Trains kernel parameters on the dataset's training split by minibatch
/// descent on the chosen loss.
///
/// Each epoch reshuffles the training windows with a seed derived from
/// (`seed`, epoch), pairs every batch with its leading half, and applies one
/// optimizer step per batch. A batch whose loss or gradient fails numerically
/// (degenerate denominator, factorization failure past the jitter ceiling,
/// non-finite gradient) aborts the remainder of its epoch with a recorded
/// diagnostic; training continues at the next epoch. Validation and test
/// metrics are evaluated every epoch by interpolating from the (capped)
/// training support under the current parameters, and the best-validation
/// parameters are kept as a checkpoint.
pub fn train(
    dataset: &WindowedDataset,
    initial: Option<KernelParams>,
    config: &KernelFlowConfig,
) -> Result<KernelFlowTraining, KernelFlowError> {
    let dim = dataset.input_dim();
    let train_rows: Vec<usize> = dataset.train_rows().collect();
    if train_rows.is_empty() {
        return Err(KernelFlowError::InvalidConfig {
            reason: "training split is empty".into(),
        });
    }
    if config.batch_size < 2 || config.batch_size % 2 != 0 {
        return Err(KernelFlowError::InvalidConfig {
            reason: format!(
                "batch size {} must be even and at least 2",
                config.batch_size
            ),
        });
    }

    let mut params = match initial {
        Some(p) => p,
        None => {
            let train_inputs = dataset.inputs.gather_rows(&train_rows);
            let mut stream = rng::stream(config.seed, "kernel-init", 0);
            let log_ell = median_heuristic(&train_inputs, 4096, &mut stream);
            KernelParams::rbf(log_ell, 0.0)
        }
    };
    params
        .validate(dim)
        .map_err(|reason| KernelFlowError::InvalidConfig { reason })?;

    let support = support_rows(dataset, config.support_cap, config.seed);
    let support_x = dataset.inputs.gather_rows(&support);
    let support_y = dataset.targets.gather_rows(&support);

    let has_validation = dataset.validation_rows().len() > 0;
    let val_rows: Vec<usize> = dataset.validation_rows().collect();
    let test_rows: Vec<usize> = dataset.test_rows().collect();
    let val_inputs = dataset.inputs.gather_rows(&val_rows);
    let test_inputs = dataset.inputs.gather_rows(&test_rows);

    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut records = Vec::with_capacity(config.epochs);
    let mut warnings = Vec::new();
    let mut best: Option<(f64, KernelParams, usize)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let epoch_seed = rng::epoch_seed(config.seed, epoch);
        let batches = shuffled_batches(dataset, Split::Train, config.batch_size, epoch_seed)?;

        let mut batch_losses = Vec::with_capacity(batches.len());
        for batch in &batches {
            let half = batch.len() / 2;
            let xb = dataset.inputs.gather_rows(batch);
            let yb = dataset.targets.gather_rows(batch);
            let xc = dataset.inputs.gather_rows(&batch[..half]);
            let yc = dataset.targets.gather_rows(&batch[..half]);

            let mut tape = Tape::new();
            let nodes = push_kernel_params(&mut tape, &params);
            let xb_n = tape.constant(xb);
            let yb_n = tape.constant(yb);
            let xc_n = tape.constant(xc);
            let yc_n = tape.constant(yc);
            let loss = match config.loss {
                KfLossKind::Rho => {
                    rho_loss_on_tape(&mut tape, &nodes, xb_n, yb_n, xc_n, yc_n, config.jitter_rel)
                }
                KfLossKind::L2 => l2_kf_loss_on_tape(
                    &mut tape,
                    &nodes,
                    xb_n,
                    yb_n,
                    xc_n,
                    yc_n,
                    config.jitter_rel,
                ),
            };
            let loss = match loss {
                Ok(l) => l,
                Err(err) => {
                    warnings.push(format!("epoch {epoch}: aborted: {err}"));
                    break;
                }
            };

            let mut grads = match tape.backward(loss) {
                Ok(g) => g,
                Err(err) => {
                    warnings.push(format!("epoch {epoch}: aborted in backward pass: {err}"));
                    break;
                }
            };
            let mut node_list = vec![nodes.log_lengthscale, nodes.log_signal_variance];
            if let Some(alpha) = nodes.log_alpha {
                node_list.push(alpha);
            }
            let grad_list: Vec<Matrix> = node_list
                .iter()
                .zip(params_list(&mut params).iter())
                .map(|(n, p)| {
                    grads
                        .take(*n)
                        .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()))
                })
                .collect();
            if grad_list.iter().any(|g| !g.all_finite()) {
                warnings.push(format!(
                    "epoch {epoch}: aborted: non-finite kernel parameter gradient"
                ));
                break;
            }
            optimizer.step(params_list(&mut params).as_mut_slice(), &grad_list);
            batch_losses.push(tape.value(loss).scalar_value());
        }

        let mean_loss = if batch_losses.is_empty() {
            f64::NAN
        } else {
            batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
        };

        let mut eval_split = |inputs: &Matrix, split: Split| {
            if inputs.rows() == 0 {
                return None;
            }
            match interpolate(&params, &support_x, &support_y, inputs, config.jitter_rel) {
                Ok(preds) => Some(evaluate_predictions(
                    dataset,
                    split,
                    &preds,
                    config.metric_space,
                )),
                Err(err) => {
                    warnings.push(format!("epoch {epoch}: {split:?} evaluation failed: {err}"));
                    None
                }
            }
        };
        let validation = eval_split(&val_inputs, Split::Validation);
        let test = eval_split(&test_inputs, Split::Test);

        if let Some(v) = &validation {
            let improved = match &best {
                None => true,
                Some((b, _, _)) => v.rmse < b - config.min_delta,
            };
            if improved {
                best = Some((v.rmse, params.clone(), epoch));
            }
        }

        records.push(EpochRecord {
            epoch,
            train_loss: LossDecomposition::plain(mean_loss),
            validation,
            test,
            wall_clock_s: started.elapsed().as_secs_f64(),
            rng_digest: rng::rng_digest(&ChaCha8Rng::seed_from_u64(epoch_seed)),
        });

        if let (Some(patience), Some((_, _, best_epoch))) = (config.patience, &best) {
            if epoch - best_epoch > patience {
                break;
            }
        }
    }

    if config.restore_best && has_validation {
        if let Some((_, best_params, _)) = best {
            params = best_params;
        }
    }

    let model = KernelFlowModel::from_support(params, &support_x, &support_y, config.jitter_rel);
    Ok(KernelFlowTraining {
        model,
        records,
        warnings,
    })
}

/// The optimizer-facing view of kernel parameters, in a fixed order.
fn params_list(params: &mut KernelParams) -> Vec<&mut Matrix> {
    let mut list = vec![&mut params.log_lengthscale, &mut params.log_signal_variance];
    if let Some(alpha) = params.log_alpha.as_mut() {
        list.push(alpha);
    }
    list
}
