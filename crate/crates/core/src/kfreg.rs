//! Kernel regularization of the LSTM regressor.
//!
//! The regularizer turns the kernel interpolation machinery into a penalty
//! on hidden activations. For a training batch, the tapped activations of an
//! attached LSTM layer form a point cloud `x`; with `x_c` its first half,
//! the layer ([`kf_layer_on_tape`]) produces the interpolation operator
//!
//! ```text
//! z = K(x, x_c) · K(x_c, x_c)^{-1}
//! ```
//!
//! so `z · y_c` is what kernel interpolation from the half batch predicts for
//! the whole batch. The combined objective ([`combined_loss`],
//! [`objective_on_tape`]) adds the squared reconstruction gap to the usual
//! prediction error,
//!
//! ```text
//! total = mean((y − ŷ)²) + Σ_i λ_i · mean((y − z_i · y_c)²),
//! ```
//!
//! which pushes the network toward activations whose geometry lets half a
//! batch explain the rest — the same objective the standalone forecaster
//! minimizes, applied to learned representations instead of raw windows.
//! Gradients flow through `z` into both the per-layer kernel parameters and,
//! via the activations, the network weights; [`train_regularized`] optimizes
//! all of them jointly with one optimizer step per batch.
//!
//! Two properties worth knowing:
//!
//! * `z` is exactly invariant to the kernel's signal variance (the scale
//!   cancels between the cross-gram and the factored gram, including the
//!   relative jitter), so only the lengthscale meaningfully trains.
//! * A zero penalty weight disables its attachment entirely — no kernel
//!   nodes, no extra randomness, no optimizer slots — so a `[0.0]` run is
//!   bit-identical to an unregularized one under the same seeds.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{shuffled_batches, DataError, Split, WindowedDataset};
use crate::kernels::{
    gram_on_tape, median_heuristic, push_kernel_params, KernelParamNodes, KernelParams,
};
use crate::linalg::{LinalgError, Matrix, NodeId, Tape};
use crate::nn::{
    backward_and_step, forward, forward_on_tape, he_normal_init, Mode, NetworkParams, NetworkSpec,
    NnError, Optimizer, OptimizerKind, ParamBindings, TapeParams, DEFAULT_CLIP_NORM,
};
use crate::record::{evaluate_predictions, EpochRecord, LossDecomposition, MetricSpace};
use crate::rng;

/// Relative jitter for the half-batch gram solve inside the layer. Batches of
/// near-duplicate activations escalate from this floor on their own; starting
/// this low keeps the first-half rows of `z` within 1e-8 of the identity on
/// healthy batches.
pub const KF_LAYER_JITTER_REL: f64 = 1e-10;

/// Default Adam learning rate for network training.
pub const DEFAULT_NN_LEARNING_RATE: f64 = 1e-3;

/// Evaluation forward passes run over row chunks of this size to bound the
/// scratch tape's memory.
const EVAL_CHUNK: usize = 256;

/// Errors from regularized training.
#[derive(Debug, Error)]
pub enum KfRegError {
    /// The configuration or its fit to the dataset is unusable.
    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },
    /// Operands passed to a loss do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NnError),
}

/// Trainable state of the regularizer: one kernel per attached LSTM layer,
/// the penalty weights, and the solve jitter shared by all attachments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KfLayerState {
    /// Kernel parameters per attached layer, in layer order; trained jointly
    /// with the network weights.
    pub gammas: Vec<KernelParams>,
    /// Penalty weights aligned with `gammas`. A zero weight makes its
    /// attachment completely inert.
    pub lambdas: Vec<f64>,
    /// Relative jitter for the half-batch solve.
    pub jitter_rel: f64,
}

impl KfLayerState {
    /// Initial state for a network spec: weights copied from the spec, unit
    /// kernels as placeholders until [`KfLayerState::init_gammas`] sees
    /// activations.
    pub fn from_spec(spec: &NetworkSpec, jitter_rel: f64) -> Self {
        KfLayerState {
            gammas: spec
                .kf_weights
                .iter()
                .map(|_| KernelParams::rbf(0.0, 0.0))
                .collect(),
            lambdas: spec.kf_weights.clone(),
            jitter_rel,
        }
    }

    /// Attachment slots whose weight is nonzero, in order.
    pub fn active_slots(&self) -> Vec<usize> {
        self.lambdas
            .iter()
            .enumerate()
            .filter(|(_, l)| **l > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sets each active kernel's lengthscale to the median pairwise distance
    /// of that attachment's tapped activations (the last tap when a layer
    /// yields several). Inactive slots keep their placeholders.
    pub fn init_gammas(&mut self, taps: &[Vec<Matrix>], seed: u64) {
        for slot in self.active_slots() {
            let tap = taps[slot]
                .last()
                .expect("an attached layer yields at least one tap");
            let mut stream = rng::stream(seed, "gamma-init", slot as u64);
            let log_ell = median_heuristic(tap, 4096, &mut stream);
            self.gammas[slot] = KernelParams::rbf(log_ell, 0.0);
        }
    }
}

/// Records the regularization layer on the tape: with `x_c` the first
/// `⌊b/2⌋` rows of the `b`-row activation batch `x`,
/// `z = K(x, x_c) · K(x_c, x_c)^{-1}`, realized as a Cholesky solve plus a
/// transpose so gradients reach both the kernel parameters and `x`.
///
/// At the default jitter the first `⌊b/2⌋` rows of `z` reproduce the
/// identity to high accuracy whenever the half batch is well separated.
pub fn kf_layer_on_tape(
    tape: &mut Tape,
    gamma: &KernelParamNodes,
    x: NodeId,
    jitter_rel: f64,
) -> Result<NodeId, LinalgError> {
    let b = tape.value(x).rows();
    assert!(b >= 2, "regularization layer needs at least two rows, got {b}");
    let half = b / 2;
    let xc = tape.row_slice(x, 0, half);
    let k_cf = gram_on_tape(tape, gamma, xc, x);
    let k_cc = gram_on_tape(tape, gamma, xc, xc);
    let solved = tape.chol_solve(k_cc, k_cf, jitter_rel)?;
    Ok(tape.transpose(solved))
}

/// [`kf_layer_on_tape`] as a plain computation on values.
pub fn kf_layer(gamma: &KernelParams, x: &Matrix, jitter_rel: f64) -> Result<Matrix, LinalgError> {
    let mut tape = Tape::new();
    let nodes = push_kernel_params(&mut tape, gamma);
    let xn = tape.constant(x.clone());
    let z = kf_layer_on_tape(&mut tape, &nodes, xn, jitter_rel)?;
    Ok(tape.value(z).clone())
}

fn mean_square(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>() / m.len() as f64
}

/// Combined objective on plain values: prediction error plus weighted kernel
/// reconstruction penalties,
/// `mean((y − ŷ)²) + Σ_i λ_i · mean((y − z_i · y_c_i)²)`.
///
/// Returns the total and its decomposition; zero-weight terms are dropped
/// from both. Monotone non-decreasing in every weight, and exactly the plain
/// squared error when all weights vanish.
pub fn combined_loss(
    predictions: &Matrix,
    targets: &Matrix,
    kf_terms: &[(Matrix, Matrix)],
    lambdas: &[f64],
) -> Result<(f64, LossDecomposition), KfRegError> {
    if predictions.shape() != targets.shape() {
        return Err(KfRegError::ShapeMismatch {
            context: "predictions",
            expected: format!("{:?}", targets.shape()),
            got: format!("{:?}", predictions.shape()),
        });
    }
    if kf_terms.len() != lambdas.len() {
        return Err(KfRegError::ShapeMismatch {
            context: "penalty weights",
            expected: format!("{} weights", kf_terms.len()),
            got: format!("{} weights", lambdas.len()),
        });
    }
    for (z, y_c) in kf_terms {
        if z.rows() != targets.rows() || z.cols() != y_c.rows() || y_c.cols() != targets.cols() {
            return Err(KfRegError::ShapeMismatch {
                context: "reconstruction term",
                expected: format!("z {}x{}, y_c {}x{}", targets.rows(), y_c.rows(), y_c.rows(), targets.cols()),
                got: format!("z {}x{}, y_c {}x{}", z.rows(), z.cols(), y_c.rows(), y_c.cols()),
            });
        }
    }

    let mse = mean_square(&predictions.sub(targets));
    let mut weighted = Vec::new();
    for ((z, y_c), lambda) in kf_terms.iter().zip(lambdas) {
        if *lambda == 0.0 {
            continue;
        }
        let recon = z.matmul(y_c);
        weighted.push(lambda * mean_square(&targets.sub(&recon)));
    }
    let decomposition = if weighted.is_empty() {
        LossDecomposition::plain(mse)
    } else {
        LossDecomposition::with_terms(mse, weighted)
    };
    Ok((decomposition.total, decomposition))
}

/// A batch objective recorded on a tape.
pub struct Objective {
    /// Scalar loss node to run backward from.
    pub total: NodeId,
    /// Value decomposition of the loss (weighted penalty per active slot).
    pub decomposition: LossDecomposition,
    /// `(attachment slot, parameter nodes)` for every active attachment, in
    /// slot order — present even when the penalty was skipped, so gradient
    /// bindings keep a constant shape across batches.
    pub gamma_nodes: Vec<(usize, KernelParamNodes)>,
    /// Set when a factorization failure made this batch fall back to plain
    /// prediction error.
    pub kf_warning: Option<String>,
}

/// Records the full regularized objective for one batch: a forward pass, the
/// squared prediction error, and one averaged reconstruction penalty per
/// active attachment. `y_c` is the first `⌊b/2⌋` rows of the batch targets,
/// matching the layer's half split. With `compare_predictions` the penalties
/// measure the gap to the network's predictions instead of the targets (a
/// non-default variant of the objective).
///
/// A factorization failure anywhere in the penalties degrades the batch to
/// prediction error only and reports the failure in
/// [`Objective::kf_warning`].
#[allow(clippy::too_many_arguments)]
pub fn objective_on_tape(
    tape: &mut Tape,
    spec: &NetworkSpec,
    net_nodes: &TapeParams,
    kf: &KfLayerState,
    inputs: &Matrix,
    targets: &Matrix,
    mode: Mode,
    rng: Option<&mut ChaCha8Rng>,
    compare_predictions: bool,
) -> Objective {
    let pass = forward_on_tape(tape, spec, net_nodes, inputs, mode, rng);
    let target_node = tape.constant(targets.clone());
    let diff = tape.sub(pass.prediction, target_node);
    let sq = tape.square(diff);
    let mse = tape.mean(sq);
    let mse_value = tape.value(mse).scalar_value();

    let active = kf.active_slots();
    let gamma_nodes: Vec<(usize, KernelParamNodes)> = active
        .iter()
        .map(|&slot| (slot, push_kernel_params(tape, &kf.gammas[slot])))
        .collect();
    if active.is_empty() {
        return Objective {
            total: mse,
            decomposition: LossDecomposition::plain(mse_value),
            gamma_nodes,
            kf_warning: None,
        };
    }

    let half = targets.rows() / 2;
    let y_c = tape.constant(targets.row_slice(0, half));
    let compare = if compare_predictions {
        pass.prediction
    } else {
        target_node
    };

    match penalties_on_tape(tape, &pass.taps, &gamma_nodes, kf, y_c, compare, mse) {
        Ok((total, weighted)) => Objective {
            total,
            decomposition: LossDecomposition::with_terms(mse_value, weighted),
            gamma_nodes,
            kf_warning: None,
        },
        Err(err) => Objective {
            total: mse,
            decomposition: LossDecomposition::plain(mse_value),
            gamma_nodes,
            kf_warning: Some(err.to_string()),
        },
    }
}

/// Adds one weighted reconstruction penalty per active attachment onto
/// `mse`, averaging over a layer's taps when it yields several. Returns the
/// total node and the weighted penalty values.
fn penalties_on_tape(
    tape: &mut Tape,
    taps: &[Vec<NodeId>],
    gamma_nodes: &[(usize, KernelParamNodes)],
    kf: &KfLayerState,
    y_c: NodeId,
    compare: NodeId,
    mse: NodeId,
) -> Result<(NodeId, Vec<f64>), LinalgError> {
    let mut total = mse;
    let mut weighted_values = Vec::with_capacity(gamma_nodes.len());
    for (slot, gamma) in gamma_nodes {
        let mut term: Option<NodeId> = None;
        for &tap in &taps[*slot] {
            let z = kf_layer_on_tape(tape, gamma, tap, kf.jitter_rel)?;
            let recon = tape.matmul(z, y_c);
            let gap = tape.sub(compare, recon);
            let gap_sq = tape.square(gap);
            let m = tape.mean(gap_sq);
            term = Some(match term {
                None => m,
                Some(prev) => tape.add(prev, m),
            });
        }
        let mut term = term.expect("an attached layer yields at least one tap");
        let tap_count = taps[*slot].len();
        if tap_count > 1 {
            term = tape.scale(term, 1.0 / tap_count as f64);
        }
        let weighted = tape.scale(term, kf.lambdas[*slot]);
        weighted_values.push(tape.value(weighted).scalar_value());
        total = tape.add(total, weighted);
    }
    Ok((total, weighted_values))
}

/// Configuration for [`train_regularized`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularizedConfig {
    pub epochs: usize,
    /// Batch size for the shuffled training batches; must be even so each
    /// batch splits into halves.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Relative jitter for the penalty solves.
    pub kf_jitter_rel: f64,
    /// Penalties compare reconstructions against predictions instead of
    /// targets. Off by default.
    pub compare_predictions: bool,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    /// Minimum validation-RMSE drop that counts as improvement.
    pub min_delta: f64,
    /// Restore the parameters of the best validation epoch after training.
    pub restore_best: bool,
    /// Space for the recorded validation/test metrics.
    pub metric_space: MetricSpace,
    pub seed: u64,
}

impl Default for RegularizedConfig {
    fn default() -> Self {
        RegularizedConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::adam(DEFAULT_NN_LEARNING_RATE),
            clip_norm: Some(DEFAULT_CLIP_NORM),
            kf_jitter_rel: KF_LAYER_JITTER_REL,
            compare_predictions: false,
            patience: None,
            min_delta: 0.0,
            restore_best: true,
            metric_space: MetricSpace::Raw,
            seed: 0,
        }
    }
}

/// A trained network with its regularizer state and the training trace.
#[derive(Debug, Clone)]
pub struct RegularizedTraining {
    pub params: NetworkParams,
    pub kf: KfLayerState,
    pub records: Vec<EpochRecord>,
    /// Human-readable notes on skipped penalties and aborted epochs.
    pub warnings: Vec<String>,
}

/// Evaluation-mode predictions for a whole input matrix, forwarded in row
/// chunks to bound scratch memory.
pub fn predict(spec: &NetworkSpec, params: &NetworkParams, inputs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(inputs.rows(), spec.output_dim());
    let mut start = 0;
    while start < inputs.rows() {
        let len = EVAL_CHUNK.min(inputs.rows() - start);
        let chunk = inputs.row_slice(start, len);
        let (pred, _) = forward(spec, params, &chunk, Mode::Eval, None);
        for r in 0..len {
            out.row_mut(start + r).copy_from_slice(pred.row(r));
        }
        start += len;
    }
    out
}

/// Trains the network and all attached kernels jointly.
///
/// Every epoch reshuffles the training rows under a per-epoch seed, walks the
/// batches with one combined backward pass and optimizer step each (network
/// weights and kernel parameters updated together), then snapshots
/// validation and test metrics. The best validation epoch is checkpointed and
/// restored at the end unless disabled. A non-finite gradient aborts the
/// epoch with a warning but keeps the updates already applied; a penalty
/// factorization failure only costs that batch its penalty.
pub fn train_regularized(
    dataset: &WindowedDataset,
    spec: &NetworkSpec,
    config: &RegularizedConfig,
) -> Result<RegularizedTraining, KfRegError> {
    spec.validate()?;
    if config.batch_size < 2 || config.batch_size % 2 != 0 {
        return Err(KfRegError::InvalidConfig {
            reason: format!(
                "batch size {} must be even and at least 2",
                config.batch_size
            ),
        });
    }
    if dataset.inputs.cols() % spec.input_dim != 0 {
        return Err(KfRegError::InvalidConfig {
            reason: format!(
                "window width {} is not a multiple of input_dim {}",
                dataset.inputs.cols(),
                spec.input_dim
            ),
        });
    }
    if spec.output_dim() != dataset.targets.cols() {
        return Err(KfRegError::InvalidConfig {
            reason: format!(
                "network emits {} outputs but targets have {}",
                spec.output_dim(),
                dataset.targets.cols()
            ),
        });
    }
    if dataset.train_rows().len() == 0 {
        return Err(KfRegError::InvalidConfig {
            reason: "training split is empty".into(),
        });
    }

    let mut params = he_normal_init(spec, config.seed)?;
    let mut kf = KfLayerState::from_spec(spec, config.kf_jitter_rel);
    if !kf.active_slots().is_empty() {
        // Scale the kernels to the untrained activations of the first batch
        // the optimizer will see. The evaluation-mode pass draws no
        // randomness, so inactive runs are unaffected by skipping this.
        let first_epoch = rng::epoch_seed(config.seed, 0);
        let batches = shuffled_batches(dataset, Split::Train, config.batch_size, first_epoch)?;
        let first_inputs = dataset.inputs.gather_rows(&batches[0]);
        let (_, taps) = forward(spec, &params, &first_inputs, Mode::Eval, None);
        kf.init_gammas(&taps, config.seed);
    }
    let active_count = kf.active_slots().len();

    let val_rows: Vec<usize> = dataset.validation_rows().collect();
    let test_rows: Vec<usize> = dataset.test_rows().collect();
    let val_inputs = dataset.inputs.gather_rows(&val_rows);
    let test_inputs = dataset.inputs.gather_rows(&test_rows);
    let has_validation = !val_rows.is_empty();

    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut records = Vec::with_capacity(config.epochs);
    let mut warnings = Vec::new();
    let mut best: Option<(f64, NetworkParams, KfLayerState, usize)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let epoch_seed = rng::epoch_seed(config.seed, epoch);
        let batches = shuffled_batches(dataset, Split::Train, config.batch_size, epoch_seed)?;
        let mut dropout_rng = rng::stream(config.seed, "dropout", epoch as u64);

        let mut mse_sum = 0.0;
        let mut kf_sums = vec![0.0; active_count];
        let mut completed = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let inputs = dataset.inputs.gather_rows(batch);
            let targets = dataset.targets.gather_rows(batch);

            let mut tape = Tape::new();
            let net_nodes = TapeParams::push(&mut tape, &params);
            let objective = objective_on_tape(
                &mut tape,
                spec,
                &net_nodes,
                &kf,
                &inputs,
                &targets,
                Mode::Train,
                Some(&mut dropout_rng),
                config.compare_predictions,
            );
            if let Some(w) = &objective.kf_warning {
                warnings.push(format!("epoch {epoch} batch {bi}: penalty skipped: {w}"));
            }

            let mut bindings = ParamBindings::new();
            bindings.bind_network(&net_nodes, &mut params);
            let mut pending = objective.gamma_nodes.iter().peekable();
            for (idx, gamma) in kf.gammas.iter_mut().enumerate() {
                let Some((slot, nodes)) = pending.peek() else {
                    break;
                };
                if *slot != idx {
                    continue;
                }
                bindings.bind(
                    format!("kf{slot}.log_lengthscale"),
                    nodes.log_lengthscale,
                    &mut gamma.log_lengthscale,
                );
                bindings.bind(
                    format!("kf{slot}.log_signal_variance"),
                    nodes.log_signal_variance,
                    &mut gamma.log_signal_variance,
                );
                if let (Some(node), Some(alpha)) = (nodes.log_alpha, gamma.log_alpha.as_mut()) {
                    bindings.bind(format!("kf{slot}.log_alpha"), node, alpha);
                }
                pending.next();
            }
            if let Err(err) =
                backward_and_step(&tape, objective.total, bindings, &mut optimizer, config.clip_norm)
            {
                warnings.push(format!("epoch {epoch}: aborted: {err}"));
                break;
            }

            mse_sum += objective.decomposition.mse;
            for (k, v) in objective.decomposition.kf_terms.iter().enumerate() {
                kf_sums[k] += v;
            }
            completed += 1;
        }

        let train_loss = if completed == 0 {
            LossDecomposition::plain(f64::NAN)
        } else {
            let n = completed as f64;
            let mean_mse = mse_sum / n;
            if active_count == 0 {
                LossDecomposition::plain(mean_mse)
            } else {
                LossDecomposition::with_terms(mean_mse, kf_sums.iter().map(|s| s / n).collect())
            }
        };

        let validation = if val_inputs.rows() > 0 {
            let preds = predict(spec, &params, &val_inputs);
            Some(evaluate_predictions(
                dataset,
                Split::Validation,
                &preds,
                config.metric_space,
            ))
        } else {
            None
        };
        let test = if test_inputs.rows() > 0 {
            let preds = predict(spec, &params, &test_inputs);
            Some(evaluate_predictions(
                dataset,
                Split::Test,
                &preds,
                config.metric_space,
            ))
        } else {
            None
        };

        if let Some(v) = &validation {
            let improved = match &best {
                None => true,
                Some((b, _, _, _)) => v.rmse < b - config.min_delta,
            };
            if improved {
                best = Some((v.rmse, params.clone(), kf.clone(), epoch));
            }
        }

        records.push(EpochRecord {
            epoch,
            train_loss,
            validation,
            test,
            wall_clock_s: started.elapsed().as_secs_f64(),
            rng_digest: rng::rng_digest(&ChaCha8Rng::seed_from_u64(epoch_seed)),
        });

        if let (Some(patience), Some((_, _, _, best_epoch))) = (config.patience, &best) {
            if epoch - best_epoch > patience {
                break;
            }
        }
    }

    if config.restore_best && has_validation {
        if let Some((_, best_params, best_kf, _)) = best {
            params = best_params;
            kf = best_kf;
        }
    }

    Ok(RegularizedTraining {
        params,
        kf,
        records,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synthetic, SplitSpec};
    use crate::nn::{Activation, DenseLayerSpec, LstmLayerSpec};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut stream = rng::stream(seed, "test-mat", 0);
        Matrix::from_fn(rows, cols, |_, _| stream.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn layer_reproduces_identity_on_its_own_half() {
        let x = random_matrix(16, 6, 3);
        let gamma = KernelParams::rbf((0.8_f64).ln(), 0.3);
        let z = kf_layer(&gamma, &x, KF_LAYER_JITTER_REL).unwrap();
        assert_eq!(z.shape(), (16, 8));
        let gap = z.row_slice(0, 8).sub(&Matrix::identity(8)).max_abs();
        assert!(gap <= 1e-8, "identity gap {gap}");
    }

    #[test]
    fn two_row_layer_projects_onto_its_single_anchor() {
        let x = Matrix::from_rows(&[vec![0.4, -1.2], vec![1.0, 0.5]]);
        let gamma = KernelParams::rbf(0.0, 0.0);
        let z = kf_layer(&gamma, &x, KF_LAYER_JITTER_REL).unwrap();
        assert_eq!(z.shape(), (2, 1));
        assert!((z.get(0, 0) - 1.0).abs() <= 1e-9);
        // The second row is k(x1, x0) / k(x0, x0) = exp(-d²/2) for unit
        // lengthscale and variance.
        let d2 = (1.0_f64 - 0.4).powi(2) + (0.5_f64 + 1.2).powi(2);
        assert!((z.get(1, 0) - (-d2 / 2.0).exp()).abs() <= 1e-9);
    }

    /// Gauss-Jordan inverse, written out so the oracle shares nothing with
    /// the Cholesky path under test.
    fn invert_dense(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::from_fn(n, 2 * n, |r, c| {
            if c < n {
                a.get(r, c)
            } else if c - n == r {
                1.0
            } else {
                0.0
            }
        });
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&i, &j| {
                    aug.get(i, col)
                        .abs()
                        .total_cmp(&aug.get(j, col).abs())
                })
                .unwrap();
            if pivot_row != col {
                for c in 0..2 * n {
                    let tmp = aug.get(col, c);
                    aug.set(col, c, aug.get(pivot_row, c));
                    aug.set(pivot_row, c, tmp);
                }
            }
            let pivot = aug.get(col, col);
            for c in 0..2 * n {
                aug.set(col, c, aug.get(col, c) / pivot);
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = aug.get(r, col);
                for c in 0..2 * n {
                    aug.set(r, c, aug.get(r, c) - factor * aug.get(col, c));
                }
            }
        }
        Matrix::from_fn(n, n, |r, c| aug.get(r, n + c))
    }

    #[test]
    fn layer_matches_dense_oracle() {
        let x = random_matrix(8, 4, 9);
        let ell = 1.3_f64;
        let sigma2 = 1.7_f64;
        let gamma = KernelParams::rbf(ell.ln(), sigma2.ln());

        // Oracle: assemble both grams from the closed-form kernel and invert
        // the small one directly.
        let kernel = |a: &[f64], b: &[f64]| {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            sigma2 * (-d2 / (2.0 * ell * ell)).exp()
        };
        let k_fc = Matrix::from_fn(8, 4, |r, c| kernel(x.row(r), x.row(c)));
        let k_cc = Matrix::from_fn(4, 4, |r, c| kernel(x.row(r), x.row(c)));
        let expected = k_fc.matmul(&invert_dense(&k_cc));

        let z = kf_layer(&gamma, &x, KF_LAYER_JITTER_REL).unwrap();
        let gap = z.sub(&expected).max_abs();
        assert!(gap <= 1e-6, "oracle gap {gap}");
    }

    #[test]
    fn combined_loss_matches_hand_computation() {
        let predictions = random_matrix(4, 2, 11);
        let targets = random_matrix(4, 2, 12);
        let z = random_matrix(4, 2, 13);
        let y_c = random_matrix(2, 2, 14);
        let lambda = 0.5;

        let (total, parts) =
            combined_loss(&predictions, &targets, &[(z.clone(), y_c.clone())], &[lambda]).unwrap();

        let mut mse = 0.0;
        for r in 0..4 {
            for c in 0..2 {
                mse += (predictions.get(r, c) - targets.get(r, c)).powi(2);
            }
        }
        mse /= 8.0;
        let mut penalty = 0.0;
        for r in 0..4 {
            for c in 0..2 {
                let recon = z.get(r, 0) * y_c.get(0, c) + z.get(r, 1) * y_c.get(1, c);
                penalty += (targets.get(r, c) - recon).powi(2);
            }
        }
        penalty /= 8.0;

        assert!((parts.mse - mse).abs() <= 1e-12);
        assert!((parts.kf_terms[0] - lambda * penalty).abs() <= 1e-12);
        assert!((total - (mse + lambda * penalty)).abs() <= 1e-12);
    }

    #[test]
    fn combined_loss_reduces_to_plain_error_with_zero_weights() {
        let predictions = random_matrix(6, 1, 21);
        let targets = random_matrix(6, 1, 22);
        let z = random_matrix(6, 3, 23);
        let y_c = random_matrix(3, 1, 24);

        let (total, parts) =
            combined_loss(&predictions, &targets, &[(z, y_c)], &[0.0]).unwrap();
        let (plain_total, plain_parts) = combined_loss(&predictions, &targets, &[], &[]).unwrap();
        assert_eq!(total.to_bits(), plain_total.to_bits());
        assert!(parts.kf_terms.is_empty());
        assert_eq!(parts.mse.to_bits(), plain_parts.mse.to_bits());
    }

    #[test]
    fn combined_loss_ignores_perfect_reconstruction() {
        let z = random_matrix(6, 3, 31);
        let y_c = random_matrix(3, 2, 32);
        let targets = z.matmul(&y_c);
        let predictions = random_matrix(6, 2, 33);

        let (total, parts) =
            combined_loss(&predictions, &targets, &[(z, y_c)], &[2.0]).unwrap();
        assert!(parts.kf_terms[0].abs() <= 1e-24);
        assert!((total - parts.mse).abs() <= 1e-24);
    }

    #[test]
    fn combined_loss_is_monotone_in_each_weight() {
        let predictions = random_matrix(8, 2, 41);
        let targets = random_matrix(8, 2, 42);
        let z = random_matrix(8, 4, 43);
        let y_c = random_matrix(4, 2, 44);

        let mut previous = f64::NEG_INFINITY;
        for lambda in [0.0, 0.25, 1.0, 4.0] {
            let (total, _) =
                combined_loss(&predictions, &targets, &[(z.clone(), y_c.clone())], &[lambda])
                    .unwrap();
            assert!(total > previous, "total {total} at weight {lambda}");
            previous = total;
        }
    }

    #[test]
    fn combined_loss_rejects_mismatched_shapes() {
        let a = random_matrix(4, 2, 51);
        let b = random_matrix(3, 2, 52);
        assert!(matches!(
            combined_loss(&a, &b, &[], &[]),
            Err(KfRegError::ShapeMismatch { .. })
        ));

        let targets = random_matrix(4, 2, 53);
        let z = random_matrix(4, 3, 54);
        let y_c = random_matrix(2, 2, 55);
        assert!(matches!(
            combined_loss(&a, &targets, &[(z, y_c)], &[1.0]),
            Err(KfRegError::ShapeMismatch { .. })
        ));

        let z = random_matrix(4, 2, 56);
        let y_c = random_matrix(2, 2, 57);
        assert!(matches!(
            combined_loss(&a, &targets, &[(z, y_c)], &[1.0, 1.0]),
            Err(KfRegError::ShapeMismatch { .. })
        ));
    }

    fn attached_spec(units: usize, dropout: f64, lambda: f64) -> NetworkSpec {
        NetworkSpec {
            input_dim: 2,
            lstm_layers: vec![
                LstmLayerSpec {
                    units,
                    dropout_rate: dropout,
                    kf_attached: false,
                },
                LstmLayerSpec {
                    units,
                    dropout_rate: dropout,
                    kf_attached: true,
                },
            ],
            dense_layers: vec![DenseLayerSpec {
                units: 1,
                activation: Activation::Linear,
            }],
            kf_weights: vec![lambda],
            relu_last_lstm: false,
            kf_all_steps: false,
        }
    }

    fn state_for(spec: &NetworkSpec, log_ell: f64) -> KfLayerState {
        let mut kf = KfLayerState::from_spec(spec, KF_LAYER_JITTER_REL);
        for slot in kf.active_slots() {
            kf.gammas[slot] = KernelParams::rbf(log_ell, 0.0);
        }
        kf
    }

    #[test]
    fn objective_matches_pure_composition() {
        let spec = attached_spec(5, 0.0, 0.7);
        let params = he_normal_init(&spec, 61).unwrap();
        let kf = state_for(&spec, (0.9_f64).ln());
        let inputs = random_matrix(6, 4, 62);
        let targets = random_matrix(6, 1, 63);

        let mut tape = Tape::new();
        let nodes = TapeParams::push(&mut tape, &params);
        let objective = objective_on_tape(
            &mut tape, &spec, &nodes, &kf, &inputs, &targets, Mode::Train, None, false,
        );
        assert!(objective.kf_warning.is_none());

        let (predictions, taps) = forward(&spec, &params, &inputs, Mode::Eval, None);
        let z = kf_layer(&kf.gammas[0], &taps[0][0], kf.jitter_rel).unwrap();
        let y_c = targets.row_slice(0, 3);
        let (expected_total, expected_parts) =
            combined_loss(&predictions, &targets, &[(z, y_c)], &[0.7]).unwrap();

        let total = tape.value(objective.total).scalar_value();
        assert!((total - expected_total).abs() <= 1e-12 * expected_total.abs().max(1.0));
        assert!(
            (objective.decomposition.kf_terms[0] - expected_parts.kf_terms[0]).abs() <= 1e-12
        );
        assert!((objective.decomposition.mse - expected_parts.mse).abs() <= 1e-12);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let spec = attached_spec(4, 0.0, 0.7);
        let params = he_normal_init(&spec, 71).unwrap();
        let kf = state_for(&spec, (0.8_f64).ln());
        let inputs = random_matrix(4, 4, 72);
        let targets = random_matrix(4, 1, 73);

        let loss_at = |params: &NetworkParams, kf: &KfLayerState| -> f64 {
            let mut tape = Tape::new();
            let nodes = TapeParams::push(&mut tape, params);
            let objective = objective_on_tape(
                &mut tape, &spec, &nodes, kf, &inputs, &targets, Mode::Train, None, false,
            );
            assert!(objective.kf_warning.is_none());
            tape.value(objective.total).scalar_value()
        };

        let mut tape = Tape::new();
        let nodes = TapeParams::push(&mut tape, &params);
        let objective = objective_on_tape(
            &mut tape, &spec, &nodes, &kf, &inputs, &targets, Mode::Train, None, false,
        );
        let grads = tape.backward(objective.total).unwrap();

        let h = 1e-6;
        let mut checked = 0usize;

        // Network blocks, in canonical order.
        let mut flat_params = params.clone();
        let node_list = nodes.flat();
        let names = params.block_names();
        for (bi, node) in node_list.iter().enumerate() {
            let shape = flat_params.flat_mut()[bi].shape();
            let grad = grads
                .wrt(*node)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let original = flat_params.flat_mut()[bi].get(r, c);
                    flat_params.flat_mut()[bi].set(r, c, original + h);
                    let up = loss_at(&flat_params, &kf);
                    flat_params.flat_mut()[bi].set(r, c, original - h);
                    let down = loss_at(&flat_params, &kf);
                    flat_params.flat_mut()[bi].set(r, c, original);
                    let fd = (up - down) / (2.0 * h);
                    let got = grad.get(r, c);
                    let denom = fd.abs().max(got.abs()).max(1e-8);
                    assert!(
                        (got - fd).abs() <= 1e-8 || (got - fd).abs() / denom <= 1e-5,
                        "{} [{r},{c}]: analytic {got}, finite difference {fd}",
                        names[bi]
                    );
                    checked += 1;
                }
            }
        }

        // Kernel parameters of the one active attachment.
        let (_, gamma_nodes) = objective.gamma_nodes[0];
        let lengthscale: &dyn Fn(&mut KfLayerState) -> &mut Matrix =
            &|kf| &mut kf.gammas[0].log_lengthscale;
        let variance: &dyn Fn(&mut KfLayerState) -> &mut Matrix =
            &|kf| &mut kf.gammas[0].log_signal_variance;
        for (node, pick) in [
            (gamma_nodes.log_lengthscale, lengthscale),
            (gamma_nodes.log_signal_variance, variance),
        ] {
            let got = grads
                .wrt(node)
                .map(|g| g.get(0, 0))
                .unwrap_or(0.0);
            let mut shifted = kf.clone();
            let original = pick(&mut shifted).get(0, 0);
            pick(&mut shifted).set(0, 0, original + h);
            let up = loss_at(&params, &shifted);
            pick(&mut shifted).set(0, 0, original - h);
            let down = loss_at(&params, &shifted);
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                (got - fd).abs() <= 1e-8 || (got - fd).abs() / denom <= 1e-5,
                "kernel parameter: analytic {got}, finite difference {fd}"
            );
            checked += 1;
        }
        assert!(checked > 100, "only {checked} coordinates checked");
    }

    #[test]
    fn objective_with_zero_weight_is_bitwise_plain() {
        let attached = attached_spec(5, 0.0, 0.0);
        let mut plain = attached.clone();
        plain.lstm_layers[1].kf_attached = false;
        plain.kf_weights = Vec::new();

        let params = he_normal_init(&attached, 81).unwrap();
        assert_eq!(params, he_normal_init(&plain, 81).unwrap());

        let inputs = random_matrix(6, 4, 82);
        let targets = random_matrix(6, 1, 83);

        let mut tape_a = Tape::new();
        let nodes_a = TapeParams::push(&mut tape_a, &params);
        let kf_a = KfLayerState::from_spec(&attached, KF_LAYER_JITTER_REL);
        let obj_a = objective_on_tape(
            &mut tape_a, &attached, &nodes_a, &kf_a, &inputs, &targets, Mode::Train, None, false,
        );

        let mut tape_b = Tape::new();
        let nodes_b = TapeParams::push(&mut tape_b, &params);
        let kf_b = KfLayerState::from_spec(&plain, KF_LAYER_JITTER_REL);
        let obj_b = objective_on_tape(
            &mut tape_b, &plain, &nodes_b, &kf_b, &inputs, &targets, Mode::Train, None, false,
        );

        let a = tape_a.value(obj_a.total).scalar_value();
        let b = tape_b.value(obj_b.total).scalar_value();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(obj_a.decomposition.bits_eq(&obj_b.decomposition));
        assert!(obj_a.gamma_nodes.is_empty());
    }

    #[test]
    fn objective_survives_a_degenerate_kernel() {
        // A signal variance that underflowed to zero makes every gram entry
        // exactly zero, which no amount of relative jitter can rescue; the
        // batch must fall back to the plain prediction error.
        let spec = attached_spec(4, 0.0, 0.5);
        let params = he_normal_init(&spec, 91).unwrap();
        let mut kf = state_for(&spec, 0.0);
        kf.gammas[0].log_signal_variance.set(0, 0, -1000.0);
        assert_eq!(kf.gammas[0].signal_variance(), 0.0);
        let inputs = random_matrix(4, 4, 92);
        let targets = random_matrix(4, 1, 93);

        let mut tape = Tape::new();
        let nodes = TapeParams::push(&mut tape, &params);
        let objective = objective_on_tape(
            &mut tape, &spec, &nodes, &kf, &inputs, &targets, Mode::Train, None, false,
        );
        assert!(objective.kf_warning.is_some());
        assert!(objective.decomposition.kf_terms.is_empty());
        assert_eq!(objective.gamma_nodes.len(), 1, "bindings keep their shape");
        assert!(objective.decomposition.total.is_finite());
        assert_eq!(objective.decomposition.total, objective.decomposition.mse);
    }

    fn wave_dataset(n: usize) -> WindowedDataset {
        let frame = synthetic::noisy_wave_series(n, 7);
        make_windows(&frame, 6, 1, &[0], true, false, &SplitSpec::three_way_default()).unwrap()
    }

    fn small_config(epochs: usize, seed: u64) -> RegularizedConfig {
        RegularizedConfig {
            epochs,
            batch_size: 8,
            optimizer: OptimizerKind::adam(1e-2),
            seed,
            ..RegularizedConfig::default()
        }
    }

    fn small_spec(lambda: Option<f64>) -> NetworkSpec {
        NetworkSpec {
            input_dim: 1,
            lstm_layers: vec![LstmLayerSpec {
                units: 8,
                dropout_rate: 0.0,
                kf_attached: lambda.is_some(),
            }],
            dense_layers: vec![DenseLayerSpec {
                units: 1,
                activation: Activation::Linear,
            }],
            kf_weights: lambda.into_iter().collect(),
            relu_last_lstm: false,
            kf_all_steps: false,
        }
    }

    #[test]
    fn training_reduces_the_combined_loss() {
        let dataset = wave_dataset(160);
        let spec = small_spec(Some(0.1));
        let out = train_regularized(&dataset, &spec, &small_config(25, 5)).unwrap();

        assert_eq!(out.records.len(), 25);
        let first = out.records.first().unwrap().train_loss.total;
        let last = out.records.last().unwrap().train_loss.total;
        assert!(last < first, "loss went {first} -> {last}");
        for record in &out.records {
            assert_eq!(record.train_loss.kf_terms.len(), 1);
            let sum: f64 = record.train_loss.kf_terms.iter().sum();
            assert_eq!(
                record.train_loss.total.to_bits(),
                (record.train_loss.mse + sum).to_bits(),
                "decomposition is additive by construction"
            );
            assert!(record.validation.is_some());
            assert!(record.test.is_some());
            assert!(!record.rng_digest.is_empty());
        }
        // The kernel moved off its activation-scaled starting point.
        let init = {
            let mut kf = KfLayerState::from_spec(&spec, KF_LAYER_JITTER_REL);
            kf.lambdas = spec.kf_weights.clone();
            kf
        };
        assert_ne!(out.kf.gammas[0].log_lengthscale, init.gammas[0].log_lengthscale);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let dataset = wave_dataset(140);
        let spec = small_spec(Some(0.2));
        let a = train_regularized(&dataset, &spec, &small_config(6, 11)).unwrap();
        let b = train_regularized(&dataset, &spec, &small_config(6, 11)).unwrap();
        assert!(EpochRecord::runs_match(&a.records, &b.records));
        assert_eq!(a.params, b.params);
        assert_eq!(a.kf, b.kf);
    }

    #[test]
    fn zero_weight_training_is_bitwise_plain() {
        let dataset = wave_dataset(140);
        let attached = small_spec(Some(0.0));
        let plain = small_spec(None);
        let a = train_regularized(&dataset, &attached, &small_config(6, 17)).unwrap();
        let b = train_regularized(&dataset, &plain, &small_config(6, 17)).unwrap();
        assert!(EpochRecord::runs_match(&a.records, &b.records));
        assert_eq!(a.params, b.params);
        assert!(a.warnings.is_empty());
    }

    #[test]
    fn training_handles_an_odd_tail_batch() {
        // 37 training windows with batches of 8 leave a 5-row tail; the
        // penalty halves it as ⌊5/2⌋ = 2 anchors.
        let frame = synthetic::noisy_wave_series(50, 19);
        let dataset = make_windows(
            &frame,
            6,
            1,
            &[0],
            true,
            false,
            &SplitSpec::new(&[0.85, 0.15]).unwrap(),
        )
        .unwrap();
        assert_eq!(dataset.train_rows().len() % 8 % 2, 1);

        let spec = small_spec(Some(0.3));
        let out = train_regularized(&dataset, &spec, &small_config(3, 23)).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn every_step_objective_differs_but_stays_decomposed() {
        let mut spec = attached_spec(5, 0.0, 0.6);
        let params = he_normal_init(&spec, 101).unwrap();
        let kf = state_for(&spec, 0.0);
        let inputs = random_matrix(6, 4, 102);
        let targets = random_matrix(6, 1, 103);

        let mut tape = Tape::new();
        let nodes = TapeParams::push(&mut tape, &params);
        let last_only = objective_on_tape(
            &mut tape, &spec, &nodes, &kf, &inputs, &targets, Mode::Train, None, false,
        );

        spec.kf_all_steps = true;
        let mut tape_all = Tape::new();
        let nodes_all = TapeParams::push(&mut tape_all, &params);
        let every_step = objective_on_tape(
            &mut tape_all, &spec, &nodes_all, &kf, &inputs, &targets, Mode::Train, None, false,
        );

        assert_eq!(every_step.decomposition.kf_terms.len(), 1);
        assert_eq!(
            every_step.decomposition.mse.to_bits(),
            last_only.decomposition.mse.to_bits()
        );
        assert_ne!(
            every_step.decomposition.kf_terms[0],
            last_only.decomposition.kf_terms[0]
        );
    }

    #[test]
    fn gamma_initialization_uses_the_median_distance() {
        let spec = small_spec(Some(1.0));
        let mut kf = KfLayerState::from_spec(&spec, KF_LAYER_JITTER_REL);
        // Three points on a line: pairwise distances 1, 2, 3; median 2.
        let tap = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]);
        kf.init_gammas(&[vec![tap]], 0);
        let got = kf.gammas[0].log_lengthscale.get(0, 0);
        assert!((got - (2.0_f64).ln()).abs() <= 1e-12);

        let mut again = KfLayerState::from_spec(&spec, KF_LAYER_JITTER_REL);
        let tap = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]);
        again.init_gammas(&[vec![tap]], 0);
        assert_eq!(kf, again);
    }

    #[test]
    fn chunked_prediction_matches_a_single_pass() {
        let spec = small_spec(None);
        let params = he_normal_init(&spec, 111).unwrap();
        let inputs = random_matrix(600, 6, 112);
        let chunked = predict(&spec, &params, &inputs);
        let (direct, _) = forward(&spec, &params, &inputs, Mode::Eval, None);
        let gap = chunked.sub(&direct).max_abs();
        assert!(gap <= 1e-12, "chunking changed predictions by {gap}");
    }
}
