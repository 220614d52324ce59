//! First-order optimizers over flat lists of parameter matrices.
//!
//! Trainers flatten whatever they optimize — LSTM gates, dense layers,
//! kernel hyper-parameters, kernel-layer length-scales — into one ordered
//! list and hand matching gradient lists to a single [`Optimizer`] instance.
//! The instance owns any moment state, keyed purely by position, so the
//! caller must keep the list order stable across steps.

use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};

/// Gradient clipping threshold applied by default during network training.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

const ADAM_DEFAULT_BETA1: f64 = 0.9;
const ADAM_DEFAULT_BETA2: f64 = 0.999;
const ADAM_DEFAULT_EPSILON: f64 = 1e-8;

/// Update rule plus hyper-parameters, serializable for run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd {
        learning_rate: f64,
    },
}

impl OptimizerKind {
    /// Adam with the conventional moment decays (0.9, 0.999) and epsilon 1e-8.
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerKind::Adam {
            learning_rate,
            beta1: ADAM_DEFAULT_BETA1,
            beta2: ADAM_DEFAULT_BETA2,
            epsilon: ADAM_DEFAULT_EPSILON,
        }
    }

    /// Plain gradient descent.
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerKind::Sgd { learning_rate }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimizerKind::Adam { learning_rate, .. } => *learning_rate,
            OptimizerKind::Sgd { learning_rate } => *learning_rate,
        }
    }
}

/// A stateful optimizer over one fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one in-place update. `params` and `grads` must be aligned
    /// entry for entry and keep the same order and shapes on every call.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter and gradient lists must align"
        );
        for (p, g) in params.iter().zip(grads) {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        }

        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { learning_rate } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= learning_rate * gv;
                    }
                }
            }
            OptimizerKind::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads
                        .iter()
                        .map(|g| Matrix::zeros(g.rows(), g.cols()))
                        .collect();
                    self.second_moment = self.first_moment.clone();
                }
                assert_eq!(
                    self.first_moment.len(),
                    grads.len(),
                    "optimizer state was created for a different parameter list"
                );
                // Fold the bias corrections into the step size: the update is
                // lr * m_hat / (sqrt(v_hat) + eps) with m_hat = m / (1 - b1^t)
                // and v_hat = v / (1 - b2^t), applied with eps outside the
                // square root.
                let t = self.steps as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *pv -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

/// Scales `grads` in place so their joint Euclidean norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
