//! From-scratch recurrent regressor.
//!
//! The pieces assemble in layers: [`optimizer`] provides Adam and SGD over
//! flat parameter lists, [`model`] defines the network shape, its parameter
//! containers, and He-normal initialization, and [`forward`] runs the stacked
//! LSTM plus dense head both as plain matrix arithmetic and on the
//! differentiation tape for training.

mod forward;
mod model;
mod optimizer;

pub use forward::{
    backward_and_step, dropout, dropout_mask, forward, forward_on_tape, lstm_forward, mse_loss,
    ForwardPass, LstmState, Mode, ParamBindings, StepReport, TapeParams,
};
pub use model::{
    he_normal_init, Activation, DenseLayerParams, DenseLayerSpec, LstmLayerParams, LstmLayerSpec,
    NetworkParams, NetworkSpec, GATE_COUNT, GATE_NAMES,
};
pub use optimizer::{clip_global_norm, Optimizer, OptimizerKind, DEFAULT_CLIP_NORM};

use thiserror::Error;

/// Errors surfaced by network construction and training.
#[derive(Debug, Error)]
pub enum NnError {
    /// A gradient contained NaN or infinity; training cannot continue from it.
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    /// The network description is internally inconsistent.
    #[error("invalid network specification: {reason}")]
    InvalidSpec { reason: String },
    /// Reverse-mode differentiation failed.
    #[error("gradient computation failed: {0}")]
    Backward(#[from] crate::linalg::LinalgError),
}
