//! Kernel-flow forecasting toolkit.
//!
//! This crate implements a multivariate time-series forecasting stack built
//! around kernel-flow training of interpolation kernels:
//!
//! * [`linalg`] — dense `f64` matrices, Cholesky factorization with jitter
//!   escalation, and a reverse-mode differentiation tape.
//! * [`kernels`] — parametric kernel families (RBF, rational quadratic) with
//!   analytic parameter and input gradients.
//! * [`data`] — CSV ingestion, cyclical calendar features, sliding-window
//!   dataset construction with train-fitted scaling and differencing, and
//!   seeded batch shuffling.
//! * [`kernel_flow`] — the standalone learned-kernel Kriging forecaster:
//!   interpolant prediction and minibatch training of kernel parameters
//!   against the interpolation-degradation loss ρ (or its ℓ2 variant).
//! * [`nn`] — a from-scratch stacked LSTM regressor with inverted dropout,
//!   He-normal initialization, Adam, and gradient clipping, differentiated
//!   end-to-end on the tape.
//! * [`kfreg`] — the kernel-flow regularization layer for the LSTM: a
//!   differentiable half-batch interpolation operator whose reconstruction
//!   error is added to the MSE objective, plus the shared training engine.
//! * [`metrics`] — RMSE/MAE/MAPE/RSE/CORR with per-horizon and per-feature
//!   breakdowns.
//! * [`record`] — per-epoch records, loss decompositions, and checkpoint
//!   formats with RNG digests for determinism audits.
//!
//! All randomness flows through seeded ChaCha streams derived in [`rng`];
//! identical configuration and seeds reproduce results bitwise.

pub mod data;
pub mod kernel_flow;
pub mod kernels;
pub mod kfreg;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod record;
pub mod rng;
