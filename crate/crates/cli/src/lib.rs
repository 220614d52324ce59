//! Experiment harness for the kernel-flow forecasting toolkit.
//!
//! The `kflow` binary drives everything from one declarative TOML config:
//!
//! * [`config`] — the config document, collected-at-once validation, and
//!   default resolution.
//! * [`dataset`] — turning the `[dataset]` block into a windowed dataset
//!   with provenance (source digests) for self-describing run directories.
//! * [`run`] — single experiment execution: training, per-epoch records,
//!   curve CSVs, checkpoints, summaries, and partial-run markers.
//! * [`grid`] — Cartesian hyperparameter sweeps ranked by validation RMSE.
//! * [`sparsity`] — the rectified-activation sparsity analysis of a
//!   finished run.
//! * [`compare`] — epoch-aligned curve overlays and final-metric tables
//!   across run directories.
//!
//! Identical configs and seeds reproduce run artifacts bitwise (wall-clock
//! fields aside), which the stored RNG digests make checkable.

use thiserror::Error;

pub mod compare;
pub mod config;
pub mod dataset;
pub mod grid;
pub mod run;
pub mod sparsity;

/// Top-level failure modes, mapped onto exit codes by the binary.
#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration (or its fit to the data) is unusable; every
    /// detected problem is listed. Exit code 2.
    #[error("{}", .0.join("\n"))]
    Config(Vec<String>),
    /// Training or I/O failed at runtime. Exit code 3.
    #[error("{0}")]
    Runtime(String),
}
