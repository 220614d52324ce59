//! Data pipeline: CSV ingestion, calendar features, sliding-window dataset
//! construction, and deterministic batch shuffling.
//!
//! The pipeline is a chain of pure transformations over immutable frames:
//!
//! 1. [`load_csv`] reads a series file into a [`SeriesFrame`], applying the
//!    configured gap policy and recording provenance (row counts, rejected
//!    lines, file digest) in an [`IngestReport`].
//! 2. [`add_cyclical_features`] appends sin/cos encodings of calendar fields
//!    derived from the timestamps.
//! 3. [`make_windows`] slides a look-back/horizon window over the frame to
//!    produce a [`WindowedDataset`] with chronological train/validation/test
//!    splits, optional per-window differencing of targets, and min-max
//!    scaling fitted on training rows only.
//! 4. [`shuffled_batches`] cuts a split into seeded, reproducible minibatches.
//!
//! Everything downstream of the raw file is a deterministic function of the
//! file bytes, the configuration, and the seeds.

mod batches;
mod frame;
pub mod synthetic;
mod windows;

pub use batches::{shuffled_batches, Split};
pub use frame::{
    add_cyclical_features, load_csv, CalendarField, CsvSchema, GapPolicy, IngestReport,
    SeriesFrame,
};
pub use windows::{make_windows, FeatureScaler, SplitSpec, WindowedDataset};

use thiserror::Error;

/// Errors from ingestion, windowing, and batching.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("timestamps must be strictly increasing (violated at line {line})")]
    NonMonotoneTimestamps { line: usize },
    #[error("series has {usable_rows} usable rows; at least 2 are required")]
    EmptySeries { usable_rows: usize },
    #[error("calendar features require timestamps, but the frame has none")]
    MissingTimestamps,
    #[error("window of l={l} plus h={h} does not fit a series of {n} rows")]
    WindowTooLarge { l: usize, h: usize, n: usize },
    #[error("invalid split fractions: {detail}")]
    InvalidSplits { detail: String },
    #[error("invalid target features: {detail}")]
    InvalidTargets { detail: String },
    #[error("batch size {batch} exceeds split size {split_len}")]
    BatchTooLarge { batch: usize, split_len: usize },
}
