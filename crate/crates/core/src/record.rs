//! Per-epoch training records.
//!
//! Every trainer in the crate emits one [`EpochRecord`] per epoch: the
//! decomposed training loss, validation and test metric snapshots, wall-clock
//! time, and a digest of the random-stream state. Identical configuration and
//! seeds must reproduce records bitwise; [`EpochRecord::results_match`]
//! checks exactly that, comparing floats by bit pattern and ignoring only the
//! wall-clock field (timing is the one quantity a determinism contract cannot
//! cover).

use crate::data::{Split, WindowedDataset};
use crate::linalg::Matrix;
use crate::metrics;
use serde::{Deserialize, Serialize};

/// Which space evaluation metrics are computed in.
///
/// `Raw` compares predictions and truth as original-scale levels (predictions
/// are unscaled and undifferenced first). `ScaledLevels` additionally maps
/// both sides through the input scaler of each target feature, so errors are
/// expressed relative to the series' training range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSpace {
    Raw,
    ScaledLevels,
}

/// Evaluates model-space predictions for the rows of `split`: inverts them to
/// raw levels, optionally rescales, and takes the metric snapshot against the
/// stored raw targets.
pub fn evaluate_predictions(
    dataset: &WindowedDataset,
    split: Split,
    predictions: &Matrix,
    space: MetricSpace,
) -> SplitMetrics {
    let rows: Vec<usize> = dataset.rows_of(split).collect();
    let yhat_raw = dataset.invert_targets(&rows, predictions);
    let y_raw = dataset.targets_raw.gather_rows(&rows);
    match space {
        MetricSpace::Raw => SplitMetrics::compute(&y_raw, &yhat_raw),
        MetricSpace::ScaledLevels => SplitMetrics::compute(
            &dataset.scale_levels(&y_raw),
            &dataset.scale_levels(&yhat_raw),
        ),
    }
}

/// Additive decomposition of one epoch's mean training loss.
///
/// `total` is always `mse + sum(kf_terms)`: `kf_terms` holds the
/// weight-multiplied kernel reconstruction penalties, one entry per active
/// regularization layer. Objectives without penalty terms put the whole value
/// in `mse` and leave `kf_terms` empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    pub total: f64,
    pub mse: f64,
    pub kf_terms: Vec<f64>,
}

impl LossDecomposition {
    /// A loss with no penalty components.
    pub fn plain(value: f64) -> Self {
        LossDecomposition {
            total: value,
            mse: value,
            kf_terms: Vec::new(),
        }
    }

    /// A loss assembled from a data-fit part and weighted penalty terms.
    pub fn with_terms(mse: f64, kf_terms: Vec<f64>) -> Self {
        LossDecomposition {
            total: mse + kf_terms.iter().sum::<f64>(),
            mse,
            kf_terms,
        }
    }

    /// Bit-level equality of every float, treating NaN patterns literally.
    pub fn bits_eq(&self, other: &Self) -> bool {
        f64_bits_eq(self.total, other.total)
            && f64_bits_eq(self.mse, other.mse)
            && self.kf_terms.len() == other.kf_terms.len()
            && self
                .kf_terms
                .iter()
                .zip(&other.kf_terms)
                .all(|(a, b)| f64_bits_eq(*a, *b))
    }
}

/// Scalar metric snapshot for one evaluation split. Ratio metrics that are
/// undefined on the split's data (constant truth, all-degenerate columns)
/// are `None` rather than aborting training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub rse: Option<f64>,
    pub corr: Option<f64>,
}

impl SplitMetrics {
    /// Computes the snapshot from true and predicted values.
    pub fn compute(y: &Matrix, yhat: &Matrix) -> Self {
        SplitMetrics {
            rmse: metrics::rmse(y, yhat),
            mae: metrics::mae(y, yhat),
            mape: metrics::mape(y, yhat).0,
            rse: metrics::rse(y, yhat).ok(),
            corr: metrics::corr(y, yhat).ok().map(|(c, _)| c),
        }
    }

    /// Bit-level equality of every float, treating NaN patterns literally.
    pub fn bits_eq(&self, other: &Self) -> bool {
        f64_bits_eq(self.rmse, other.rmse)
            && f64_bits_eq(self.mae, other.mae)
            && opt_bits_eq(self.mape, other.mape)
            && opt_bits_eq(self.rse, other.rse)
            && opt_bits_eq(self.corr, other.corr)
    }
}

/// One epoch of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: LossDecomposition,
    pub validation: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
    /// Seconds spent in this epoch; excluded from determinism comparisons.
    pub wall_clock_s: f64,
    /// Digest of the random-stream state driving this epoch; two runs that
    /// disagree anywhere in their stochastic choices disagree here.
    pub rng_digest: String,
}

impl EpochRecord {
    /// Bitwise equality of everything except wall-clock time.
    pub fn results_match(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.train_loss.bits_eq(&other.train_loss)
            && opt_field_eq(&self.validation, &other.validation)
            && opt_field_eq(&self.test, &other.test)
            && self.rng_digest == other.rng_digest
    }

    /// [`EpochRecord::results_match`] over whole runs.
    pub fn runs_match(a: &[EpochRecord], b: &[EpochRecord]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.results_match(y))
    }
}

fn f64_bits_eq(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

fn opt_bits_eq(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => f64_bits_eq(x, y),
        _ => false,
    }
}

fn opt_field_eq(a: &Option<SplitMetrics>, b: &Option<SplitMetrics>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => x.bits_eq(y),
        _ => false,
    }
}
