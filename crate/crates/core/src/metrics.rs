//! Forecast-quality metrics.
//!
//! All metrics are pure functions of a true-value matrix `y` and a
//! prediction matrix `yhat` of identical shape, one row per forecast window
//! and one column per (horizon step, target feature) pair.
//!
//! The relative squared error uses the standard benchmark form: residual
//! energy divided by the energy of the true values around the mean of the
//! *true* values, pooled over every entry. Correlation is the textbook
//! per-column Pearson coefficient averaged over columns; columns where
//! either series has zero variance are skipped and counted. These are the
//! definitions under which published multivariate-forecasting baselines are
//! comparable.
//!
//! [`report`] assembles the scalar metrics plus per-horizon-step and
//! per-target-feature breakdowns into a serializable [`MetricReport`].

use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold below which a true value is excluded from the
/// percentage error (division would be meaningless).
pub const MAPE_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("true values are constant; relative squared error is undefined")]
    ConstantTarget,
    #[error("every column has zero variance; correlation is undefined")]
    AllFeaturesDegenerate,
}

/// Root-mean-squared error over all entries.
pub fn rmse(y: &Matrix, yhat: &Matrix) -> f64 {
    assert_eq!(y.shape(), yhat.shape());
    assert!(!y.is_empty());
    let mut acc = 0.0;
    for (t, p) in y.data().iter().zip(yhat.data()) {
        let e = t - p;
        acc += e * e;
    }
    (acc / y.len() as f64).sqrt()
}

/// Mean absolute error over all entries.
pub fn mae(y: &Matrix, yhat: &Matrix) -> f64 {
    assert_eq!(y.shape(), yhat.shape());
    assert!(!y.is_empty());
    let acc: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(t, p)| (t - p).abs())
        .sum();
    acc / y.len() as f64
}

/// Mean absolute percentage error (in percent) over entries whose true value
/// exceeds [`MAPE_EPSILON`] in magnitude. Returns the value (`None` when no
/// entry qualifies) and the number of skipped entries.
pub fn mape(y: &Matrix, yhat: &Matrix) -> (Option<f64>, usize) {
    assert_eq!(y.shape(), yhat.shape());
    let mut acc = 0.0;
    let mut used = 0usize;
    for (t, p) in y.data().iter().zip(yhat.data()) {
        if t.abs() > MAPE_EPSILON {
            acc += (t - p).abs() / t.abs();
            used += 1;
        }
    }
    let skipped = y.len() - used;
    if used == 0 {
        (None, skipped)
    } else {
        (Some(100.0 * acc / used as f64), skipped)
    }
}

/// Root relative squared error: `sqrt(sum((y - yhat)^2)) /
/// sqrt(sum((y - mean(y))^2))`, pooled over all entries, with the mean taken
/// over the true values.
pub fn rse(y: &Matrix, yhat: &Matrix) -> Result<f64, MetricsError> {
    assert_eq!(y.shape(), yhat.shape());
    assert!(!y.is_empty());
    let mean = y.mean();
    let mut denom = 0.0;
    for t in y.data() {
        let d = t - mean;
        denom += d * d;
    }
    if denom <= 0.0 {
        return Err(MetricsError::ConstantTarget);
    }
    let mut num = 0.0;
    for (t, p) in y.data().iter().zip(yhat.data()) {
        let e = t - p;
        num += e * e;
    }
    Ok(num.sqrt() / denom.sqrt())
}

fn pearson_column(y: &Matrix, yhat: &Matrix, col: usize) -> Option<f64> {
    let n = y.rows();
    let (mut my, mut mp) = (0.0, 0.0);
    for i in 0..n {
        my += y.get(i, col);
        mp += yhat.get(i, col);
    }
    my /= n as f64;
    mp /= n as f64;
    let (mut cov, mut vy, mut vp) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let dy = y.get(i, col) - my;
        let dp = yhat.get(i, col) - mp;
        cov += dy * dp;
        vy += dy * dy;
        vp += dp * dp;
    }
    if vy <= 0.0 || vp <= 0.0 {
        None
    } else {
        Some(cov / (vy.sqrt() * vp.sqrt()))
    }
}

/// Mean over columns of the Pearson correlation between true and predicted
/// series. Columns where either side has zero variance are skipped; the
/// skipped count is returned alongside the mean.
pub fn corr(y: &Matrix, yhat: &Matrix) -> Result<(f64, usize), MetricsError> {
    assert_eq!(y.shape(), yhat.shape());
    assert!(y.rows() >= 2, "correlation needs at least two rows");
    let mut acc = 0.0;
    let mut used = 0usize;
    for c in 0..y.cols() {
        if let Some(r) = pearson_column(y, yhat, c) {
            acc += r;
            used += 1;
        }
    }
    if used == 0 {
        return Err(MetricsError::AllFeaturesDegenerate);
    }
    Ok((acc / used as f64, y.cols() - used))
}

/// Metrics over one subset of columns; relative error and correlation may be
/// undefined on a slice (constant truth) without failing the whole report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSlice {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    pub rse: Option<f64>,
    pub corr: Option<f64>,
    pub corr_skipped: usize,
}

fn slice_metrics(y: &Matrix, yhat: &Matrix, cols: &[usize]) -> MetricSlice {
    let ys = gather_cols(y, cols);
    let ps = gather_cols(yhat, cols);
    let (mape, mape_skipped) = mape(&ys, &ps);
    let (corr_val, corr_skipped) = match corr(&ys, &ps) {
        Ok((c, skipped)) => (Some(c), skipped),
        Err(_) => (None, cols.len()),
    };
    MetricSlice {
        rmse: rmse(&ys, &ps),
        mae: mae(&ys, &ps),
        mape,
        mape_skipped,
        rse: rse(&ys, &ps).ok(),
        corr: corr_val,
        corr_skipped,
    }
}

fn gather_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), cols.len(), |i, j| m.get(i, cols[j]))
}

/// Full metric report with per-horizon-step and per-feature breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    pub rse: f64,
    pub corr: f64,
    pub corr_skipped: usize,
    /// One slice per horizon step, in forecast order.
    pub per_horizon: Vec<MetricSlice>,
    /// One slice per target feature, pooled across horizon steps.
    pub per_feature: Vec<MetricSlice>,
}

/// Computes every metric on matrices laid out step-major: column `j*s + k`
/// holds horizon step `j` of target feature `k`.
pub fn report(y: &Matrix, yhat: &Matrix, h: usize, s: usize) -> Result<MetricReport, MetricsError> {
    assert_eq!(y.shape(), yhat.shape());
    assert_eq!(y.cols(), h * s, "column count must equal h * s");
    let (mape_val, mape_skipped) = mape(y, yhat);
    let (corr_val, corr_skipped) = corr(y, yhat)?;
    let per_horizon = (0..h)
        .map(|j| {
            let cols: Vec<usize> = (0..s).map(|k| j * s + k).collect();
            slice_metrics(y, yhat, &cols)
        })
        .collect();
    let per_feature = (0..s)
        .map(|k| {
            let cols: Vec<usize> = (0..h).map(|j| j * s + k).collect();
            slice_metrics(y, yhat, &cols)
        })
        .collect();
    Ok(MetricReport {
        rmse: rmse(y, yhat),
        mae: mae(y, yhat),
        mape: mape_val,
        mape_skipped,
        rse: rse(y, yhat)?,
        corr: corr_val,
        corr_skipped,
        per_horizon,
        per_feature,
    })
}
