//! Sliding-window dataset construction with train-fitted scaling and
//! per-window target differencing.

use super::batches::Split;
use super::frame::SeriesFrame;
use super::DataError;
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Per-feature min-max state fitted on training rows. A feature whose
/// training range is empty (max equals min) is degenerate: its scaled value
/// is defined as 0 and inversion returns the constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl FeatureScaler {
    fn from_min_max(mins: Vec<f64>, maxs: Vec<f64>) -> Self {
        assert_eq!(mins.len(), maxs.len());
        FeatureScaler { mins, maxs }
    }

    /// Fits per-column ranges over the first `fit_rows` rows of `values`.
    fn fit(values: &Matrix, fit_rows: usize) -> Self {
        assert!(fit_rows >= 1 && fit_rows <= values.rows());
        let d = values.cols();
        let mut mins = vec![f64::INFINITY; d];
        let mut maxs = vec![f64::NEG_INFINITY; d];
        for i in 0..fit_rows {
            for (k, &v) in values.row(i).iter().enumerate() {
                mins[k] = mins[k].min(v);
                maxs[k] = maxs[k].max(v);
            }
        }
        FeatureScaler { mins, maxs }
    }

    pub fn len(&self) -> usize {
        self.mins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mins.is_empty()
    }

    pub fn is_degenerate(&self, feature: usize) -> bool {
        self.maxs[feature] == self.mins[feature]
    }

    /// Maps a raw value into the fitted `[0, 1]` range of the feature.
    pub fn apply(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if hi == lo {
            0.0
        } else {
            (v - lo) / (hi - lo)
        }
    }

    /// Inverse of [`FeatureScaler::apply`].
    pub fn invert(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = (self.mins[feature], self.maxs[feature]);
        if hi == lo {
            lo
        } else {
            lo + v * (hi - lo)
        }
    }
}

/// Chronological split fractions: `(train, test)` or
/// `(train, validation, test)`, positive and summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    fractions: Vec<f64>,
}

impl SplitSpec {
    pub fn new(fractions: &[f64]) -> Result<Self, DataError> {
        if fractions.len() != 2 && fractions.len() != 3 {
            return Err(DataError::InvalidSplits {
                detail: format!("expected 2 or 3 fractions, got {}", fractions.len()),
            });
        }
        if fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(DataError::InvalidSplits {
                detail: "all fractions must be positive".into(),
            });
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplits {
                detail: format!("fractions sum to {sum}, expected 1"),
            });
        }
        Ok(SplitSpec {
            fractions: fractions.to_vec(),
        })
    }

    /// The default 60/20/20 chronological split.
    pub fn three_way_default() -> Self {
        SplitSpec {
            fractions: vec![0.6, 0.2, 0.2],
        }
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    /// Window counts `(train, validation, test)`; validation is 0 for a
    /// two-way split. Each named split must receive at least one window.
    pub fn counts(&self, n_windows: usize) -> Result<(usize, usize, usize), DataError> {
        let round = |f: f64| (f * n_windows as f64).round() as usize;
        let (n_tr, n_val) = match self.fractions.len() {
            2 => (round(self.fractions[0]), 0),
            _ => (round(self.fractions[0]), round(self.fractions[1])),
        };
        let used = n_tr + n_val;
        if n_tr == 0 || used >= n_windows || (self.fractions.len() == 3 && n_val == 0) {
            return Err(DataError::InvalidSplits {
                detail: format!(
                    "{n_windows} windows leave an empty split under {:?}",
                    self.fractions
                ),
            });
        }
        Ok((n_tr, n_val, n_windows - used))
    }
}

/// Sliding-window dataset over one series.
///
/// Row `i` of `inputs` is frame rows `[i, i+l)` flattened row-major; row `i`
/// of `targets` holds the `s` target features at horizon offsets
/// `l..l+h`, laid out step-major (column `j*s + k` is horizon step `j` of
/// target feature `k`). `inputs` and `targets` are in model space (scaled
/// and/or differenced per the flags); `targets_raw` keeps the untransformed
/// levels and `refs` the last-input-row values used for differencing.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub targets_raw: Matrix,
    pub refs: Matrix,
    pub l: usize,
    pub h: usize,
    pub s: usize,
    /// Feature count of the source frame.
    pub d: usize,
    pub target_features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub scale: bool,
    pub difference: bool,
    pub input_scaler: Option<FeatureScaler>,
    pub target_scaler: Option<FeatureScaler>,
    n_train: usize,
    n_validation: usize,
    n_test: usize,
    /// Non-fatal observations (degenerate features) recorded at build time.
    pub warnings: Vec<String>,
}

impl WindowedDataset {
    /// Total number of windows.
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.l * self.d
    }

    pub fn target_dim(&self) -> usize {
        self.h * self.s
    }

    pub fn train_rows(&self) -> Range<usize> {
        0..self.n_train
    }

    pub fn validation_rows(&self) -> Range<usize> {
        self.n_train..self.n_train + self.n_validation
    }

    pub fn test_rows(&self) -> Range<usize> {
        self.n_train + self.n_validation..self.len()
    }

    pub fn rows_of(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train_rows(),
            Split::Validation => self.validation_rows(),
            Split::Test => self.test_rows(),
        }
    }

    /// Maps model-space target values for the given window rows back to raw
    /// levels (unscale, then undifference).
    pub fn invert_targets(&self, rows: &[usize], values: &Matrix) -> Matrix {
        assert_eq!(values.rows(), rows.len());
        assert_eq!(values.cols(), self.target_dim());
        Matrix::from_fn(rows.len(), self.target_dim(), |r, col| {
            let k = col % self.s;
            let mut v = values.get(r, col);
            if let Some(ts) = &self.target_scaler {
                v = ts.invert(k, v);
            }
            if self.difference {
                v += self.refs.get(rows[r], k);
            }
            v
        })
    }

    /// Maps raw target levels through the input scaler of each target
    /// feature (the transform the source series itself receives). Identity
    /// when scaling is off.
    pub fn scale_levels(&self, levels: &Matrix) -> Matrix {
        assert_eq!(levels.cols() % self.s, 0);
        match &self.input_scaler {
            None => levels.clone(),
            Some(scaler) => Matrix::from_fn(levels.rows(), levels.cols(), |r, col| {
                scaler.apply(self.target_features[col % self.s], levels.get(r, col))
            }),
        }
    }

    /// Raw-level persistence baseline: each horizon step predicts the last
    /// observed value of the target feature.
    pub fn persistence_raw(&self, rows: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), self.target_dim(), |r, col| {
            self.refs.get(rows[r], col % self.s)
        })
    }
}

/// Slides an `l`-step look-back / `h`-step horizon window over the frame.
///
/// Produces `N = n - l - h + 1` windows split chronologically
/// train → validation → test. When `scale` is set, a per-feature `[0, 1]`
/// min-max scaler is fitted on exactly the frame rows touched by training
/// windows and applied everywhere; validation and test entries may leave
/// `[0, 1]`. When `difference` is set, each target value is stored relative
/// to the last input row of its window and the references are retained for
/// inversion. Differencing is applied before scaling, and differenced
/// targets get their own scaler fitted on training windows.
pub fn make_windows(
    frame: &SeriesFrame,
    l: usize,
    h: usize,
    target_features: &[usize],
    scale: bool,
    difference: bool,
    splits: &SplitSpec,
) -> Result<WindowedDataset, DataError> {
    assert!(l >= 1 && h >= 1, "look-back and horizon must be at least 1");
    let n = frame.len();
    let d = frame.dim();
    if l + h > n {
        return Err(DataError::WindowTooLarge { l, h, n });
    }
    if target_features.is_empty() {
        return Err(DataError::InvalidTargets {
            detail: "at least one target feature is required".into(),
        });
    }
    for (i, &k) in target_features.iter().enumerate() {
        if k >= d {
            return Err(DataError::InvalidTargets {
                detail: format!("feature index {k} out of range for {d} features"),
            });
        }
        if target_features[..i].contains(&k) {
            return Err(DataError::InvalidTargets {
                detail: format!("feature index {k} listed twice"),
            });
        }
    }

    let s = target_features.len();
    let n_windows = n - l - h + 1;
    let (n_train, n_validation, n_test) = splits.counts(n_windows)?;

    // Frame rows visible to training windows: inputs and targets of windows
    // [0, n_train). The last training window starts at n_train - 1 and ends
    // (inclusive) at n_train - 1 + l + h - 1.
    let fit_end = (n_train - 1) + l + h;
    let mut warnings = Vec::new();

    let input_scaler = scale.then(|| {
        let scaler = FeatureScaler::fit(&frame.values, fit_end);
        for k in 0..d {
            if scaler.is_degenerate(k) {
                let msg = format!(
                    "feature {:?} is constant over training rows; its scaled value is 0",
                    frame.feature_names[k]
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        scaler
    });

    let mut raw_inputs = Matrix::zeros(n_windows, l * d);
    for i in 0..n_windows {
        for t in 0..l {
            let src = frame.values.row(i + t);
            raw_inputs.row_mut(i)[t * d..(t + 1) * d].copy_from_slice(src);
        }
    }

    let refs = Matrix::from_fn(n_windows, s, |i, k| {
        frame.values.get(i + l - 1, target_features[k])
    });
    let targets_raw = Matrix::from_fn(n_windows, h * s, |i, col| {
        let (step, k) = (col / s, col % s);
        frame.values.get(i + l + step, target_features[k])
    });

    let mut targets = if difference {
        Matrix::from_fn(n_windows, h * s, |i, col| {
            targets_raw.get(i, col) - refs.get(i, col % s)
        })
    } else {
        targets_raw.clone()
    };

    let target_scaler = scale.then(|| {
        if difference {
            // Range of differenced training targets, per target feature,
            // pooled across horizon steps.
            let mut mins = vec![f64::INFINITY; s];
            let mut maxs = vec![f64::NEG_INFINITY; s];
            for i in 0..n_train {
                for col in 0..h * s {
                    let v = targets.get(i, col);
                    mins[col % s] = mins[col % s].min(v);
                    maxs[col % s] = maxs[col % s].max(v);
                }
            }
            let scaler = FeatureScaler::from_min_max(mins, maxs);
            for (k, &feat) in target_features.iter().enumerate() {
                if scaler.is_degenerate(k) {
                    let msg = format!(
                        "differenced target {:?} is constant over training windows; \
                         its scaled value is 0",
                        frame.feature_names[feat]
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
            }
            scaler
        } else {
            // Undifferenced targets share the series' own transform.
            let input = input_scaler.as_ref().expect("scale is on");
            FeatureScaler::from_min_max(
                target_features.iter().map(|&k| input.mins[k]).collect(),
                target_features.iter().map(|&k| input.maxs[k]).collect(),
            )
        }
    });

    let inputs = match &input_scaler {
        None => raw_inputs,
        Some(scaler) => Matrix::from_fn(n_windows, l * d, |i, col| {
            scaler.apply(col % d, raw_inputs.get(i, col))
        }),
    };
    if let Some(ts) = &target_scaler {
        targets = Matrix::from_fn(n_windows, h * s, |i, col| {
            ts.apply(col % s, targets.get(i, col))
        });
    }

    Ok(WindowedDataset {
        inputs,
        targets,
        targets_raw,
        refs,
        l,
        h,
        s,
        d,
        target_features: target_features.to_vec(),
        feature_names: frame.feature_names.clone(),
        scale,
        difference,
        input_scaler,
        target_scaler,
        n_train,
        n_validation,
        n_test,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain_frame(values: Matrix) -> SeriesFrame {
        let names = (0..values.cols()).map(|i| format!("f{i}")).collect();
        SeriesFrame {
            values,
            timestamps: None,
            feature_names: names,
        }
    }

    fn random_frame(n: usize, d: usize, seed: u64) -> SeriesFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        plain_frame(Matrix::from_fn(n, d, |_, _| rng.random_range(-3.0..5.0)))
    }

    #[test]
    fn window_count_formula() {
        let frame = random_frame(10, 2, 1);
        let ds = make_windows(
            &frame,
            3,
            2,
            &[0],
            false,
            false,
            &SplitSpec::new(&[0.5, 0.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(ds.len(), 6);
    }

    #[test]
    fn inputs_are_flattened_frame_rows() {
        let frame = random_frame(12, 3, 2);
        let ds = make_windows(
            &frame,
            4,
            1,
            &[1],
            false,
            false,
            &SplitSpec::three_way_default(),
        )
        .unwrap();
        for i in 0..ds.len() {
            for t in 0..4 {
                for k in 0..3 {
                    assert_eq!(ds.inputs.get(i, t * 3 + k), frame.values.get(i + t, k));
                }
            }
        }
    }

    #[test]
    fn ramp_with_differencing_gives_unit_targets() {
        let frame = plain_frame(Matrix::from_fn(10, 1, |i, _| i as f64));
        let ds = make_windows(
            &frame,
            2,
            1,
            &[0],
            false,
            true,
            &SplitSpec::new(&[0.5, 0.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(ds.len(), 8);
        for i in 0..8 {
            assert_eq!(ds.targets.get(i, 0), 1.0);
            assert_eq!(ds.refs.get(i, 0), (i + 1) as f64);
        }
    }

    #[test]
    fn constant_series_with_differencing_gives_zero_targets() {
        let frame = plain_frame(Matrix::filled(12, 2, 3.25));
        let ds = make_windows(
            &frame,
            3,
            2,
            &[0, 1],
            false,
            true,
            &SplitSpec::new(&[0.5, 0.5]).unwrap(),
        )
        .unwrap();
        for i in 0..ds.len() {
            for c in 0..ds.target_dim() {
                assert_eq!(ds.targets.get(i, c), 0.0);
            }
        }
    }

    #[test]
    fn target_layout_is_step_major() {
        let frame = random_frame(15, 2, 3);
        let ds = make_windows(
            &frame,
            3,
            2,
            &[0, 1],
            false,
            false,
            &SplitSpec::three_way_default(),
        )
        .unwrap();
        for i in 0..ds.len() {
            for step in 0..2 {
                for k in 0..2 {
                    assert_eq!(
                        ds.targets.get(i, step * 2 + k),
                        frame.values.get(i + 3 + step, k)
                    );
                }
            }
        }
    }

    #[test]
    fn training_inputs_scale_into_unit_interval() {
        let frame = random_frame(60, 3, 4);
        let ds = make_windows(
            &frame,
            5,
            2,
            &[0],
            true,
            false,
            &SplitSpec::three_way_default(),
        )
        .unwrap();
        for i in ds.train_rows() {
            for c in 0..ds.input_dim() {
                let v = ds.inputs.get(i, c);
                assert!((0.0..=1.0).contains(&v), "train entry {v} outside [0,1]");
            }
        }
    }

    #[test]
    fn test_inputs_may_leave_unit_interval() {
        // Strictly increasing series: the test region exceeds the training max.
        let frame = plain_frame(Matrix::from_fn(40, 1, |i, _| i as f64));
        let ds = make_windows(
            &frame,
            3,
            1,
            &[0],
            true,
            false,
            &SplitSpec::three_way_default(),
        )
        .unwrap();
        let above = ds
            .test_rows()
            .any(|i| (0..ds.input_dim()).any(|c| ds.inputs.get(i, c) > 1.0));
        assert!(above, "an increasing series must exceed the fitted range");
    }

    #[test]
    fn degenerate_feature_scales_to_zero_with_warning() {
        let mut values = random_frame(30, 2, 5).values;
        for i in 0..30 {
            values.set(i, 1, 7.0);
        }
        let frame = plain_frame(values);
        let ds = make_windows(
            &frame,
            2,
            1,
            &[0],
            true,
            false,
            &SplitSpec::three_way_default(),
        )
        .unwrap();
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].contains("f1"));
        for i in 0..ds.len() {
            assert_eq!(ds.inputs.get(i, 1), 0.0);
            assert_eq!(ds.inputs.get(i, 3), 0.0);
        }
    }

    #[test]
    fn inversion_recovers_raw_targets() {
        for (scale, difference) in [(false, false), (true, false), (false, true), (true, true)] {
            let frame = random_frame(80, 3, 6);
            let ds = make_windows(
                &frame,
                6,
                3,
                &[0, 2],
                scale,
                difference,
                &SplitSpec::three_way_default(),
            )
            .unwrap();
            let rows: Vec<usize> = (0..ds.len()).collect();
            let recovered = ds.invert_targets(&rows, &ds.targets);
            let err = recovered.sub(&ds.targets_raw).max_abs();
            assert!(
                err <= 1e-10,
                "scale={scale} difference={difference}: inversion error {err}"
            );
        }
    }

    #[test]
    fn scaler_ignores_rows_beyond_training_reach() {
        let frame = random_frame(50, 2, 7);
        let splits = SplitSpec::three_way_default();
        let base = make_windows(&frame, 4, 2, &[0], true, true, &splits).unwrap();

        // Perturbing rows no training window touches must not move anything
        // fitted or produced for the training split.
        let fit_end = (base.train_rows().end - 1) + 4 + 2;
        let mut tampered = frame.clone();
        for i in fit_end..50 {
            for k in 0..2 {
                tampered.values.set(i, k, 99.0 + i as f64 + k as f64);
            }
        }
        let moved = make_windows(&tampered, 4, 2, &[0], true, true, &splits).unwrap();
        assert_eq!(base.input_scaler, moved.input_scaler);
        assert_eq!(base.target_scaler, moved.target_scaler);
        let train: Vec<usize> = base.train_rows().collect();
        assert_eq!(
            base.inputs.gather_rows(&train),
            moved.inputs.gather_rows(&train)
        );
        assert_eq!(
            base.targets.gather_rows(&train),
            moved.targets.gather_rows(&train)
        );
    }

    #[test]
    fn split_counts_default_and_two_way() {
        let spec = SplitSpec::three_way_default();
        assert_eq!(spec.counts(1000).unwrap(), (600, 200, 200));
        let two = SplitSpec::new(&[0.6, 0.4]).unwrap();
        assert_eq!(two.counts(1000).unwrap(), (600, 0, 400));
        assert_eq!(two.counts(5).unwrap(), (3, 0, 2));
    }

    #[test]
    fn invalid_splits_are_rejected() {
        assert!(SplitSpec::new(&[0.9, 0.2]).is_err());
        assert!(SplitSpec::new(&[1.0]).is_err());
        assert!(SplitSpec::new(&[0.6, -0.1, 0.5]).is_err());
        // Too few windows to populate every split.
        let spec = SplitSpec::three_way_default();
        assert!(spec.counts(2).is_err());
    }

    #[test]
    fn window_too_large_and_bad_targets_error() {
        let frame = random_frame(10, 2, 8);
        let splits = SplitSpec::new(&[0.5, 0.5]).unwrap();
        assert!(matches!(
            make_windows(&frame, 8, 3, &[0], false, false, &splits),
            Err(DataError::WindowTooLarge { .. })
        ));
        assert!(matches!(
            make_windows(&frame, 2, 1, &[5], false, false, &splits),
            Err(DataError::InvalidTargets { .. })
        ));
        assert!(matches!(
            make_windows(&frame, 2, 1, &[0, 0], false, false, &splits),
            Err(DataError::InvalidTargets { .. })
        ));
    }

    #[test]
    fn persistence_and_level_scaling() {
        let frame = random_frame(40, 2, 9);
        let ds = make_windows(
            &frame,
            3,
            2,
            &[1],
            true,
            true,
            &SplitSpec::three_way_default(),
        )
        .unwrap();
        let rows: Vec<usize> = ds.test_rows().collect();
        let persistence = ds.persistence_raw(&rows);
        for (r, &i) in rows.iter().enumerate() {
            for c in 0..ds.target_dim() {
                assert_eq!(persistence.get(r, c), frame.values.get(i + 3 - 1, 1));
            }
        }
        let scaled = ds.scale_levels(&persistence);
        let scaler = ds.input_scaler.as_ref().unwrap();
        for (r, _) in rows.iter().enumerate() {
            for c in 0..ds.target_dim() {
                assert_eq!(scaled.get(r, c), scaler.apply(1, persistence.get(r, c)));
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let frame = random_frame(70, 3, 10);
        let a = make_windows(&frame, 5, 2, &[0, 1], true, true, &SplitSpec::three_way_default())
            .unwrap();
        let b = make_windows(&frame, 5, 2, &[0, 1], true, true, &SplitSpec::three_way_default())
            .unwrap();
        assert_eq!(a, b);
    }
}
