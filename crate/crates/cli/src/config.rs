//! Experiment configuration: the TOML document, its validation, and the
//! resolution of defaults.
//!
//! A configuration has four blocks — `dataset`, `model`, `training`, and
//! optionally `grid` and `output` — whose field names match the structs here
//! one to one. Validation collects *every* problem it can find into a single
//! report instead of stopping at the first, so one edit-and-rerun cycle fixes
//! a config rather than one field.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kflow_core::data::{CalendarField, GapPolicy, SplitSpec};
use kflow_core::kernel_flow::{
    KfLossKind, DEFAULT_KF_LEARNING_RATE, DEFAULT_SUPPORT_CAP,
};
use kflow_core::kernels::{KernelFamily, KernelParams};
use kflow_core::kfreg::{DEFAULT_NN_LEARNING_RATE, KF_LAYER_JITTER_REL};
use kflow_core::linalg::DEFAULT_JITTER_REL;
use kflow_core::nn::{DenseLayerSpec, LstmLayerSpec, OptimizerKind, DEFAULT_CLIP_NORM};
use kflow_core::record::MetricSpace;

use crate::CliError;

/// Default cap on grid cells; larger grids need `--force-grid`.
pub const DEFAULT_MAX_CELLS: usize = 64;

/// Default early-stopping patience when neither `patience` nor
/// `fixed_epochs` is set.
pub const DEFAULT_PATIENCE: usize = 20;

/// A complete experiment description, straight from one TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Where the series comes from and how it becomes a windowed dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// CSV file with the series; exactly one of `path` and `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Built-in generated series; exactly one of `path` and `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Look-back window length.
    pub l: usize,
    /// Forecast horizon.
    pub h: usize,
    /// Target features, by header name or zero-based index.
    pub targets: Vec<TargetRef>,
    /// Chronological split fractions: `[train, test]` or
    /// `[train, validation, test]`.
    #[serde(default = "default_splits")]
    pub splits: Vec<f64>,
    /// Min-max scale each feature to `[0, 1]`, fitted on training rows.
    #[serde(default = "default_true")]
    pub scale: bool,
    /// Store targets relative to the last input value of their window.
    #[serde(default)]
    pub difference: bool,
    /// Calendar fields appended as sin/cos feature pairs; needs timestamps.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cyclical: Vec<CalendarField>,
    /// Whether the CSV's first line names the features.
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Header of the timestamp column; auto-detected as a leading
    /// `timestamp` column when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_column: Option<String>,
    /// What to do with rows containing unparseable cells.
    #[serde(default = "default_gap_policy")]
    pub gap_policy: GapPolicy,
}

/// A target feature referenced by name or by index.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetRef {
    Index(usize),
    Name(String),
}

impl fmt::Display for TargetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetRef::Index(i) => write!(f, "{i}"),
            TargetRef::Name(n) => write!(f, "{n:?}"),
        }
    }
}

/// A generated series standing in for a file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    /// Number of time stamps.
    pub n: usize,
    /// Feature count; only the exchange-rate surrogate supports more than 1.
    #[serde(default = "default_one")]
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

/// The built-in generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two incommensurate sinusoids plus noise.
    NoisyWave,
    /// Random-walk-with-structure surrogate for daily exchange rates.
    FxLike,
}

/// Which model trains, with its hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// The learned-kernel Kriging forecaster.
    Kf {
        /// Training objective: `rho` (interpolation-degradation ratio) or
        /// `l2` (half-batch reconstruction error).
        #[serde(default = "default_loss")]
        loss: KfLossKind,
        #[serde(default = "default_family")]
        family: KernelFamily,
        /// Initial shared log-lengthscale; the median pairwise distance of
        /// the training inputs when unset.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_lengthscale: Option<f64>,
        #[serde(default)]
        log_signal_variance: f64,
        /// Rational-quadratic shape parameter; required for that family.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_alpha: Option<f64>,
        /// Relative diagonal jitter for gram factorizations.
        #[serde(default = "default_kf_jitter")]
        jitter_rel: f64,
        /// Largest training subset kept as the interpolation support.
        #[serde(default = "default_support_cap")]
        support_cap: usize,
    },
    /// The stacked LSTM regressor, optionally kernel-regularized.
    Lstm {
        lstm_layers: Vec<LstmLayerSpec>,
        /// Hidden dense layers; the linear output layer sized by the
        /// dataset's horizon and targets is appended automatically.
        #[serde(default)]
        dense_layers: Vec<DenseLayerSpec>,
        /// Penalty weights, one per layer with `kf_attached`.
        #[serde(default)]
        kf_weights: Vec<f64>,
        /// Pass the last LSTM layer's outputs through ReLU.
        #[serde(default)]
        relu_last_lstm: bool,
        /// Tap attached layers at every time step instead of only the last.
        #[serde(default)]
        kf_all_steps: bool,
        /// Penalties compare kernel reconstructions against predictions
        /// instead of targets.
        #[serde(default)]
        compare_predictions: bool,
        /// Relative jitter for the penalty's half-batch solves.
        #[serde(default = "default_layer_jitter")]
        kf_jitter_rel: f64,
    },
}

impl ModelConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::Kf { .. } => "kf",
            ModelConfig::Lstm { .. } => "lstm",
        }
    }
}

/// Optimization and evaluation settings shared by both model kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Minibatch size; must be even (every batch splits into halves).
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerName,
    /// Defaults to 1e-2 for the kernel forecaster and 1e-3 for the LSTM.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without validation improvement before stopping; defaults to
    /// 20 unless `fixed_epochs` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    /// Validation-RMSE drop below this does not count as improvement.
    #[serde(default)]
    pub min_delta: f64,
    /// Run exactly `epochs` epochs and keep the final parameters: no early
    /// stopping, no best-checkpoint restore.
    #[serde(default)]
    pub fixed_epochs: bool,
    /// Global gradient-norm ceiling for LSTM training; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Space for recorded metrics: `raw` levels or `scaled_levels`.
    #[serde(default = "default_space")]
    pub metric_space: MetricSpace,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            learning_rate: None,
            seed: 0,
            patience: None,
            min_delta: 0.0,
            fixed_epochs: false,
            clip_norm: default_clip(),
            metric_space: default_space(),
        }
    }
}

impl TrainingConfig {
    /// The optimizer with the configured or model-default learning rate.
    pub fn optimizer_kind(&self, model: &ModelConfig) -> OptimizerKind {
        let lr = self.learning_rate.unwrap_or(match model {
            ModelConfig::Kf { .. } => DEFAULT_KF_LEARNING_RATE,
            ModelConfig::Lstm { .. } => DEFAULT_NN_LEARNING_RATE,
        });
        match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(lr),
            OptimizerName::Sgd => OptimizerKind::sgd(lr),
        }
    }

    /// Effective patience: `None` in fixed-epoch mode, otherwise the
    /// configured value or the default of 20.
    pub fn effective_patience(&self) -> Option<usize> {
        if self.fixed_epochs {
            None
        } else {
            Some(self.patience.unwrap_or(DEFAULT_PATIENCE))
        }
    }

    pub fn clip_option(&self) -> Option<f64> {
        (self.clip_norm > 0.0).then_some(self.clip_norm)
    }
}

/// Optimizer selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

/// Lists to sweep as a Cartesian product; empty lists are left out of the
/// product. Cells nest in the field order below, innermost last.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Look-back lengths; rebuilds the dataset per value.
    #[serde(default)]
    pub l: Vec<usize>,
    /// LSTM units, applied to every recurrent layer.
    #[serde(default)]
    pub units: Vec<usize>,
    /// Dropout rates, applied to every recurrent layer.
    #[serde(default)]
    pub dropout: Vec<f64>,
    /// Penalty weights; attaches the last LSTM layer when the base model
    /// has no attachment.
    #[serde(default)]
    pub lambda: Vec<f64>,
    /// Refuse grids with more cells than this unless `--force-grid`.
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
}

impl GridConfig {
    /// Number of cells in the Cartesian product.
    pub fn cell_count(&self) -> usize {
        [
            self.l.len(),
            self.units.len(),
            self.dropout.len(),
            self.lambda.len(),
        ]
        .iter()
        .filter(|&&n| n > 0)
        .product()
    }
}

/// Where run directories are created.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_out_dir(),
        }
    }
}

fn default_splits() -> Vec<f64> {
    vec![0.6, 0.2, 0.2]
}
fn default_true() -> bool {
    true
}
fn default_one() -> usize {
    1
}
fn default_gap_policy() -> GapPolicy {
    GapPolicy::Reject
}
fn default_loss() -> KfLossKind {
    KfLossKind::Rho
}
fn default_family() -> KernelFamily {
    KernelFamily::Rbf
}
fn default_kf_jitter() -> f64 {
    DEFAULT_JITTER_REL
}
fn default_support_cap() -> usize {
    DEFAULT_SUPPORT_CAP
}
fn default_layer_jitter() -> f64 {
    KF_LAYER_JITTER_REL
}
fn default_epochs() -> usize {
    100
}
fn default_batch() -> usize {
    32
}
fn default_optimizer() -> OptimizerName {
    OptimizerName::Adam
}
fn default_clip() -> f64 {
    DEFAULT_CLIP_NORM
}
fn default_space() -> MetricSpace {
    MetricSpace::Raw
}
fn default_max_cells() -> usize {
    DEFAULT_MAX_CELLS
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Reads and parses a config file, without validating it.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(vec![format!("cannot read config {}: {e}", path.display())])
    })?;
    toml::from_str(&text).map_err(|e| {
        CliError::Config(vec![format!("cannot parse config {}: {e}", path.display())])
    })
}

/// Checks everything checkable before any compute and returns the full list
/// of problems. `grid_mode` additionally validates the grid block; `force`
/// lifts the cell cap.
pub fn validate(config: &ExperimentConfig, grid_mode: bool, force: bool) -> Vec<String> {
    let mut errors = Vec::new();
    validate_dataset(&config.dataset, &mut errors);
    validate_model(&config.model, &mut errors);
    validate_training(&config.training, &mut errors);
    if grid_mode {
        validate_grid(config, force, &mut errors);
    }
    errors
}

fn validate_dataset(ds: &DatasetConfig, errors: &mut Vec<String>) {
    match (&ds.path, &ds.synthetic) {
        (None, None) => {
            errors.push("dataset: exactly one of `path` and `synthetic` is required".into())
        }
        (Some(_), Some(_)) => {
            errors.push("dataset: `path` and `synthetic` are mutually exclusive".into())
        }
        (Some(path), None) => {
            if !path.is_file() {
                errors.push(format!("dataset: file {} does not exist", path.display()));
            }
        }
        (None, Some(synth)) => {
            if synth.n < 2 {
                errors.push(format!(
                    "dataset: synthetic series needs at least 2 stamps, got {}",
                    synth.n
                ));
            } else if ds.l >= 1 && ds.h >= 1 && synth.n < ds.l + ds.h {
                errors.push(format!(
                    "dataset: synthetic length {} cannot hold one l={} h={} window",
                    synth.n, ds.l, ds.h
                ));
            }
            if synth.d == 0 {
                errors.push("dataset: synthetic feature count d must be positive".into());
            }
            if synth.kind == SyntheticKind::NoisyWave && synth.d != 1 {
                errors.push(format!(
                    "dataset: the noisy_wave generator is univariate; d = {} is not available",
                    synth.d
                ));
            }
            for t in &ds.targets {
                if let TargetRef::Index(i) = t {
                    if *i >= synth.d {
                        errors.push(format!(
                            "dataset: target index {i} out of range for {} synthetic features",
                            synth.d
                        ));
                    }
                }
                if let TargetRef::Name(n) = t {
                    errors.push(format!(
                        "dataset: synthetic features have no headers; target {n:?} must be an index"
                    ));
                }
            }
            if !ds.cyclical.is_empty() {
                errors.push("dataset: synthetic series carry no timestamps for cyclical features".into());
            }
        }
    }
    if ds.l == 0 {
        errors.push("dataset: look-back l must be at least 1".into());
    }
    if ds.h == 0 {
        errors.push("dataset: horizon h must be at least 1".into());
    }
    if ds.targets.is_empty() {
        errors.push("dataset: at least one target feature is required".into());
    }
    if let Err(e) = SplitSpec::new(&ds.splits) {
        errors.push(format!("dataset: splits: {e}"));
    }
    if !ds.has_header {
        if ds.timestamp_column.is_some() {
            errors.push("dataset: a named timestamp column requires a header row".into());
        }
        if !ds.cyclical.is_empty() {
            errors.push("dataset: cyclical features need timestamps, which need a header row".into());
        }
        for t in &ds.targets {
            if let TargetRef::Name(n) = t {
                errors.push(format!(
                    "dataset: headerless files have no feature names; target {n:?} must be an index"
                ));
            }
        }
    }
}

fn validate_model(model: &ModelConfig, errors: &mut Vec<String>) {
    match model {
        ModelConfig::Kf {
            family,
            log_alpha,
            jitter_rel,
            support_cap,
            ..
        } => {
            match family {
                KernelFamily::RationalQuadratic => {
                    if log_alpha.is_none() {
                        errors.push(
                            "model: the rational_quadratic family requires log_alpha".into(),
                        );
                    }
                }
                KernelFamily::Rbf => {
                    if log_alpha.is_some() {
                        errors.push("model: log_alpha only applies to rational_quadratic".into());
                    }
                }
            }
            if !(jitter_rel.is_finite() && *jitter_rel > 0.0) {
                errors.push(format!("model: jitter_rel {jitter_rel} must be positive"));
            }
            if *support_cap == 0 {
                errors.push("model: support_cap must be at least 1".into());
            }
        }
        ModelConfig::Lstm {
            lstm_layers,
            dense_layers,
            kf_weights,
            kf_jitter_rel,
            ..
        } => {
            if lstm_layers.is_empty() {
                errors.push("model: at least one LSTM layer is required".into());
            }
            for (i, layer) in lstm_layers.iter().enumerate() {
                if layer.units == 0 {
                    errors.push(format!("model: lstm layer {i} has zero units"));
                }
                if !(0.0..1.0).contains(&layer.dropout_rate) {
                    errors.push(format!(
                        "model: lstm layer {i} dropout_rate {} outside [0, 1)",
                        layer.dropout_rate
                    ));
                }
            }
            for (i, layer) in dense_layers.iter().enumerate() {
                if layer.units == 0 {
                    errors.push(format!("model: dense layer {i} has zero units"));
                }
            }
            let attached = lstm_layers.iter().filter(|l| l.kf_attached).count();
            if kf_weights.len() != attached {
                errors.push(format!(
                    "model: {} kf_weights for {attached} kf_attached layers",
                    kf_weights.len()
                ));
            }
            for (i, w) in kf_weights.iter().enumerate() {
                if !(w.is_finite() && *w >= 0.0) {
                    errors.push(format!(
                        "model: kf_weights[{i}] = {w} must be finite and non-negative"
                    ));
                }
            }
            if !(kf_jitter_rel.is_finite() && *kf_jitter_rel > 0.0) {
                errors.push(format!(
                    "model: kf_jitter_rel {kf_jitter_rel} must be positive"
                ));
            }
        }
    }
}

fn validate_training(tr: &TrainingConfig, errors: &mut Vec<String>) {
    if tr.batch_size < 2 || tr.batch_size % 2 != 0 {
        errors.push(format!(
            "training: batch_size {} must be even and at least 2",
            tr.batch_size
        ));
    }
    if let Some(lr) = tr.learning_rate {
        if !(lr.is_finite() && lr > 0.0) {
            errors.push(format!("training: learning_rate {lr} must be positive"));
        }
    }
    if tr.fixed_epochs && tr.patience.is_some() {
        errors.push("training: `fixed_epochs` and `patience` are mutually exclusive".into());
    }
    if !(tr.min_delta.is_finite() && tr.min_delta >= 0.0) {
        errors.push(format!(
            "training: min_delta {} must be finite and non-negative",
            tr.min_delta
        ));
    }
    if !tr.clip_norm.is_finite() || tr.clip_norm < 0.0 {
        errors.push(format!(
            "training: clip_norm {} must be non-negative (0 disables clipping)",
            tr.clip_norm
        ));
    }
}

fn validate_grid(config: &ExperimentConfig, force: bool, errors: &mut Vec<String>) {
    let Some(grid) = &config.grid else {
        errors.push("grid: the config has no [grid] block".into());
        return;
    };
    if grid.l.is_empty()
        && grid.units.is_empty()
        && grid.dropout.is_empty()
        && grid.lambda.is_empty()
    {
        errors.push("grid: every sweep list is empty".into());
        return;
    }
    let cells = grid.cell_count();
    log::info!("grid: {} cells", cells);
    if cells > grid.max_cells && !force {
        errors.push(format!(
            "grid: {cells} cells exceed the cap of {}; pass --force-grid to run anyway",
            grid.max_cells
        ));
    }
    for (i, v) in grid.l.iter().enumerate() {
        if *v == 0 {
            errors.push(format!("grid: l[{i}] must be at least 1"));
        }
    }
    for (i, v) in grid.units.iter().enumerate() {
        if *v == 0 {
            errors.push(format!("grid: units[{i}] must be at least 1"));
        }
    }
    for (i, v) in grid.dropout.iter().enumerate() {
        if !(0.0..1.0).contains(v) {
            errors.push(format!("grid: dropout[{i}] = {v} outside [0, 1)"));
        }
    }
    for (i, v) in grid.lambda.iter().enumerate() {
        if !(v.is_finite() && *v >= 0.0) {
            errors.push(format!(
                "grid: lambda[{i}] = {v} must be finite and non-negative"
            ));
        }
    }
    if matches!(config.model, ModelConfig::Kf { .. }) {
        for (name, list) in [
            ("units", !grid.units.is_empty()),
            ("dropout", !grid.dropout.is_empty()),
            ("lambda", !grid.lambda.is_empty()),
        ] {
            if list {
                errors.push(format!("grid: sweeping {name} requires an lstm model"));
            }
        }
    }
    if config.dataset.splits.len() != 3 {
        errors.push("grid: ranking by validation needs a three-way split".into());
    }
}

/// The initial kernel parameters a `kf` model block describes, or `None`
/// for the median-heuristic default.
pub fn initial_kernel(model: &ModelConfig) -> Option<KernelParams> {
    let ModelConfig::Kf {
        family,
        log_lengthscale,
        log_signal_variance,
        log_alpha,
        ..
    } = model
    else {
        return None;
    };
    let ell = (*log_lengthscale)?;
    Some(match family {
        KernelFamily::Rbf => KernelParams::rbf(ell, *log_signal_variance),
        KernelFamily::RationalQuadratic => KernelParams::rational_quadratic(
            ell,
            *log_signal_variance,
            log_alpha.expect("validated: rational_quadratic carries log_alpha"),
        ),
    })
}
