//! Executes one experiment into a self-describing run directory.
//!
//! Every run directory contains the resolved config (`config.toml`), the
//! provenance of its data (`meta.json`), the per-epoch records as JSON and
//! as a plottable CSV, the trained model (`checkpoint.json`), and a summary
//! with the selected epoch's metrics (`summary.json`). While a run is in
//! flight a `partial_run.json` marker sits in the directory; it is removed
//! on success and rewritten with the error on failure, so an interrupted or
//! failed run is recognizable at a glance.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use kflow_core::data::{Split, WindowedDataset};
use kflow_core::kernel_flow::{self, KernelFlowConfig, KernelFlowError, KernelFlowModel};
use kflow_core::kfreg::{self, KfLayerState, KfRegError, RegularizedConfig};
use kflow_core::linalg::Matrix;
use kflow_core::metrics::{self, MetricReport};
use kflow_core::nn::{he_normal_init, Activation, DenseLayerSpec, NetworkParams, NetworkSpec};
use kflow_core::record::{evaluate_predictions, EpochRecord, LossDecomposition, MetricSpace};
use kflow_core::rng;

use crate::config::{self, ExperimentConfig, ModelConfig};
use crate::dataset::{BuiltDataset, DatasetProvenance};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const META_FILE: &str = "meta.json";
pub const RECORDS_FILE: &str = "records.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PARTIAL_MARKER: &str = "partial_run.json";

/// Versions and data provenance pinned into each run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    /// Version of this tool (workspace-wide; the core library shares it).
    pub tool_version: String,
    pub dataset: DatasetProvenance,
    pub windows: WindowSummary,
    pub dataset_warnings: Vec<String>,
}

/// Shape of the windowed dataset a run trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSummary {
    pub total: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub l: usize,
    pub h: usize,
    pub input_dim: usize,
    pub target_dim: usize,
}

/// The trained model as stored in `checkpoint.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Kf {
        model: KernelFlowModel,
    },
    Lstm {
        spec: NetworkSpec,
        params: NetworkParams,
        kf: KfLayerState,
    },
}

/// Final digest of a run: which epoch was selected and how the kept model
/// scores on the test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub model_kind: String,
    pub epochs_run: usize,
    /// Whether patience ended training before the configured epoch count.
    pub early_stopped: bool,
    /// The epoch whose parameters the checkpoint holds: best-validation
    /// under early stopping, the last one in fixed-epoch mode.
    pub selected_epoch: usize,
    /// The per-epoch record at `selected_epoch`; its test metrics are the
    /// ones to quote.
    pub selected: EpochRecord,
    pub metric_space: MetricSpace,
    /// Full per-horizon/per-feature breakdown of the checkpoint's test
    /// predictions; absent when the split degenerates.
    pub test_report: Option<MetricReport>,
    /// The same breakdown for the repeat-last-value baseline.
    pub persistence_report: Option<MetricReport>,
    pub warnings: Vec<String>,
    pub wall_clock_s: f64,
}

/// A completed run, echoed back to callers (the grid ranker, tests).
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<EpochRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("cannot parse {}: {e}", path.display())))
}

/// Loads a run directory's stored records.
pub fn load_records(run_dir: &Path) -> Result<Vec<EpochRecord>, CliError> {
    read_json(&run_dir.join(RECORDS_FILE))
}

/// Loads a run directory's summary.
pub fn load_summary(run_dir: &Path) -> Result<RunSummary, CliError> {
    read_json(&run_dir.join(SUMMARY_FILE))
}

/// Loads a run directory's checkpoint.
pub fn load_checkpoint(run_dir: &Path) -> Result<Checkpoint, CliError> {
    read_json(&run_dir.join(CHECKPOINT_FILE))
}

/// Loads a run directory's resolved config.
pub fn load_run_config(run_dir: &Path) -> Result<ExperimentConfig, CliError> {
    config::load_config(&run_dir.join(CONFIG_FILE))
}

/// The network spec an `lstm` model block describes for this dataset: the
/// configured layers plus the linear prediction layer sized to the targets.
pub fn assemble_spec(model: &ModelConfig, dataset: &WindowedDataset) -> Option<NetworkSpec> {
    let ModelConfig::Lstm {
        lstm_layers,
        dense_layers,
        kf_weights,
        relu_last_lstm,
        kf_all_steps,
        ..
    } = model
    else {
        return None;
    };
    let mut dense = dense_layers.clone();
    dense.push(DenseLayerSpec {
        units: dataset.target_dim(),
        activation: Activation::Linear,
    });
    Some(NetworkSpec {
        input_dim: dataset.d,
        lstm_layers: lstm_layers.clone(),
        dense_layers: dense,
        kf_weights: kf_weights.clone(),
        relu_last_lstm: *relu_last_lstm,
        kf_all_steps: *kf_all_steps,
    })
}

fn map_kf_error(e: KernelFlowError) -> CliError {
    match e {
        KernelFlowError::InvalidConfig { .. } | KernelFlowError::Data(_) => {
            CliError::Config(vec![e.to_string()])
        }
        other => CliError::Runtime(other.to_string()),
    }
}

fn map_reg_error(e: KfRegError) -> CliError {
    match e {
        KfRegError::InvalidConfig { .. } | KfRegError::Data(_) => {
            CliError::Config(vec![e.to_string()])
        }
        other => CliError::Runtime(other.to_string()),
    }
}

/// Mean squared difference between model-space predictions and stored
/// targets over the training split, used as the loss of an untrained model.
fn initial_train_mse(dataset: &WindowedDataset, predictions: &Matrix) -> f64 {
    let rows: Vec<usize> = dataset.train_rows().collect();
    let truth = dataset.targets.gather_rows(&rows);
    let mut acc = 0.0;
    for i in 0..truth.rows() {
        for j in 0..truth.cols() {
            let diff = truth.get(i, j) - predictions.get(i, j);
            acc += diff * diff;
        }
    }
    acc / truth.len() as f64
}

/// One record for an epochs=0 run: the untouched model, evaluated.
fn initial_record(
    dataset: &WindowedDataset,
    predict: &dyn Fn(&Matrix) -> Result<Matrix, CliError>,
    space: MetricSpace,
    seed: u64,
) -> Result<EpochRecord, CliError> {
    let started = Instant::now();
    let train_inputs = dataset.inputs.gather_rows(&dataset.train_rows().collect::<Vec<_>>());
    let train_loss = LossDecomposition::plain(initial_train_mse(dataset, &predict(&train_inputs)?));
    let eval = |split: Split| -> Result<_, CliError> {
        let rows: Vec<usize> = dataset.rows_of(split).collect();
        if rows.is_empty() {
            return Ok(None);
        }
        let preds = predict(&dataset.inputs.gather_rows(&rows))?;
        Ok(Some(evaluate_predictions(dataset, split, &preds, space)))
    };
    Ok(EpochRecord {
        epoch: 0,
        train_loss,
        validation: eval(Split::Validation)?,
        test: eval(Split::Test)?,
        wall_clock_s: started.elapsed().as_secs_f64(),
        rng_digest: rng::rng_digest(&ChaCha8Rng::seed_from_u64(rng::epoch_seed(seed, 0))),
    })
}

/// The epoch whose parameters the trainer kept: the best-validation epoch
/// under the same improvement rule the trainers use (strictly better by more
/// than `min_delta`, first seen wins), or the last epoch when nothing was
/// restored.
pub fn selected_epoch(records: &[EpochRecord], min_delta: f64, restore_best: bool) -> usize {
    let last = records.last().map(|r| r.epoch).unwrap_or(0);
    if !restore_best {
        return last;
    }
    let mut best: Option<(f64, usize)> = None;
    for r in records {
        if let Some(v) = &r.validation {
            let improved = match best {
                None => true,
                Some((b, _)) => v.rmse < b - min_delta,
            };
            if improved {
                best = Some((v.rmse, r.epoch));
            }
        }
    }
    best.map(|(_, e)| e).unwrap_or(last)
}

/// Test-split predictions of the checkpoint, as a full metric report in the
/// configured space, alongside the persistence baseline's.
fn final_reports(
    dataset: &WindowedDataset,
    predict: &dyn Fn(&Matrix) -> Result<Matrix, CliError>,
    space: MetricSpace,
) -> Result<(Option<MetricReport>, Option<MetricReport>), CliError> {
    let rows: Vec<usize> = dataset.test_rows().collect();
    if rows.is_empty() {
        return Ok((None, None));
    }
    let y_raw = dataset.targets_raw.gather_rows(&rows);
    let model_raw = dataset.invert_targets(&rows, &predict(&dataset.inputs.gather_rows(&rows))?);
    let persistence_raw = dataset.persistence_raw(&rows);
    let (y, model_side, persistence_side) = match space {
        MetricSpace::Raw => (y_raw, model_raw, persistence_raw),
        MetricSpace::ScaledLevels => (
            dataset.scale_levels(&y_raw),
            dataset.scale_levels(&model_raw),
            dataset.scale_levels(&persistence_raw),
        ),
    };
    let model_report = metrics::report(&y, &model_side, dataset.h, dataset.s).ok();
    let persistence_report = metrics::report(&y, &persistence_side, dataset.h, dataset.s).ok();
    Ok((model_report, persistence_report))
}

struct TrainedRun {
    checkpoint: Checkpoint,
    records: Vec<EpochRecord>,
    warnings: Vec<String>,
}

fn train_model(config: &ExperimentConfig, built: &BuiltDataset) -> Result<TrainedRun, CliError> {
    let tr = &config.training;
    let dataset = &built.dataset;
    match &config.model {
        ModelConfig::Kf {
            loss,
            jitter_rel,
            support_cap,
            ..
        } => {
            let kf_config = KernelFlowConfig {
                epochs: tr.epochs,
                batch_size: tr.batch_size,
                optimizer: tr.optimizer_kind(&config.model),
                loss: *loss,
                jitter_rel: *jitter_rel,
                support_cap: *support_cap,
                patience: tr.effective_patience(),
                min_delta: tr.min_delta,
                restore_best: !tr.fixed_epochs,
                metric_space: tr.metric_space,
                seed: tr.seed,
            };
            let initial = config::initial_kernel(&config.model);
            let out = kernel_flow::train(dataset, initial, &kf_config).map_err(map_kf_error)?;
            Ok(TrainedRun {
                checkpoint: Checkpoint::Kf { model: out.model },
                records: out.records,
                warnings: out.warnings,
            })
        }
        ModelConfig::Lstm {
            compare_predictions,
            kf_jitter_rel,
            ..
        } => {
            let spec = assemble_spec(&config.model, dataset)
                .expect("lstm model blocks assemble a network spec");
            spec.validate().map_err(|e| CliError::Config(vec![e.to_string()]))?;
            let reg_config = RegularizedConfig {
                epochs: tr.epochs,
                batch_size: tr.batch_size,
                optimizer: tr.optimizer_kind(&config.model),
                clip_norm: tr.clip_option(),
                kf_jitter_rel: *kf_jitter_rel,
                compare_predictions: *compare_predictions,
                patience: tr.effective_patience(),
                min_delta: tr.min_delta,
                restore_best: !tr.fixed_epochs,
                metric_space: tr.metric_space,
                seed: tr.seed,
            };
            let out = kfreg::train_regularized(dataset, &spec, &reg_config).map_err(map_reg_error)?;
            Ok(TrainedRun {
                checkpoint: Checkpoint::Lstm {
                    spec,
                    params: out.params,
                    kf: out.kf,
                },
                records: out.records,
                warnings: out.warnings,
            })
        }
    }
}

/// The epochs=0 path: build the initial model without training.
fn initial_model(config: &ExperimentConfig, built: &BuiltDataset) -> Result<Checkpoint, CliError> {
    let dataset = &built.dataset;
    match &config.model {
        ModelConfig::Kf { .. } => {
            // Delegate to the trainer with zero epochs so the support
            // subsampling and parameter validation stay in one place.
            let trained = train_model(config, built)?;
            debug_assert!(trained.records.is_empty());
            Ok(trained.checkpoint)
        }
        ModelConfig::Lstm {
            kf_jitter_rel, ..
        } => {
            let spec = assemble_spec(&config.model, dataset)
                .expect("lstm model blocks assemble a network spec");
            spec.validate().map_err(|e| CliError::Config(vec![e.to_string()]))?;
            let params = he_normal_init(&spec, config.training.seed)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok(Checkpoint::Lstm {
                params,
                kf: KfLayerState::from_spec(&spec, *kf_jitter_rel),
                spec,
            })
        }
    }
}

fn checkpoint_predictor<'a>(
    checkpoint: &'a Checkpoint,
) -> Box<dyn Fn(&Matrix) -> Result<Matrix, CliError> + 'a> {
    match checkpoint {
        Checkpoint::Kf { model } => Box::new(move |queries: &Matrix| {
            model
                .predict(queries)
                .map_err(|e| CliError::Runtime(format!("prediction failed: {e}")))
        }),
        Checkpoint::Lstm { spec, params, .. } => {
            Box::new(move |queries: &Matrix| Ok(kfreg::predict(spec, params, queries)))
        }
    }
}

fn write_curves(path: &Path, records: &[EpochRecord]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let io_err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    w.write_record([
        "epoch",
        "train_total",
        "train_mse",
        "train_kf",
        "val_rmse",
        "val_mae",
        "val_mape",
        "val_rse",
        "val_corr",
        "test_rmse",
        "test_mae",
        "test_mape",
        "test_rse",
        "test_corr",
        "wall_clock_s",
    ])
    .map_err(io_err)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let split = |m: &Option<kflow_core::record::SplitMetrics>| -> [String; 5] {
        match m {
            None => Default::default(),
            Some(m) => [
                m.rmse.to_string(),
                m.mae.to_string(),
                cell(m.mape),
                cell(m.rse),
                cell(m.corr),
            ],
        }
    };
    for r in records {
        let kf_sum: f64 = r.train_loss.kf_terms.iter().sum();
        let val = split(&r.validation);
        let test = split(&r.test);
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.total.to_string(),
            r.train_loss.mse.to_string(),
            kf_sum.to_string(),
        ];
        row.extend(val);
        row.extend(test);
        row.push(r.wall_clock_s.to_string());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// In-flight / failure marker contents.
#[derive(Debug, Serialize, Deserialize)]
pub struct PartialMarker {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs one resolved experiment into `out_dir` and writes every artifact.
pub fn run_single(
    config: &ExperimentConfig,
    built: &BuiltDataset,
    out_dir: &Path,
) -> Result<RunArtifacts, CliError> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let marker_path = out_dir.join(PARTIAL_MARKER);
    write_json(
        &marker_path,
        &PartialMarker {
            status: "running".into(),
            error: None,
        },
    )?;

    let result = run_inner(config, built, out_dir, started);
    match &result {
        Ok(_) => {
            let _ = std::fs::remove_file(&marker_path);
        }
        Err(e) => {
            let _ = write_json(
                &marker_path,
                &PartialMarker {
                    status: "failed".into(),
                    error: Some(e.to_string()),
                },
            );
        }
    }
    result
}

fn run_inner(
    config: &ExperimentConfig,
    built: &BuiltDataset,
    out_dir: &Path,
    started: Instant,
) -> Result<RunArtifacts, CliError> {
    let dataset = &built.dataset;

    let config_text = toml::to_string_pretty(config)
        .map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))?;
    let config_path = out_dir.join(CONFIG_FILE);
    let mut f = std::fs::File::create(&config_path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", config_path.display())))?;
    f.write_all(config_text.as_bytes())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", config_path.display())))?;

    let meta = RunMeta {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        dataset: built.provenance.clone(),
        windows: WindowSummary {
            total: dataset.len(),
            train: dataset.train_rows().len(),
            validation: dataset.validation_rows().len(),
            test: dataset.test_rows().len(),
            l: dataset.l,
            h: dataset.h,
            input_dim: dataset.input_dim(),
            target_dim: dataset.target_dim(),
        },
        dataset_warnings: dataset.warnings.clone(),
    };
    write_json(&out_dir.join(META_FILE), &meta)?;

    let (checkpoint, records, warnings) = if config.training.epochs == 0 {
        let checkpoint = initial_model(config, built)?;
        let predict = checkpoint_predictor(&checkpoint);
        let record = initial_record(
            dataset,
            predict.as_ref(),
            config.training.metric_space,
            config.training.seed,
        )?;
        drop(predict);
        (checkpoint, vec![record], Vec::new())
    } else {
        let trained = train_model(config, built)?;
        for w in &trained.warnings {
            log::warn!("{w}");
        }
        (trained.checkpoint, trained.records, trained.warnings)
    };

    write_json(&out_dir.join(RECORDS_FILE), &records)?;
    write_curves(&out_dir.join(CURVES_FILE), &records)?;
    write_json(&out_dir.join(CHECKPOINT_FILE), &checkpoint)?;

    let restore_best = !config.training.fixed_epochs && config.training.epochs > 0;
    let selected = selected_epoch(&records, config.training.min_delta, restore_best);
    let selected_record = records
        .iter()
        .find(|r| r.epoch == selected)
        .cloned()
        .ok_or_else(|| CliError::Runtime("no training epochs were recorded".into()))?;

    let predict = checkpoint_predictor(&checkpoint);
    let (test_report, persistence_report) =
        final_reports(dataset, predict.as_ref(), config.training.metric_space)?;
    drop(predict);

    let summary = RunSummary {
        model_kind: config.model.kind_name().into(),
        epochs_run: records.len(),
        early_stopped: config.training.epochs > 0 && records.len() < config.training.epochs,
        selected_epoch: selected,
        selected: selected_record,
        metric_space: config.training.metric_space,
        test_report,
        persistence_report,
        warnings,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join(SUMMARY_FILE), &summary)?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        summary,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_dataset;

    fn lstm_config(epochs: usize, seed: u64) -> ExperimentConfig {
        let mut config: ExperimentConfig = toml::from_str(
            r#"
            [dataset]
            synthetic = { kind = "noisy_wave", n = 160, seed = 3 }
            l = 6
            h = 1
            targets = [0]

            [model]
            kind = "lstm"
            lstm_layers = [{ units = 6 }]

            [training]
            batch_size = 8
            learning_rate = 0.01
            "#,
        )
        .unwrap();
        config.training.epochs = epochs;
        config.training.seed = seed;
        config
    }

    fn kf_config(epochs: usize) -> ExperimentConfig {
        let mut config: ExperimentConfig = toml::from_str(
            r#"
            [dataset]
            synthetic = { kind = "noisy_wave", n = 160, seed = 3 }
            l = 6
            h = 1
            targets = [0]

            [model]
            kind = "kf"

            [training]
            batch_size = 16
            "#,
        )
        .unwrap();
        config.training.epochs = epochs;
        config
    }

    #[test]
    fn run_directory_holds_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = lstm_config(2, 0);
        let built = build_dataset(&config.dataset, None).unwrap();
        let artifacts = run_single(&config, &built, dir.path()).unwrap();

        for file in [
            CONFIG_FILE,
            META_FILE,
            RECORDS_FILE,
            CURVES_FILE,
            SUMMARY_FILE,
            CHECKPOINT_FILE,
        ] {
            assert!(dir.path().join(file).is_file(), "missing {file}");
        }
        assert!(
            !dir.path().join(PARTIAL_MARKER).exists(),
            "marker must be gone after success"
        );
        assert_eq!(artifacts.records.len(), 2);
        assert_eq!(artifacts.summary.epochs_run, 2);
        assert!(!artifacts.summary.early_stopped);

        let records = load_records(dir.path()).unwrap();
        assert!(EpochRecord::runs_match(&records, &artifacts.records));
        let summary = load_summary(dir.path()).unwrap();
        assert_eq!(summary.selected_epoch, artifacts.summary.selected_epoch);
        let meta: RunMeta = read_json(&dir.path().join(META_FILE)).unwrap();
        assert_eq!(meta.windows.total, 160 - 6 - 1 + 1);
        assert_eq!(meta.dataset.checksum().len(), 64);

        let config_back = load_run_config(dir.path()).unwrap();
        assert_eq!(config_back.training.epochs, 2);

        let curves = std::fs::read_to_string(dir.path().join(CURVES_FILE)).unwrap();
        let mut lines = curves.lines();
        assert!(lines.next().unwrap().starts_with("epoch,train_total"));
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn repeated_runs_reproduce_records_bitwise() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = lstm_config(3, 9);
        let built = build_dataset(&config.dataset, None).unwrap();
        let a = run_single(&config, &built, dir_a.path()).unwrap();
        let b = run_single(&config, &built, dir_b.path()).unwrap();
        assert!(EpochRecord::runs_match(&a.records, &b.records));
        assert_eq!(
            std::fs::read(dir_a.path().join(CHECKPOINT_FILE)).unwrap(),
            std::fs::read(dir_b.path().join(CHECKPOINT_FILE)).unwrap()
        );
    }

    #[test]
    fn zero_epochs_evaluates_the_initial_model_once() {
        for config in [lstm_config(0, 4), kf_config(0)] {
            let dir = tempfile::tempdir().unwrap();
            let built = build_dataset(&config.dataset, None).unwrap();
            let artifacts = run_single(&config, &built, dir.path()).unwrap();
            assert_eq!(artifacts.records.len(), 1, "{}", config.model.kind_name());
            let record = &artifacts.records[0];
            assert_eq!(record.epoch, 0);
            assert!(record.train_loss.total.is_finite());
            assert!(record.validation.is_some());
            assert!(record.test.is_some());
            assert_eq!(artifacts.summary.selected_epoch, 0);
        }
    }

    #[test]
    fn kf_runs_train_and_summarize() {
        let dir = tempfile::tempdir().unwrap();
        let config = kf_config(3);
        let built = build_dataset(&config.dataset, None).unwrap();
        let artifacts = run_single(&config, &built, dir.path()).unwrap();
        assert_eq!(artifacts.summary.model_kind, "kf");
        assert_eq!(artifacts.records.len(), 3);
        let report = artifacts.summary.test_report.as_ref().unwrap();
        assert!(report.rmse.is_finite());
        assert_eq!(report.per_horizon.len(), 1);
        assert!(artifacts.summary.persistence_report.is_some());
        match load_checkpoint(dir.path()).unwrap() {
            Checkpoint::Kf { model } => assert!(model.support_len() > 0),
            other => panic!("expected a kernel checkpoint, got {other:?}"),
        }
    }

    #[test]
    fn selection_follows_the_trainer_improvement_rule() {
        let mk = |epoch: usize, rmse: f64| EpochRecord {
            epoch,
            train_loss: LossDecomposition::plain(0.1),
            validation: Some(kflow_core::record::SplitMetrics {
                rmse,
                mae: 0.0,
                mape: None,
                rse: None,
                corr: None,
            }),
            test: None,
            wall_clock_s: 0.0,
            rng_digest: String::new(),
        };
        let records = vec![mk(0, 1.0), mk(1, 0.5), mk(2, 0.5), mk(3, 0.7)];
        // First minimum wins ties; strict improvement is required.
        assert_eq!(selected_epoch(&records, 0.0, true), 1);
        // A large min_delta keeps the first epoch.
        assert_eq!(selected_epoch(&records, 0.6, true), 0);
        // Fixed-epoch mode always keeps the last.
        assert_eq!(selected_epoch(&records, 0.0, false), 3);
    }

    #[test]
    fn failures_leave_a_partial_marker_behind() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = kf_config(2);
        // A batch size larger than the training split cannot be shuffled.
        config.training.batch_size = 4096;
        let built = build_dataset(&config.dataset, None).unwrap();
        assert!(run_single(&config, &built, dir.path()).is_err());
        let marker: PartialMarker = read_json(&dir.path().join(PARTIAL_MARKER)).unwrap();
        assert_eq!(marker.status, "failed");
        assert!(marker.error.unwrap().contains("batch"));
    }

    #[test]
    fn fixed_epochs_reports_the_final_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = lstm_config(3, 2);
        config.training.fixed_epochs = true;
        let built = build_dataset(&config.dataset, None).unwrap();
        let artifacts = run_single(&config, &built, dir.path()).unwrap();
        assert_eq!(artifacts.summary.selected_epoch, 2);
        assert!(!artifacts.summary.early_stopped);
    }
}
