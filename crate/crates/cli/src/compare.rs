//! Side-by-side comparison of finished runs: an epoch-aligned curve overlay
//! and a final-metrics table.
//!
//! Runs of different lengths are aligned on the shortest one and flagged,
//! so overlays never mix epochs that only some runs reached.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kflow_core::record::EpochRecord;

use crate::run::{load_records, load_summary};
use crate::CliError;

pub const COMPARE_JSON: &str = "compare.json";
pub const COMPARE_CURVES_CSV: &str = "compare_curves.csv";
pub const COMPARE_FINAL_CSV: &str = "compare_final.csv";

/// One run's row in the comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparedRun {
    /// Column label, derived from the directory name (deduplicated).
    pub name: String,
    pub dir: String,
    pub model_kind: String,
    pub epochs_run: usize,
    /// Whether the overlay cut this run down to the shared epoch count.
    pub truncated: bool,
    pub selected_epoch: usize,
    pub val_rmse: Option<f64>,
    pub test_rmse: Option<f64>,
    pub test_rse: Option<f64>,
    pub test_corr: Option<f64>,
}

/// The whole comparison, as stored in `compare.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    /// Epochs the overlay covers: the shortest run's count.
    pub aligned_epochs: usize,
    pub runs: Vec<ComparedRun>,
}

/// Column labels from directory basenames, deduplicated by suffixing
/// repeats with `#2`, `#3`, ...
fn run_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let base = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let copies = names.iter().filter(|n| {
            n.as_str() == base || n.starts_with(&format!("{base}#"))
        });
        let count = copies.count();
        names.push(if count == 0 {
            base
        } else {
            format!("{base}#{}", count + 1)
        });
    }
    names
}

fn write_overlay_csv(
    path: &Path,
    names: &[String],
    records: &[Vec<EpochRecord>],
    aligned: usize,
) -> Result<(), CliError> {
    let io_err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["epoch".to_string()];
    for name in names {
        header.push(format!("{name}_train_total"));
        header.push(format!("{name}_val_rmse"));
        header.push(format!("{name}_test_rmse"));
    }
    w.write_record(&header).map_err(io_err)?;
    for epoch in 0..aligned {
        let mut row = vec![epoch.to_string()];
        for run in records {
            let r = &run[epoch];
            row.push(r.train_loss.total.to_string());
            row.push(
                r.validation
                    .as_ref()
                    .map(|m| m.rmse.to_string())
                    .unwrap_or_default(),
            );
            row.push(
                r.test
                    .as_ref()
                    .map(|m| m.rmse.to_string())
                    .unwrap_or_default(),
            );
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn write_final_csv(path: &Path, runs: &[ComparedRun]) -> Result<(), CliError> {
    let io_err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_record([
        "name",
        "dir",
        "model_kind",
        "epochs_run",
        "truncated",
        "selected_epoch",
        "val_rmse",
        "test_rmse",
        "test_rse",
        "test_corr",
    ])
    .map_err(io_err)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for run in runs {
        w.write_record([
            run.name.clone(),
            run.dir.clone(),
            run.model_kind.clone(),
            run.epochs_run.to_string(),
            run.truncated.to_string(),
            run.selected_epoch.to_string(),
            num(run.val_rmse),
            num(run.test_rmse),
            num(run.test_rse),
            num(run.test_corr),
        ])
        .map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// The `compare` subcommand: merge the given run directories into overlay
/// and final-metrics files under `out_dir`.
pub fn compare_runs(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Comparison, CliError> {
    assert!(!run_dirs.is_empty());
    let names = run_names(run_dirs);
    let mut all_records = Vec::with_capacity(run_dirs.len());
    let mut summaries = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        all_records.push(load_records(dir)?);
        summaries.push(load_summary(dir)?);
    }
    let aligned = all_records.iter().map(Vec::len).min().unwrap_or(0);

    let runs: Vec<ComparedRun> = run_dirs
        .iter()
        .zip(&names)
        .zip(all_records.iter().zip(&summaries))
        .map(|((dir, name), (records, summary))| {
            let truncated = records.len() > aligned;
            if truncated {
                log::warn!(
                    "{}: {} epochs truncated to {aligned} for the overlay",
                    name,
                    records.len()
                );
            }
            let selected = &summary.selected;
            ComparedRun {
                name: name.clone(),
                dir: dir.display().to_string(),
                model_kind: summary.model_kind.clone(),
                epochs_run: summary.epochs_run,
                truncated,
                selected_epoch: summary.selected_epoch,
                val_rmse: selected.validation.as_ref().map(|m| m.rmse),
                test_rmse: selected.test.as_ref().map(|m| m.rmse),
                test_rse: selected.test.as_ref().and_then(|m| m.rse),
                test_corr: selected.test.as_ref().and_then(|m| m.corr),
            }
        })
        .collect();

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let comparison = Comparison {
        aligned_epochs: aligned,
        runs,
    };
    let json_path = out_dir.join(COMPARE_JSON);
    let mut text = serde_json::to_string_pretty(&comparison)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", json_path.display())))?;
    text.push('\n');
    std::fs::write(&json_path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json_path.display())))?;
    write_overlay_csv(
        &out_dir.join(COMPARE_CURVES_CSV),
        &names,
        &all_records,
        aligned,
    )?;
    write_final_csv(&out_dir.join(COMPARE_FINAL_CSV), &comparison.runs)?;
    Ok(comparison)
}
