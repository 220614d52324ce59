//! Grid search: the Cartesian product of the `[grid]` lists, one full run
//! per cell, and a table ranked by best-validation RMSE.
//!
//! Cells nest in the order l → units → dropout → lambda, so sweeps over the
//! look-back reuse each windowed dataset across the inner loops. Sweep
//! values override the base config: `units` and `dropout` apply to every
//! recurrent layer, and `lambda` replaces every penalty weight — attaching
//! the final LSTM layer first when the base model has no attachment, so a
//! plain network can be swept over regularization strengths directly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GridConfig, ModelConfig};
use crate::dataset::{build_dataset, BuiltDataset};
use crate::run::{run_single, RunArtifacts};
use crate::CliError;

pub const GRID_JSON: &str = "grid.json";
pub const GRID_CSV: &str = "grid.csv";

/// One cell's sweep values; `None` keeps the base config's setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellOverride {
    pub l: Option<usize>,
    pub units: Option<usize>,
    pub dropout: Option<f64>,
    pub lambda: Option<f64>,
}

fn axis<T: Copy>(list: &[T]) -> Vec<Option<T>> {
    if list.is_empty() {
        vec![None]
    } else {
        list.iter().copied().map(Some).collect()
    }
}

/// All cells of the grid, in deterministic nesting order.
pub fn expand_cells(grid: &GridConfig) -> Vec<CellOverride> {
    let mut cells = Vec::with_capacity(grid.cell_count());
    for &l in &axis(&grid.l) {
        for &units in &axis(&grid.units) {
            for &dropout in &axis(&grid.dropout) {
                for &lambda in &axis(&grid.lambda) {
                    cells.push(CellOverride {
                        l,
                        units,
                        dropout,
                        lambda,
                    });
                }
            }
        }
    }
    cells
}

/// The base config with one cell's sweep values substituted; the grid block
/// itself is dropped so the result describes a single reproducible run.
pub fn apply_overrides(base: &ExperimentConfig, cell: &CellOverride) -> ExperimentConfig {
    let mut config = base.clone();
    config.grid = None;
    if let Some(l) = cell.l {
        config.dataset.l = l;
    }
    if let ModelConfig::Lstm {
        lstm_layers,
        kf_weights,
        ..
    } = &mut config.model
    {
        if let Some(units) = cell.units {
            for layer in lstm_layers.iter_mut() {
                layer.units = units;
            }
        }
        if let Some(rate) = cell.dropout {
            for layer in lstm_layers.iter_mut() {
                layer.dropout_rate = rate;
            }
        }
        if let Some(lambda) = cell.lambda {
            if kf_weights.is_empty() {
                if let Some(last) = lstm_layers.last_mut() {
                    last.kf_attached = true;
                }
                *kf_weights = vec![lambda];
            } else {
                for w in kf_weights.iter_mut() {
                    *w = lambda;
                }
            }
        }
    }
    config
}

/// One row of the ranked grid table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCellResult {
    pub cell: usize,
    /// Run directory name, relative to the grid's output directory.
    pub dir: String,
    #[serde(flatten)]
    pub overrides: CellOverride,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub epochs_run: Option<usize>,
    pub selected_epoch: Option<usize>,
    /// Validation RMSE at the selected epoch; the ranking key.
    pub val_rmse: Option<f64>,
    /// Test metrics at the selected epoch, not at any later one.
    pub test_rmse: Option<f64>,
    pub test_rse: Option<f64>,
    pub test_corr: Option<f64>,
}

/// The whole grid's outcome, as stored in `grid.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridOutcome {
    pub cells: usize,
    pub failed: usize,
    /// Results ordered by validation RMSE, failures last.
    pub ranked: Vec<GridCellResult>,
}

fn cell_result(index: usize, dir: String, overrides: CellOverride, run: &RunArtifacts) -> GridCellResult {
    let selected = &run.summary.selected;
    GridCellResult {
        cell: index,
        dir,
        overrides,
        status: "ok".into(),
        error: None,
        epochs_run: Some(run.summary.epochs_run),
        selected_epoch: Some(run.summary.selected_epoch),
        val_rmse: selected.validation.as_ref().map(|m| m.rmse),
        test_rmse: selected.test.as_ref().map(|m| m.rmse),
        test_rse: selected.test.as_ref().and_then(|m| m.rse),
        test_corr: selected.test.as_ref().and_then(|m| m.corr),
    }
}

fn write_grid_csv(path: &Path, ranked: &[GridCellResult]) -> Result<(), CliError> {
    let io_err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_record([
        "rank",
        "cell",
        "dir",
        "l",
        "units",
        "dropout",
        "lambda",
        "status",
        "epochs_run",
        "selected_epoch",
        "val_rmse",
        "test_rmse",
        "test_rse",
        "test_corr",
    ])
    .map_err(io_err)?;
    for (rank, row) in ranked.iter().enumerate() {
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let int = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            (rank + 1).to_string(),
            row.cell.to_string(),
            row.dir.clone(),
            int(row.overrides.l),
            int(row.overrides.units),
            num(row.overrides.dropout),
            num(row.overrides.lambda),
            row.status.clone(),
            int(row.epochs_run),
            int(row.selected_epoch),
            num(row.val_rmse),
            num(row.test_rmse),
            num(row.test_rse),
            num(row.test_corr),
        ])
        .map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Runs every cell into `out_dir/cell-NNN` and writes the ranked table.
/// Individual cell failures are recorded and ranked last rather than
/// aborting the sweep; the error is only fatal when every cell fails.
pub fn run_grid(config: &ExperimentConfig, out_dir: &Path) -> Result<GridOutcome, CliError> {
    let grid = config
        .grid
        .as_ref()
        .expect("validated: grid mode requires a grid block");
    let cells = expand_cells(grid);
    log::info!("grid: running {} cells into {}", cells.len(), out_dir.display());
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    // Datasets keyed by look-back; sweeps without `l` build exactly one.
    let mut datasets: Vec<(usize, BuiltDataset)> = Vec::new();
    let mut results = Vec::with_capacity(cells.len());
    for (index, cell) in cells.iter().enumerate() {
        let dir_name = format!("cell-{index:03}");
        let cell_dir = out_dir.join(&dir_name);
        let resolved = apply_overrides(config, cell);
        let l = resolved.dataset.l;
        let built = match datasets.iter().position(|(key, _)| *key == l) {
            Some(i) => &datasets[i].1,
            None => {
                let built = build_dataset(&resolved.dataset, None)?;
                datasets.push((l, built));
                &datasets.last().expect("just pushed").1
            }
        };
        match run_single(&resolved, built, &cell_dir) {
            Ok(run) => {
                log::info!(
                    "cell {index}: validation rmse {:?}",
                    run.summary.selected.validation.as_ref().map(|m| m.rmse)
                );
                results.push(cell_result(index, dir_name, *cell, &run));
            }
            Err(e) => {
                log::warn!("cell {index} failed: {e}");
                results.push(GridCellResult {
                    cell: index,
                    dir: dir_name,
                    overrides: *cell,
                    status: "failed".into(),
                    error: Some(e.to_string()),
                    epochs_run: None,
                    selected_epoch: None,
                    val_rmse: None,
                    test_rmse: None,
                    test_rse: None,
                    test_corr: None,
                });
            }
        }
    }

    let failed = results.iter().filter(|r| r.status == "failed").count();
    let mut ranked = results;
    ranked.sort_by(|a, b| match (a.val_rmse, b.val_rmse) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cell.cmp(&b.cell),
    });

    let outcome = GridOutcome {
        cells: cells.len(),
        failed,
        ranked,
    };
    let json_path = out_dir.join(GRID_JSON);
    let mut text = serde_json::to_string_pretty(&outcome)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", json_path.display())))?;
    text.push('\n');
    std::fs::write(&json_path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json_path.display())))?;
    write_grid_csv(&out_dir.join(GRID_CSV), &outcome.ranked)?;

    if failed == cells.len() {
        return Err(CliError::Runtime(format!(
            "every one of the {} grid cells failed; see {}",
            cells.len(),
            json_path.display()
        )));
    }
    Ok(outcome)
}
