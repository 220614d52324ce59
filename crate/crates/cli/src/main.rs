//! The `kflow` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kflow_cli::{compare, config, dataset, grid, run, sparsity, CliError};

#[derive(Parser)]
#[command(
    name = "kflow",
    version,
    about = "Kernel-flow forecasting experiments: training runs, grid \
             searches, sparsity analysis, and run comparisons"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured model and write a run directory.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of the config's [grid] block and rank the results.
    Grid {
        /// Experiment config (TOML) with a [grid] block.
        config: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run grids larger than the configured cell cap.
        #[arg(long)]
        force_grid: bool,
    },
    /// Analyze the rectified-activation sparsity of a finished run.
    Sparsity {
        /// A run directory written by `run` or `grid`.
        run_dir: PathBuf,
        /// Where to write the report files (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay training curves and final metrics of finished runs.
    Compare {
        /// Run directories to merge.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where to write the comparison files.
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
}

fn apply_overrides(
    cfg: &mut config::ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
) {
    if let Some(seed) = seed {
        cfg.training.seed = seed;
    }
    if let Some(out) = out {
        cfg.output.dir = out;
    }
}

fn print_summary(artifacts: &run::RunArtifacts) {
    let s = &artifacts.summary;
    let stopped = if s.early_stopped {
        " (early stopped)"
    } else {
        ""
    };
    println!(
        "trained {} model for {} epochs{stopped}; selected epoch {}",
        s.model_kind, s.epochs_run, s.selected_epoch
    );
    if let Some(v) = &s.selected.validation {
        println!("validation rmse {:.6}", v.rmse);
    }
    if let Some(t) = &s.selected.test {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        println!(
            "test rmse {:.6} mae {:.6} rse {} corr {}",
            t.rmse,
            t.mae,
            fmt(t.rse),
            fmt(t.corr)
        );
    }
    println!("artifacts in {}", artifacts.out_dir.display());
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run { config, seed, out } => {
            let mut cfg = config::load_config(&config)?;
            apply_overrides(&mut cfg, seed, out);
            if cfg.grid.is_some() {
                log::info!("the [grid] block is ignored by `run`; use `grid` to sweep it");
            }
            let errors = config::validate(&cfg, false, false);
            if !errors.is_empty() {
                return Err(CliError::Config(errors));
            }
            let built = dataset::build_dataset(&cfg.dataset, None)?;
            let out_dir = cfg.output.dir.clone();
            let artifacts = run::run_single(&cfg, &built, &out_dir)?;
            print_summary(&artifacts);
            Ok(())
        }
        Cmd::Grid {
            config,
            seed,
            out,
            force_grid,
        } => {
            let mut cfg = config::load_config(&config)?;
            apply_overrides(&mut cfg, seed, out);
            let errors = config::validate(&cfg, true, force_grid);
            if !errors.is_empty() {
                return Err(CliError::Config(errors));
            }
            let out_dir = cfg.output.dir.clone();
            let outcome = grid::run_grid(&cfg, &out_dir)?;
            println!(
                "{} cells ({} failed); ranked by validation rmse:",
                outcome.cells, outcome.failed
            );
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            for (rank, row) in outcome.ranked.iter().take(10).enumerate() {
                println!(
                    "  {:>2}. {} l={} units={} dropout={} lambda={} val_rmse={} test_rmse={}",
                    rank + 1,
                    row.dir,
                    row.overrides.l.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    row.overrides.units.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                    fmt(row.overrides.dropout),
                    fmt(row.overrides.lambda),
                    fmt(row.val_rmse),
                    fmt(row.test_rmse),
                );
            }
            println!("table in {}", out_dir.join(grid::GRID_CSV).display());
            Ok(())
        }
        Cmd::Sparsity { run_dir, out } => {
            let out_dir = out.unwrap_or_else(|| run_dir.clone());
            let report = sparsity::analyze_run_dir(&run_dir, &out_dir)?;
            println!(
                "{} activations over {} datapoints x {} units",
                report.total_values, report.datapoints, report.units
            );
            println!(
                "zeros: {} (fraction {:.4}); mean activation {:.6}",
                report.zero_count, report.zero_fraction, report.mean_activation
            );
            println!("report in {}", out_dir.join(sparsity::SPARSITY_JSON).display());
            Ok(())
        }
        Cmd::Compare { run_dirs, out } => {
            let comparison = compare::compare_runs(&run_dirs, &out)?;
            println!("aligned on {} epochs", comparison.aligned_epochs);
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            for run in &comparison.runs {
                let mark = if run.truncated { " (truncated)" } else { "" };
                println!(
                    "  {}: {} epochs{mark}, selected {}, val_rmse={} test_rmse={}",
                    run.name,
                    run.epochs_run,
                    run.selected_epoch,
                    fmt(run.val_rmse),
                    fmt(run.test_rmse),
                );
            }
            println!("overlay in {}", out.join(compare::COMPARE_CURVES_CSV).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(errors)) => {
            eprintln!("configuration errors:");
            for e in &errors {
                eprintln!("  - {e}");
            }
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
