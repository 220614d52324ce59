//! Sparsity analysis of the final LSTM layer's rectified activations.
//!
//! For a trained network whose last recurrent layer emits through ReLU, the
//! analysis runs the test split forward, collects that layer's last-step
//! activations, and reports how sparse they are: the exact-zero count and
//! fraction, a histogram of all activation values, and a histogram of each
//! datapoint's mean activation. Kernel-regularized training measurably
//! pushes both histograms toward zero relative to an unregularized twin.

use std::path::Path;

use serde::{Deserialize, Serialize};

use kflow_core::linalg::Matrix;
use kflow_core::nn::{forward, Mode, NetworkParams, NetworkSpec};

use crate::dataset::build_dataset;
use crate::run::{load_checkpoint, load_run_config, Checkpoint};
use crate::CliError;

pub const SPARSITY_JSON: &str = "sparsity.json";
pub const ACTIVATION_HIST_CSV: &str = "activation_histogram.csv";
pub const MEAN_ACTIVATION_HIST_CSV: &str = "mean_activation_histogram.csv";

/// Histogram bins used by both reports.
pub const HISTOGRAM_BINS: usize = 50;

const CHUNK: usize = 256;

/// Equal-width histogram over `[edges[0], edges[last]]`; `counts[i]` covers
/// `[edges[i], edges[i+1])`, with the final bin closed on the right.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Bins values into an equal-width histogram over their own range. A
/// constant sample collapses to one all-containing bin.
pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    assert!(bins >= 1);
    if values.is_empty() {
        return Histogram {
            edges: vec![0.0, 0.0],
            counts: vec![0],
        };
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Histogram {
            edges: vec![lo, hi],
            counts: vec![values.len()],
        };
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Histogram { edges, counts }
}

/// Everything `sparsity.json` holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityReport {
    pub datapoints: usize,
    pub units: usize,
    pub total_values: usize,
    /// Activations that are exactly zero (the rectifier's clipped outputs).
    pub zero_count: usize,
    pub zero_fraction: f64,
    pub mean_activation: f64,
    pub max_activation: f64,
    pub activation_histogram: Histogram,
    /// Histogram of each datapoint's mean activation across units.
    pub mean_activation_histogram: Histogram,
}

/// The final LSTM layer's emitted last-step activations for every input
/// row: one row per datapoint, one column per unit.
pub fn final_layer_activations(
    spec: &NetworkSpec,
    params: &NetworkParams,
    inputs: &Matrix,
) -> Matrix {
    // Tap the last recurrent layer by marking it attached in a scratch spec;
    // taps carry exactly the emitted (post-rectifier, pre-dropout) output.
    let mut tap_spec = spec.clone();
    tap_spec.kf_all_steps = false;
    let last = tap_spec.lstm_layers.len() - 1;
    if !tap_spec.lstm_layers[last].kf_attached {
        tap_spec.lstm_layers[last].kf_attached = true;
        tap_spec.kf_weights.push(0.0);
    }

    let units = spec.lstm_layers[last].units;
    let mut out = Matrix::zeros(inputs.rows(), units);
    let mut start = 0;
    while start < inputs.rows() {
        let len = CHUNK.min(inputs.rows() - start);
        let chunk = inputs.row_slice(start, len);
        let (_, taps) = forward(&tap_spec, params, &chunk, Mode::Eval, None);
        let acts = &taps.last().expect("last layer is attached")[0];
        for r in 0..len {
            out.row_mut(start + r).copy_from_slice(acts.row(r));
        }
        start += len;
    }
    out
}

/// Computes the full sparsity report for the given activations.
pub fn sparsity_report(activations: &Matrix) -> SparsityReport {
    let values = activations.data();
    let zero_count = values.iter().filter(|&&v| v == 0.0).count();
    let total = values.len();
    let row_means: Vec<f64> = (0..activations.rows())
        .map(|r| {
            let row = activations.row(r);
            row.iter().sum::<f64>() / row.len() as f64
        })
        .collect();
    SparsityReport {
        datapoints: activations.rows(),
        units: activations.cols(),
        total_values: total,
        zero_count,
        zero_fraction: zero_count as f64 / total as f64,
        mean_activation: values.iter().sum::<f64>() / total as f64,
        max_activation: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        activation_histogram: histogram(values, HISTOGRAM_BINS),
        mean_activation_histogram: histogram(&row_means, HISTOGRAM_BINS),
    }
}

fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<(), CliError> {
    let io_err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(["bin_lo", "bin_hi", "count"]).map_err(io_err)?;
    for (i, count) in hist.counts.iter().enumerate() {
        w.write_record([
            hist.edges[i].to_string(),
            hist.edges[i + 1].to_string(),
            count.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// The `sparsity` subcommand: analyze a finished run directory's model on
/// its own test split and drop the report files into `out_dir`.
pub fn analyze_run_dir(run_dir: &Path, out_dir: &Path) -> Result<SparsityReport, CliError> {
    let config = load_run_config(run_dir)?;
    let checkpoint = load_checkpoint(run_dir)?;
    let Checkpoint::Lstm { spec, params, .. } = checkpoint else {
        return Err(CliError::Config(vec![format!(
            "sparsity: {} holds a kernel-forecaster run; the analysis needs an lstm model",
            run_dir.display()
        )]));
    };
    if !spec.relu_last_lstm {
        return Err(CliError::Config(vec![format!(
            "sparsity: the run in {} was trained without relu_last_lstm; \
             its final-layer activations are not rectified",
            run_dir.display()
        )]));
    }

    let built = build_dataset(&config.dataset, None)?;
    let rows: Vec<usize> = built.dataset.test_rows().collect();
    if rows.is_empty() {
        return Err(CliError::Config(vec![
            "sparsity: the run's dataset has no test split".into(),
        ]));
    }
    let inputs = built.dataset.inputs.gather_rows(&rows);
    let activations = final_layer_activations(&spec, &params, &inputs);
    let report = sparsity_report(&activations);

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let json_path = out_dir.join(SPARSITY_JSON);
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(format!("cannot serialize {}: {e}", json_path.display())))?;
    text.push('\n');
    std::fs::write(&json_path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json_path.display())))?;
    write_histogram_csv(&out_dir.join(ACTIVATION_HIST_CSV), &report.activation_histogram)?;
    write_histogram_csv(
        &out_dir.join(MEAN_ACTIVATION_HIST_CSV),
        &report.mean_activation_histogram,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kflow_core::nn::{he_normal_init, Activation, DenseLayerSpec, LstmLayerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn relu_spec(units: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: 3,
            lstm_layers: vec![
                LstmLayerSpec {
                    units: 5,
                    dropout_rate: 0.0,
                    kf_attached: false,
                },
                LstmLayerSpec {
                    units,
                    dropout_rate: 0.0,
                    kf_attached: false,
                },
            ],
            dense_layers: vec![DenseLayerSpec {
                units: 2,
                activation: Activation::Linear,
            }],
            kf_weights: vec![],
            relu_last_lstm: true,
            kf_all_steps: false,
        }
    }

    fn random_inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn histogram_covers_the_range_and_counts_everything() {
        let values = vec![0.0, 0.1, 0.2, 0.5, 1.0];
        let hist = histogram(&values, 4);
        assert_eq!(hist.edges.len(), 5);
        assert_eq!(hist.edges[0], 0.0);
        assert_eq!(*hist.edges.last().unwrap(), 1.0);
        assert_eq!(hist.counts.iter().sum::<usize>(), values.len());
        // The maximum lands in the last bin, not out of range.
        assert_eq!(*hist.counts.last().unwrap(), 1);
    }

    #[test]
    fn histogram_handles_constant_and_empty_samples() {
        let constant = histogram(&[0.7; 9], 50);
        assert_eq!(constant.counts, vec![9]);
        assert_eq!(constant.edges, vec![0.7, 0.7]);
        let empty = histogram(&[], 50);
        assert_eq!(empty.counts, vec![0]);
    }

    #[test]
    fn zero_weights_give_zero_fraction_one() {
        let spec = relu_spec(6);
        let mut params = he_normal_init(&spec, 0).unwrap();
        for m in params.flat_mut() {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
        let inputs = random_inputs(10, 9, 1);
        let acts = final_layer_activations(&spec, &params, &inputs);
        let report = sparsity_report(&acts);
        assert_eq!(report.zero_fraction, 1.0);
        assert_eq!(report.zero_count, report.total_values);
        assert_eq!(report.mean_activation, 0.0);
    }

    #[test]
    fn rectified_activations_are_nonnegative_with_some_exact_zeros() {
        let spec = relu_spec(8);
        let params = he_normal_init(&spec, 7).unwrap();
        let inputs = random_inputs(40, 9, 2);
        let acts = final_layer_activations(&spec, &params, &inputs);
        assert_eq!(acts.shape(), (40, 8));
        assert!(acts.data().iter().all(|&v| v >= 0.0));
        let report = sparsity_report(&acts);
        assert!(
            report.zero_count > 0,
            "an untrained rectified layer should clip some activations"
        );
        assert!(report.zero_fraction < 1.0);
        assert_eq!(report.total_values, 40 * 8);
    }

    #[test]
    fn chunked_capture_matches_a_single_pass() {
        let spec = relu_spec(4);
        let params = he_normal_init(&spec, 3).unwrap();
        let inputs = random_inputs(CHUNK + 30, 9, 4);
        let chunked = final_layer_activations(&spec, &params, &inputs);
        // One chunk equals the direct forward taps.
        let mut tap_spec = spec.clone();
        tap_spec.lstm_layers[1].kf_attached = true;
        tap_spec.kf_weights.push(0.0);
        let (_, taps) = forward(&tap_spec, &params, &inputs, Mode::Eval, None);
        let direct = &taps[0][0];
        assert_eq!(chunked.shape(), direct.shape());
        for (a, b) in chunked.data().iter().zip(direct.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attached_specs_are_tapped_without_duplication() {
        let mut spec = relu_spec(4);
        spec.lstm_layers[1].kf_attached = true;
        spec.kf_weights = vec![0.5];
        let params = he_normal_init(&spec, 5).unwrap();
        let inputs = random_inputs(12, 9, 6);
        let acts = final_layer_activations(&spec, &params, &inputs);
        assert_eq!(acts.shape(), (12, 4));
        assert!(acts.data().iter().all(|&v| v >= 0.0));
    }
}
