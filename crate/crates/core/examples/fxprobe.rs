//! Scratch diagnostic for the currency-panel forecaster calibration.

use kflow_core::data::synthetic::fx_like_series;
use kflow_core::data::{make_windows, SplitSpec};
use kflow_core::kernel_flow::{self, KernelFlowConfig, KfLossKind};
use kflow_core::metrics;
use kflow_core::nn::OptimizerKind;
use kflow_core::record::MetricSpace;

fn main() {
    let frame = fx_like_series(3000, 8, 7);
    let targets: Vec<usize> = (0..8).collect();
    let splits = SplitSpec::new(&[0.6, 0.4]).unwrap();
    let dataset = make_windows(&frame, 24, 24, &targets, true, true, &splits).unwrap();

    let test_rows: Vec<usize> = dataset.test_rows().collect();
    let train_rows: Vec<usize> = dataset.train_rows().collect();
    let queries = dataset.inputs.gather_rows(&test_rows);
    let train_queries = dataset.inputs.gather_rows(&train_rows);
    let ys = dataset.scale_levels(&dataset.targets_raw.gather_rows(&test_rows));
    let ys_train = dataset.scale_levels(&dataset.targets_raw.gather_rows(&train_rows));

    let persistence = dataset.persistence_raw(&test_rows);
    let pr = metrics::report(&ys, &dataset.scale_levels(&persistence), 24, 8).unwrap();
    println!(
        "persistence: RSE h3 {:.4} h6 {:.4} h12 {:.4} h24 {:.4}",
        pr.per_horizon[2].rse.unwrap(),
        pr.per_horizon[5].rse.unwrap(),
        pr.per_horizon[11].rse.unwrap(),
        pr.per_horizon[23].rse.unwrap(),
    );

    for (seed, jitter, cap) in [
        (11u64, 1e-4, 96usize),
        (11, 1e-4, 64),
        (12, 1e-4, 128),
        (13, 1e-4, 128),
    ] {
        let config = KernelFlowConfig {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::adam(1e-2),
            loss: KfLossKind::Rho,
            jitter_rel: jitter,
            support_cap: cap,
            patience: None,
            min_delta: 0.0,
            restore_best: true,
            metric_space: MetricSpace::ScaledLevels,
            seed,
        };
        let trained = kernel_flow::train(&dataset, None, &config).unwrap();
        let p = &trained.model.params;

        let rep = {
            let predictions = trained.model.predict(&queries).unwrap();
            let yhat_raw = dataset.invert_targets(&test_rows, &predictions);
            metrics::report(&ys, &dataset.scale_levels(&yhat_raw), 24, 8).unwrap()
        };
        let train_rep = {
            let predictions = trained.model.predict(&train_queries).unwrap();
            let yhat_raw = dataset.invert_targets(&train_rows, &predictions);
            metrics::report(&ys_train, &dataset.scale_levels(&yhat_raw), 24, 8).unwrap()
        };
        println!(
            "seed {seed} jitter {jitter:.0e} cap {cap:4}: log_ell {:+.3} | test h3 {:.4} h6 {:.4} h12 {:.4} h24 {:.4} | train h3 {:.4} h24 {:.4}",
            p.log_lengthscale.get(0, 0),
            rep.per_horizon[2].rse.unwrap(),
            rep.per_horizon[5].rse.unwrap(),
            rep.per_horizon[11].rse.unwrap(),
            rep.per_horizon[23].rse.unwrap(),
            train_rep.per_horizon[2].rse.unwrap(),
            train_rep.per_horizon[23].rse.unwrap(),
        );
    }
}
