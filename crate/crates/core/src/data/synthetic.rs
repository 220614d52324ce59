//! Deterministic synthetic series generators.
//!
//! These exist so experiments and tests can run on data with known,
//! controllable structure: a noisy periodic signal for fitting/overfitting
//! studies, and a currency-panel-like series whose predictable components
//! (slow trend, daily-scale seasonality, mean-reverting transient) ride on a
//! range-bound drift that is walk-like over short horizons but keeps the
//! levels inside a band, the way currency quotes oscillate for decades
//! without leaving their historical range.

use super::frame::SeriesFrame;
use crate::linalg::Matrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

/// Univariate two-tone wave with additive Gaussian noise. The noise is large
/// enough that a high-capacity model can memorize it.
pub fn noisy_wave_series(n: usize, seed: u64) -> SeriesFrame {
    let mut rng = crate::rng::stream(seed, "synthetic-wave", 0);
    let noise = Normal::new(0.0, 0.35).expect("valid sd");
    let values = Matrix::from_fn(n, 1, |t, _| {
        let t = t as f64;
        (TAU * t / 23.0).sin() + 0.6 * (TAU * t / 7.3 + 1.0).sin() + noise.sample(&mut rng)
    });
    SeriesFrame {
        values,
        timestamps: None,
        feature_names: vec!["wave".into()],
    }
}

/// Innovation scale of the slow drift; every other component amplitude below
/// is expressed relative to it. Over `j` steps the drift moves by about
/// `FX_STEP_SD * sqrt(j)`, which is the irreducible forecast error.
const FX_STEP_SD: f64 = 0.0010;
/// Pole of the slow drift. Close enough to 1 that the drift is
/// indistinguishable from a random walk over a day or two, yet mean-reverting
/// over the series so levels never leave their band.
const FX_DRIFT_POLE: f64 = 0.995;
/// Amplitude of each of the two slow trend tones.
const FX_TREND_AMP: f64 = 0.10;
/// Daily-scale seasonal amplitude, in step-sd units.
const FX_SEASON_REL: f64 = 6.0;
/// Seasonal period in time stamps.
const FX_SEASON_PERIOD: f64 = 48.0;
/// Mean-reverting transient: pole and innovation scale (step-sd units).
const FX_AR_POLE: f64 = 0.85;
const FX_AR_REL: f64 = 0.7;

/// A `d`-column panel resembling daily currency quotes: levels near 1 whose
/// variation over any long stretch is dominated by smooth trend plus a
/// range-bound slow drift, with a small learnable seasonal tone and a faster
/// mean-reverting transient layered on top. Each column gets independent
/// phases and innovations.
pub fn fx_like_series(n: usize, d: usize, seed: u64) -> SeriesFrame {
    let mut values = Matrix::zeros(n, d);
    for k in 0..d {
        let mut rng = crate::rng::stream(seed, "synthetic-fx", k as u64);
        let step = Normal::new(0.0, FX_STEP_SD).expect("valid sd");
        let ar_innov = Normal::new(0.0, FX_AR_REL * FX_STEP_SD).expect("valid sd");
        let base = 1.0 + 0.05 * k as f64;
        let trend_phase = (rng.random::<f64>() * TAU, rng.random::<f64>() * TAU);
        let season_phase = rng.random::<f64>() * TAU;

        let mut drift = 0.0;
        let mut ar = 0.0;
        for t in 0..n {
            let tf = t as f64;
            let trend = FX_TREND_AMP * (TAU * tf / (n as f64 / 2.3) + trend_phase.0).sin()
                + FX_TREND_AMP * (TAU * tf / (n as f64 / 5.7) + trend_phase.1).sin();
            let season =
                FX_SEASON_REL * FX_STEP_SD * (TAU * tf / FX_SEASON_PERIOD + season_phase).sin();
            values.set(t, k, base + trend + drift + ar + season);
            drift = FX_DRIFT_POLE * drift + step.sample(&mut rng);
            ar = FX_AR_POLE * ar + ar_innov.sample(&mut rng);
        }
    }
    SeriesFrame {
        values,
        timestamps: None,
        feature_names: (0..d).map(|k| format!("rate{k}")).collect(),
    }
}

/// Writes a frame as a comma-separated file (header row, full-precision
/// values, RFC 3339 timestamps when present) so that reading it back
/// reproduces the frame exactly.
pub fn save_csv(frame: &SeriesFrame, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if frame.timestamps.is_some() {
        write!(out, "timestamp,")?;
    }
    writeln!(out, "{}", frame.feature_names.join(","))?;
    for i in 0..frame.len() {
        if let Some(ts) = &frame.timestamps {
            write!(out, "{},", ts[i].to_rfc3339())?;
        }
        let row: Vec<String> = frame.values.row(i).iter().map(f64::to_string).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}
