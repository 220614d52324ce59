//! Turns a `[dataset]` config block into a windowed dataset plus the
//! provenance that makes a run directory self-describing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use kflow_core::data::{
    add_cyclical_features, load_csv, make_windows, synthetic, CsvSchema, IngestReport,
    SeriesFrame, SplitSpec, WindowedDataset,
};

use crate::config::{DatasetConfig, SyntheticConfig, SyntheticKind, TargetRef};
use crate::CliError;

/// Where a run's data came from, with enough digest material to detect a
/// changed source later.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetProvenance {
    File(IngestReport),
    Synthetic {
        kind: SyntheticKind,
        n: usize,
        d: usize,
        seed: u64,
        /// SHA-256 over the generated values' little-endian bytes.
        values_sha256: String,
    },
}

impl DatasetProvenance {
    /// The digest identifying the exact series content.
    pub fn checksum(&self) -> &str {
        match self {
            DatasetProvenance::File(report) => &report.file_sha256,
            DatasetProvenance::Synthetic { values_sha256, .. } => values_sha256,
        }
    }
}

/// A windowed dataset together with its provenance.
pub struct BuiltDataset {
    pub dataset: WindowedDataset,
    pub provenance: DatasetProvenance,
}

fn generate(synth: &SyntheticConfig) -> (SeriesFrame, DatasetProvenance) {
    let frame = match synth.kind {
        SyntheticKind::NoisyWave => synthetic::noisy_wave_series(synth.n, synth.seed),
        SyntheticKind::FxLike => synthetic::fx_like_series(synth.n, synth.d, synth.seed),
    };
    let mut hasher = Sha256::new();
    for v in frame.values.data() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect::<String>();
    let provenance = DatasetProvenance::Synthetic {
        kind: synth.kind,
        n: synth.n,
        d: synth.d,
        seed: synth.seed,
        values_sha256: digest,
    };
    (frame, provenance)
}

/// Maps target references onto concrete feature indices of the final frame,
/// reporting every unresolvable or duplicated entry.
fn resolve_targets(frame: &SeriesFrame, targets: &[TargetRef]) -> Result<Vec<usize>, Vec<String>> {
    let mut indices = Vec::with_capacity(targets.len());
    let mut errors = Vec::new();
    for t in targets {
        let resolved = match t {
            TargetRef::Index(i) => {
                if *i < frame.dim() {
                    Some(*i)
                } else {
                    errors.push(format!(
                        "dataset: target index {i} out of range for {} features",
                        frame.dim()
                    ));
                    None
                }
            }
            TargetRef::Name(name) => {
                let hit = frame.feature_names.iter().position(|f| f == name);
                if hit.is_none() {
                    errors.push(format!(
                        "dataset: no feature named {name:?}; available: {:?}",
                        frame.feature_names
                    ));
                }
                hit
            }
        };
        if let Some(idx) = resolved {
            if indices.contains(&idx) {
                errors.push(format!("dataset: target {t} resolves to feature {idx} twice"));
            } else {
                indices.push(idx);
            }
        }
    }
    if errors.is_empty() {
        Ok(indices)
    } else {
        Err(errors)
    }
}

/// Loads or generates the series and windows it per the config. `l_override`
/// substitutes the look-back (grid sweeps over `l` reuse the same block).
pub fn build_dataset(
    config: &DatasetConfig,
    l_override: Option<usize>,
) -> Result<BuiltDataset, CliError> {
    let (frame, provenance) = match (&config.path, &config.synthetic) {
        (Some(path), None) => {
            let schema = CsvSchema {
                has_header: config.has_header,
                timestamp_column: config.timestamp_column.clone(),
                gap_policy: config.gap_policy,
            };
            let (frame, report) = load_csv(path, &schema)
                .map_err(|e| CliError::Config(vec![format!("dataset: {e}")]))?;
            if report.rows_rejected > 0 {
                log::warn!(
                    "dataset: rejected {} of {} rows (lines {:?})",
                    report.rows_rejected,
                    report.rows_read,
                    report.rejected_lines
                );
            }
            (frame, DatasetProvenance::File(report))
        }
        (None, Some(synth)) => generate(synth),
        _ => {
            return Err(CliError::Config(vec![
                "dataset: exactly one of `path` and `synthetic` is required".into(),
            ]))
        }
    };

    let frame = if config.cyclical.is_empty() {
        frame
    } else {
        add_cyclical_features(&frame, &config.cyclical)
            .map_err(|e| CliError::Config(vec![format!("dataset: {e}")]))?
    };

    let targets = resolve_targets(&frame, &config.targets).map_err(CliError::Config)?;
    let splits = SplitSpec::new(&config.splits)
        .map_err(|e| CliError::Config(vec![format!("dataset: splits: {e}")]))?;
    let l = l_override.unwrap_or(config.l);
    let dataset = make_windows(
        &frame,
        l,
        config.h,
        &targets,
        config.scale,
        config.difference,
        &splits,
    )
    .map_err(|e| CliError::Config(vec![format!("dataset: {e}")]))?;
    Ok(BuiltDataset {
        dataset,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn synth_block(kind: &str, n: usize, d: usize) -> DatasetConfig {
        DatasetConfig {
            path: None,
            synthetic: Some(SyntheticConfig {
                kind: match kind {
                    "noisy_wave" => SyntheticKind::NoisyWave,
                    _ => SyntheticKind::FxLike,
                },
                n,
                d,
                seed: 11,
            }),
            l: 6,
            h: 2,
            targets: vec![TargetRef::Index(0)],
            splits: vec![0.6, 0.2, 0.2],
            scale: true,
            difference: false,
            cyclical: vec![],
            has_header: true,
            timestamp_column: None,
            gap_policy: kflow_core::data::GapPolicy::Reject,
        }
    }

    #[test]
    fn synthetic_builds_are_deterministic_with_matching_checksums() {
        let config = synth_block("noisy_wave", 120, 1);
        let a = build_dataset(&config, None).unwrap();
        let b = build_dataset(&config, None).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.provenance.checksum(), b.provenance.checksum());
        assert_eq!(a.dataset.len(), 120 - 6 - 2 + 1);

        let other = build_dataset(&synth_block("noisy_wave", 121, 1), None).unwrap();
        assert_ne!(a.provenance.checksum(), other.provenance.checksum());
    }

    #[test]
    fn look_back_override_changes_window_shape_only() {
        let config = synth_block("fx_like", 200, 2);
        let base = build_dataset(&config, None).unwrap();
        let wide = build_dataset(&config, Some(12)).unwrap();
        assert_eq!(base.dataset.input_dim(), 6 * 2);
        assert_eq!(wide.dataset.input_dim(), 12 * 2);
        assert_eq!(base.provenance.checksum(), wide.provenance.checksum());
    }

    #[test]
    fn csv_paths_produce_file_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("series.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "price,volume").unwrap();
        for i in 0..40 {
            writeln!(f, "{},{}", i as f64 * 0.5, 100.0 - i as f64).unwrap();
        }
        drop(f);

        let mut config = synth_block("noisy_wave", 0, 1);
        config.synthetic = None;
        config.path = Some(path);
        config.targets = vec![TargetRef::Name("price".into())];
        let built = build_dataset(&config, None).unwrap();
        assert_eq!(built.dataset.d, 2);
        assert_eq!(built.dataset.target_features, vec![0]);
        match &built.provenance {
            DatasetProvenance::File(report) => {
                assert_eq!(report.rows_read, 40);
                assert_eq!(report.file_sha256.len(), 64);
            }
            other => panic!("expected file provenance, got {other:?}"),
        }
    }

    #[test]
    fn bad_targets_are_all_reported() {
        let mut config = synth_block("fx_like", 100, 2);
        config.targets = vec![
            TargetRef::Index(0),
            TargetRef::Index(7),
            TargetRef::Name("price".into()),
            TargetRef::Index(0),
        ];
        match build_dataset(&config, None) {
            Err(CliError::Config(errors)) => {
                assert_eq!(errors.len(), 3, "{errors:?}");
                assert!(errors[0].contains("out of range"));
                assert!(errors[1].contains("no feature named"));
                assert!(errors[2].contains("twice"));
            }
            other => panic!("expected config errors, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn window_too_large_is_a_config_error() {
        let mut config = synth_block("noisy_wave", 30, 1);
        config.l = 40;
        match build_dataset(&config, None) {
            Err(CliError::Config(errors)) => {
                assert!(errors[0].contains("dataset:"), "{errors:?}")
            }
            other => panic!("expected config errors, got {:?}", other.map(|_| ())),
        }
    }
}
