//! Series frames: CSV ingestion and calendar feature augmentation.

use super::DataError;
use crate::linalg::Matrix;
use chrono::{DateTime, Datelike, Timelike, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::TAU;
use std::path::Path;

/// A multivariate series: one row per time stamp, one column per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    /// n x d value matrix; guaranteed finite after ingestion.
    pub values: Matrix,
    /// Strictly increasing instants, when the source provides them.
    pub timestamps: Option<Vec<DateTime<Utc>>>,
    /// One label per column.
    pub feature_names: Vec<String>,
}

impl SeriesFrame {
    /// Number of time stamps.
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of features.
    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// How rows with unparseable or missing cells are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapPolicy {
    /// Drop the whole row and record it.
    Reject,
    /// Copy each gap cell from the previous accepted row; rows before any
    /// accepted row are dropped.
    ForwardFill,
}

/// CSV ingestion settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Whether the first line is a header naming the features. Headerless
    /// files get synthesized names `f0..f{d-1}` and carry no timestamps.
    pub has_header: bool,
    /// Name of the timestamp column. When `None`, a first column whose
    /// header is `timestamp` (case-insensitive) is detected automatically.
    pub timestamp_column: Option<String>,
    pub gap_policy: GapPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            has_header: true,
            timestamp_column: None,
            gap_policy: GapPolicy::Reject,
        }
    }
}

/// Provenance of one ingestion: what was read, what was dropped, and a
/// digest of the exact bytes the series came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    pub path: String,
    pub file_sha256: String,
    /// Data rows encountered in the file (excluding the header).
    pub rows_read: usize,
    pub rows_rejected: usize,
    pub cells_forward_filled: usize,
    /// 1-based line numbers of rejected rows.
    pub rejected_lines: Vec<usize>,
}

fn parse_timestamp(cell: &str) -> Option<DateTime<Utc>> {
    let cell = cell.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(cell) {
        return Some(dt.with_timezone(&Utc));
    }
    if let Ok(secs) = cell.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0);
    }
    None
}

/// Reads a comma-separated series file into a [`SeriesFrame`].
///
/// Cells that are empty or fail to parse as finite numbers count as gaps and
/// are handled per the schema's [`GapPolicy`]; rows with unparseable
/// timestamps are always rejected. The report records every dropped line.
pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<(SeriesFrame, IngestReport), DataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path_str.clone(),
        source,
    })?;
    let file_sha256 = {
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .from_reader(bytes.as_slice());

    let mut feature_names: Vec<String> = Vec::new();
    let mut ts_col: Option<usize> = None;
    if schema.has_header {
        let headers = reader
            .headers()
            .map_err(|e| csv_parse_error(&e))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect::<Vec<_>>();
        ts_col = match &schema.timestamp_column {
            Some(name) => Some(
                headers
                    .iter()
                    .position(|h| h.eq_ignore_ascii_case(name))
                    .ok_or_else(|| DataError::ParseError {
                        line: 1,
                        message: format!("timestamp column {name:?} not found in header"),
                    })?,
            ),
            None => headers
                .first()
                .filter(|h| h.eq_ignore_ascii_case("timestamp"))
                .map(|_| 0),
        };
        feature_names = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != ts_col)
            .map(|(_, h)| h.clone())
            .collect();
    } else if schema.timestamp_column.is_some() {
        return Err(DataError::ParseError {
            line: 1,
            message: "a named timestamp column requires a header row".into(),
        });
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut timestamps: Vec<DateTime<Utc>> = Vec::new();
    let mut report = IngestReport {
        path: path_str,
        file_sha256,
        rows_read: 0,
        rows_rejected: 0,
        cells_forward_filled: 0,
        rejected_lines: Vec::new(),
    };

    for record in reader.records() {
        let record = record.map_err(|e| csv_parse_error(&e))?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(report.rows_read + if schema.has_header { 2 } else { 1 });
        report.rows_read += 1;

        if feature_names.is_empty() {
            // Headerless file: infer the width from the first record.
            feature_names = (0..record.len()).map(|i| format!("f{i}")).collect();
        }
        let expected = feature_names.len() + usize::from(ts_col.is_some());
        if record.len() != expected {
            return Err(DataError::ParseError {
                line,
                message: format!("expected {expected} fields, found {}", record.len()),
            });
        }

        let reject = |report: &mut IngestReport| {
            report.rows_rejected += 1;
            report.rejected_lines.push(line);
        };

        let ts = match ts_col {
            Some(col) => match parse_timestamp(&record[col]) {
                Some(ts) => Some(ts),
                None => {
                    reject(&mut report);
                    continue;
                }
            },
            None => None,
        };
        if let (Some(ts), Some(last)) = (ts, timestamps.last()) {
            if ts <= *last {
                return Err(DataError::NonMonotoneTimestamps { line });
            }
        }

        let mut parsed: Vec<Option<f64>> = Vec::with_capacity(feature_names.len());
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == ts_col {
                continue;
            }
            let v = cell.trim().parse::<f64>().ok().filter(|v| v.is_finite());
            parsed.push(v);
        }

        let has_gap = parsed.iter().any(Option::is_none);
        let row: Vec<f64> = if !has_gap {
            parsed.into_iter().map(Option::unwrap).collect()
        } else {
            match (schema.gap_policy, rows.last()) {
                (GapPolicy::ForwardFill, Some(prev)) => parsed
                    .into_iter()
                    .enumerate()
                    .map(|(k, v)| {
                        v.unwrap_or_else(|| {
                            report.cells_forward_filled += 1;
                            prev[k]
                        })
                    })
                    .collect(),
                _ => {
                    reject(&mut report);
                    continue;
                }
            }
        };

        rows.push(row);
        if let Some(ts) = ts {
            timestamps.push(ts);
        }
    }

    if rows.len() < 2 {
        return Err(DataError::EmptySeries {
            usable_rows: rows.len(),
        });
    }

    let d = feature_names.len();
    let n = rows.len();
    let mut values = Matrix::zeros(n, d);
    for (i, row) in rows.iter().enumerate() {
        values.row_mut(i).copy_from_slice(row);
    }

    let frame = SeriesFrame {
        values,
        timestamps: ts_col.map(|_| timestamps),
        feature_names,
    };
    Ok((frame, report))
}

fn csv_parse_error(err: &csv::Error) -> DataError {
    DataError::ParseError {
        line: err.position().map(|p| p.line() as usize).unwrap_or(0),
        message: err.to_string(),
    }
}

/// Calendar fields available for cyclical encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalendarField {
    /// Hour of day, period 24.
    Hour,
    /// Day of week (Monday = 0), period 7.
    Weekday,
    /// Month of year (January = 0), period 12.
    Month,
}

impl CalendarField {
    fn name(self) -> &'static str {
        match self {
            CalendarField::Hour => "hour",
            CalendarField::Weekday => "weekday",
            CalendarField::Month => "month",
        }
    }

    fn phase_fraction(self, ts: &DateTime<Utc>) -> f64 {
        match self {
            CalendarField::Hour => f64::from(ts.hour()) / 24.0,
            CalendarField::Weekday => {
                f64::from(ts.weekday().num_days_from_monday()) / 7.0
            }
            CalendarField::Month => f64::from(ts.month() - 1) / 12.0,
        }
    }
}

/// Appends a `(sin, cos)` column pair per requested calendar field, so phase
/// zero (hour 0, Monday, January) encodes as `(0, 1)`.
pub fn add_cyclical_features(
    frame: &SeriesFrame,
    fields: &[CalendarField],
) -> Result<SeriesFrame, DataError> {
    let timestamps = frame
        .timestamps
        .as_ref()
        .ok_or(DataError::MissingTimestamps)?;
    let n = frame.len();
    let d = frame.dim();
    let mut values = Matrix::zeros(n, d + 2 * fields.len());
    for i in 0..n {
        values.row_mut(i)[..d].copy_from_slice(frame.values.row(i));
        for (f, field) in fields.iter().enumerate() {
            let angle = TAU * field.phase_fraction(&timestamps[i]);
            values.set(i, d + 2 * f, angle.sin());
            values.set(i, d + 2 * f + 1, angle.cos());
        }
    }
    let mut feature_names = frame.feature_names.clone();
    for field in fields {
        feature_names.push(format!("{}_sin", field.name()));
        feature_names.push(format!("{}_cos", field.name()));
    }
    Ok(SeriesFrame {
        values,
        timestamps: frame.timestamps.clone(),
        feature_names,
    })
}
