//! Series container, synthetic generators, CSV ingestion and windowing.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalWindow;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("series must contain at least one value")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("timestamps must be strictly increasing (row {row})")]
    NonMonotoneTimestamps { row: usize },
    #[error("expected {expected} timestamps, got {actual}")]
    TimestampCount { expected: usize, actual: usize },
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: cannot parse timestamp `{value}`")]
    Timestamp { row: usize, value: String },
    #[error("series of length {len} too short for lookback {lookback} + horizon {horizon}")]
    TooShort {
        len: usize,
        lookback: usize,
        horizon: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A univariate series with optional integer timestamps (epoch seconds for
/// ISO-8601 input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    values: Vec<f64>,
    timestamps: Option<Vec<i64>>,
    pub frequency: Option<String>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(i));
        }
        Ok(Self {
            name: name.into(),
            values,
            timestamps: None,
            frequency: None,
        })
    }

    pub fn with_timestamps(mut self, timestamps: Vec<i64>) -> Result<Self, DataError> {
        if timestamps.len() != self.values.len() {
            return Err(DataError::TimestampCount {
                expected: self.values.len(),
                actual: timestamps.len(),
            });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DataError::NonMonotoneTimestamps { row: i + 2 });
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Contiguous sub-series `[start, end)`, timestamps included.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        if start >= end || end > self.len() {
            return Err(DataError::Invalid(format!(
                "slice {start}..{end} of series with length {}",
                self.len()
            )));
        }
        Ok(Self {
            name: self.name.clone(),
            values: self.values[start..end].to_vec(),
            timestamps: self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            frequency: self.frequency.clone(),
        })
    }
}

/// `amplitude·sin(2πt/period) + trend_slope·t + N(0, noise_std²)`.
pub fn gen_sine(
    n: usize,
    period: f64,
    amplitude: f64,
    trend_slope: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Series, DataError> {
    gen_mixture(n, &[(period, amplitude)], trend_slope, noise_std, seed)
}

/// Sum of sinusoids given as `(period, amplitude)` pairs plus trend and noise.
pub fn gen_mixture(
    n: usize,
    components: &[(f64, f64)],
    trend_slope: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Series, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    if components.iter().any(|&(p, _)| !(p > 0.0)) {
        return Err(DataError::Invalid("period must be positive".into()));
    }
    if !(noise_std >= 0.0) {
        return Err(DataError::Invalid("noise_std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let values = (0..n)
        .map(|t| {
            let t = t as f64;
            let seasonal: f64 = components
                .iter()
                .map(|&(p, a)| a * (2.0 * std::f64::consts::PI * t / p).sin())
                .sum();
            let eps = if noise_std > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            seasonal + trend_slope * t + eps
        })
        .collect();
    Series::new("synthetic", values)
}

/// Simple ±1 random walk from the origin.
pub fn gen_random_walk(n: usize, seed: u64) -> Result<Series, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0.0;
    let values = (0..n)
        .map(|i| {
            if i > 0 {
                x += if rng.gen::<bool>() { 1.0 } else { -1.0 };
            }
            x
        })
        .collect();
    Series::new("random_walk", values)
}

fn parse_timestamp(raw: &str, row: usize) -> Result<i64, DataError> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i64>() {
        return Ok(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(raw) {
        return Ok(dt.timestamp());
    }
    if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S") {
        return Ok(dt.and_utc().timestamp());
    }
    if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S") {
        return Ok(dt.and_utc().timestamp());
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(raw, "%Y-%m-%d") {
        return Ok(d
            .and_hms_opt(0, 0, 0)
            .expect("midnight")
            .and_utc()
            .timestamp());
    }
    Err(DataError::Timestamp {
        row,
        value: raw.to_string(),
    })
}

/// Reads one series per requested value column. Row numbers in errors count
/// data rows from 1 (the header is not counted).
pub fn load_csv(
    path: impl AsRef<Path>,
    value_columns: &[&str],
    timestamp_column: Option<&str>,
) -> Result<Vec<Series>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let value_idx: Vec<usize> = value_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<_, _>>()?;
    let ts_idx = timestamp_column.map(find).transpose()?;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); value_columns.len()];
    let mut stamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        for (c, &idx) in value_idx.iter().enumerate() {
            let cell = record.get(idx).map(str::trim).unwrap_or("");
            if cell.is_empty() {
                return Err(DataError::MissingValue {
                    row,
                    column: value_columns[c].to_string(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                row,
                column: value_columns[c].to_string(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    row,
                    column: value_columns[c].to_string(),
                    value: cell.to_string(),
                });
            }
            columns[c].push(v);
        }
        if let Some(idx) = ts_idx {
            let ts = parse_timestamp(record.get(idx).unwrap_or(""), row)?;
            if let Some(&prev) = stamps.last() {
                if ts <= prev {
                    return Err(DataError::NonMonotoneTimestamps { row });
                }
            }
            stamps.push(ts);
        }
    }
    columns
        .into_iter()
        .zip(value_columns)
        .map(|(values, name)| {
            let s = Series::new(*name, values)?;
            if ts_idx.is_some() {
                s.with_timestamps(stamps.clone())
            } else {
                Ok(s)
            }
        })
        .collect()
}

/// Sliding evaluation windows starting at 0 with the given stride.
pub fn split_windows(
    series: &[f64],
    lookback: usize,
    horizon: usize,
    stride: usize,
    seasonality: usize,
) -> Result<Vec<EvalWindow>, DataError> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::Invalid(
            "lookback, horizon and stride must be positive".into(),
        ));
    }
    if lookback + horizon > series.len() {
        return Err(DataError::TooShort {
            len: series.len(),
            lookback,
            horizon,
        });
    }
    let count = (series.len() - lookback - horizon) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let start = w * stride;
            EvalWindow {
                insample: series[start..start + lookback].to_vec(),
                actual: series[start + lookback..start + lookback + horizon].to_vec(),
                seasonality,
            }
        })
        .collect())
}

/// Reserves the last `lookback + horizon·n_eval_windows` points for
/// evaluation. The evaluation part starts at the first lookback point, so
/// every evaluation target lies strictly after the training part.
pub fn holdout_split(
    series: &Series,
    lookback: usize,
    horizon: usize,
    n_eval_windows: usize,
) -> Result<(Series, Series), DataError> {
    let reserved = lookback + horizon * n_eval_windows;
    if n_eval_windows == 0 || reserved >= series.len() {
        return Err(DataError::TooShort {
            len: series.len(),
            lookback,
            horizon: horizon * n_eval_windows,
        });
    }
    let cut = series.len() - reserved;
    Ok((series.slice(0, cut)?, series.slice(cut, series.len())?))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn sine_examples() {
        let s = gen_sine(64, 16.0, 2.0, 0.0, 0.0, 1).unwrap();
        assert!((s.values()[4] - 2.0).abs() < 1e-12);
        let s = gen_sine(10, 7.0, 0.0, 1.0, 0.0, 1).unwrap();
        for (t, v) in s.values().iter().enumerate() {
            assert!((v - t as f64).abs() < 1e-12);
        }
        let a = gen_sine(100, 12.0, 1.0, 0.1, 0.3, 9).unwrap();
        let b = gen_sine(100, 12.0, 1.0, 0.1, 0.3, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_sine(100, 12.0, 1.0, 0.1, 0.3, 10).unwrap();
        assert_ne!(a, c);
        assert!(gen_sine(0, 12.0, 1.0, 0.0, 0.0, 0).is_err());
        assert!(gen_sine(5, 0.0, 1.0, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn random_walk_examples() {
        let s = gen_random_walk(500, 4).unwrap();
        assert_eq!(s.values()[0], 0.0);
        assert!(s.values().windows(2).all(|w| (w[1] - w[0]).abs() == 1.0));
        assert_eq!(s, gen_random_walk(500, 4).unwrap());
    }

    #[test]
    fn csv_well_formed() {
        let f = write_csv("ts,a,b\n1,1.5,2\n2,2.5,3\n3,-1e2,4\n");
        let out = load_csv(f.path(), &["a", "b"], Some("ts")).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].values(), &[1.5, 2.5, -100.0]);
        assert_eq!(out[1].values(), &[2.0, 3.0, 4.0]);
        assert_eq!(out[0].timestamps().unwrap(), &[1, 2, 3]);
    }

    #[test]
    fn csv_iso_timestamps() {
        let f = write_csv("date,v\n2024-01-01,1\n2024-01-02T00:00:00Z,2\n2024-01-02 06:00:00,3\n");
        let out = load_csv(f.path(), &["v"], Some("date")).unwrap();
        let ts = out[0].timestamps().unwrap();
        assert_eq!(ts[1] - ts[0], 86_400);
        assert_eq!(ts[2] - ts[1], 6 * 3600);
    }

    #[test]
    fn csv_errors_are_distinct() {
        let f = write_csv("v\n1\nabc\n3\n");
        match load_csv(f.path(), &["v"], None) {
            Err(DataError::Parse { row, value, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(value, "abc");
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write_csv("t,v\n2,1\n1,2\n3,3\n");
        assert!(matches!(
            load_csv(f.path(), &["v"], Some("t")),
            Err(DataError::NonMonotoneTimestamps { row: 2 })
        ));
        let f = write_csv("v\n1\n2\n");
        assert!(matches!(
            load_csv(f.path(), &["w"], None),
            Err(DataError::MissingColumn(_))
        ));
        let f = write_csv("v,w\n1,2\n,3\n");
        assert!(matches!(
            load_csv(f.path(), &["v"], None),
            Err(DataError::MissingValue { row: 2, .. })
        ));
    }

    #[test]
    fn window_counts() {
        let s: Vec<f64> = (0..8).map(f64::from).collect();
        assert_eq!(split_windows(&s, 4, 2, 2, 1).unwrap().len(), 2);
        assert_eq!(split_windows(&s, 4, 2, 8, 1).unwrap().len(), 1);
        let w = split_windows(&s, 5, 3, 1, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].insample, &s[..5]);
        assert_eq!(w[0].actual, &s[5..]);
        assert!(matches!(
            split_windows(&s, 6, 3, 1, 1),
            Err(DataError::TooShort { .. })
        ));
    }

    #[test]
    fn holdout_has_no_leakage() {
        let s = Series::new("x", (0..100).map(f64::from).collect()).unwrap();
        let (train, eval) = holdout_split(&s, 20, 10, 3).unwrap();
        assert_eq!(train.len(), 50);
        let last_train = *train.values().last().unwrap();
        let windows = split_windows(eval.values(), 20, 10, 10, 1).unwrap();
        assert_eq!(windows.len(), 3);
        for w in &windows {
            assert!(w.actual.iter().all(|&v| v > last_train));
        }
    }

    #[test]
    fn timestamps_validated() {
        let s = Series::new("x", vec![1.0, 2.0]).unwrap();
        assert!(s.clone().with_timestamps(vec![1]).is_err());
        assert!(s.clone().with_timestamps(vec![2, 2]).is_err());
        assert!(s.with_timestamps(vec![1, 2]).is_ok());
        assert!(Series::new("x", vec![]).is_err());
        assert!(Series::new("x", vec![f64::NAN]).is_err());
    }
}
