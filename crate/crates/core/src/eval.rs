//! Accuracy metrics and the benchmark harness for the DCoT and mirror
//! ensemble sweeps.

use std::path::Path;

use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_windows, DataError};
use crate::infer::{mirror_ensemble_quantiles, Forecaster, HorizonForecast, InferError};
use crate::loss::pinball;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: forecast {forecast}, actual {actual}")]
    LengthMismatch { forecast: usize, actual: usize },
    #[error("empty forecast")]
    Empty,
    #[error("in-sample seasonal differences are all zero; MASE scale undefined")]
    UndefinedScale,
    #[error("window needs more than {seasonality} in-sample points, has {len}")]
    ShortInsample { len: usize, seasonality: usize },
    #[error("sum of |actual| is zero; WQL undefined")]
    ZeroActual,
    #[error("CRPS needs levels 0.1..0.9 in steps of 0.1, got {0:?}")]
    WrongLevels(Vec<f64>),
    #[error("quantile level {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    pub insample: Vec<f64>,
    pub actual: Vec<f64>,
    pub seasonality: usize,
}

fn same_len(forecast: &[f64], actual: &[f64]) -> Result<(), EvalError> {
    if forecast.len() != actual.len() {
        return Err(EvalError::LengthMismatch {
            forecast: forecast.len(),
            actual: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mse(forecast: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    same_len(forecast, actual)?;
    let s: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, a)| (f - a) * (f - a))
        .sum();
    Ok(s / actual.len() as f64)
}

pub fn mae(forecast: &[f64], actual: &[f64]) -> Result<f64, EvalError> {
    same_len(forecast, actual)?;
    let s: f64 = forecast
        .iter()
        .zip(actual)
        .map(|(f, a)| (f - a).abs())
        .sum();
    Ok(s / actual.len() as f64)
}

/// `((m − s)/n) · Σ|x̂ − x| / Σ_{t ≤ m−s} |x_t − x_{t+s}|`.
pub fn mase(forecast: &[f64], window: &EvalWindow) -> Result<f64, EvalError> {
    same_len(forecast, &window.actual)?;
    let (m, s) = (window.insample.len(), window.seasonality);
    if s == 0 || m <= s {
        return Err(EvalError::ShortInsample {
            len: m,
            seasonality: s,
        });
    }
    let scale: f64 = window
        .insample
        .iter()
        .zip(&window.insample[s..])
        .map(|(a, b)| (a - b).abs())
        .sum();
    if scale == 0.0 {
        return Err(EvalError::UndefinedScale);
    }
    let err: f64 = forecast
        .iter()
        .zip(&window.actual)
        .map(|(f, a)| (f - a).abs())
        .sum();
    Ok((m - s) as f64 / window.actual.len() as f64 * err / scale)
}

/// `2 · Σ_t ℓ_α(q_t, x_t) / Σ_t |x_t|`.
pub fn wql_metric(quantile: &[f64], actual: &[f64], alpha: f64) -> Result<f64, EvalError> {
    same_len(quantile, actual)?;
    let denom: f64 = actual.iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(EvalError::ZeroActual);
    }
    let mut num = 0.0;
    for (&q, &x) in quantile.iter().zip(actual) {
        num += pinball(q, x, alpha).map_err(|_| EvalError::BadAlpha(alpha))?;
    }
    Ok(2.0 * num / denom)
}

pub fn is_decile_set(levels: &[f64]) -> bool {
    levels.len() == 9
        && levels
            .iter()
            .enumerate()
            .all(|(k, &a)| (a - (k + 1) as f64 / 10.0).abs() < 1e-12)
}

/// Mean WQL over the nine deciles.
pub fn crps_approx(forecast: &HorizonForecast, actual: &[f64]) -> Result<f64, EvalError> {
    if !is_decile_set(forecast.levels()) {
        return Err(EvalError::WrongLevels(forecast.levels().to_vec()));
    }
    let mut total = 0.0;
    for (k, &alpha) in forecast.levels().iter().enumerate() {
        total += wql_metric(forecast.level(k), actual, alpha)?;
    }
    Ok(total / 9.0)
}

/// Repeats the last observed season over the horizon.
pub fn seasonal_naive(insample: &[f64], horizon: usize, s: usize) -> Vec<f64> {
    let m = insample.len();
    (0..horizon).map(|h| insample[m - s + h % s]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Dataset {
    pub name: String,
    pub values: Vec<f64>,
    pub seasonality: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct Protocol {
    /// Context for plain (non-ensemble) cells.
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub dcot_grid: Vec<usize>,
    /// Each entry is one mirror-ensemble cell over these lookbacks.
    pub ensembles: Vec<Vec<usize>>,
    /// Also score every single mirror component of each ensemble.
    pub score_components: bool,
    /// Aggregate across datasets with the geometric instead of arithmetic mean.
    pub geometric: bool,
    /// Evaluate only the last this-many windows of each dataset.
    pub max_windows: Option<usize>,
    /// Sort each point's quantiles ascending before scoring.
    pub sort_quantiles: bool,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            lookback: 512,
            horizon: 64,
            stride: 64,
            dcot_grid: vec![0],
            ensembles: Vec::new(),
            score_components: false,
            geometric: false,
            max_windows: None,
            sort_quantiles: true,
            seed: 0,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(EvalError::Protocol(
                "lookback, horizon and stride must be positive".into(),
            ));
        }
        if self.dcot_grid.is_empty() {
            return Err(EvalError::Protocol("dcot_grid is empty".into()));
        }
        if self
            .ensembles
            .iter()
            .any(|e| e.is_empty() || e.contains(&0))
        {
            return Err(EvalError::Protocol(
                "ensemble lookbacks must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    /// Longest history any cell needs.
    pub fn context_needed(&self) -> usize {
        self.ensembles
            .iter()
            .flatten()
            .copied()
            .chain([self.lookback])
            .max()
            .unwrap_or(self.lookback)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Plain,
    Ensemble,
    /// `Model(x_j)` of one ensemble lookback.
    Direct,
    /// `−Model(−x_j)` of one ensemble lookback.
    Mirrored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Cell {
    pub id: String,
    pub kind: CellKind,
    pub dcot_points: usize,
    pub lookbacks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct WindowMetrics {
    pub dataset: String,
    pub cell: String,
    pub window: usize,
    pub mse: f64,
    pub mae: f64,
    pub mase: Option<f64>,
    pub crps: Option<f64>,
    /// WQL per quantile level, `None` where undefined.
    pub wql: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Summary {
    /// Dataset name, or `"all"` for the cross-dataset aggregate.
    pub dataset: String,
    pub cell: String,
    pub n_windows: usize,
    pub mse: f64,
    pub mae: f64,
    pub mase: Option<f64>,
    pub crps: Option<f64>,
    pub wql: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BenchReport {
    pub protocol: Protocol,
    pub levels: Vec<f64>,
    pub cells: Vec<Cell>,
    pub windows: Vec<WindowMetrics>,
    pub summaries: Vec<Summary>,
}

impl BenchReport {
    pub fn summary(&self, dataset: &str, cell: &str) -> Option<&Summary> {
        self.summaries
            .iter()
            .find(|s| s.dataset == dataset && s.cell == cell)
    }

    pub fn json_schema() -> serde_json::Value {
        serde_json::to_value(schemars::schema_for!(BenchReport)).expect("schema serialises")
    }

    /// Writes `report.json`, `report.csv` and `report.schema.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(self)?)?;
        std::fs::write(
            dir.join("report.schema.json"),
            serde_json::to_vec_pretty(&Self::json_schema())?,
        )?;
        let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
        let mut header: Vec<String> = ["dataset", "cell", "window", "mse", "mae", "mase", "crps"]
            .map(String::from)
            .to_vec();
        header.extend(self.levels.iter().map(|a| format!("wql_{a}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.windows {
            let mut row = vec![
                r.dataset.clone(),
                r.cell.clone(),
                r.window.to_string(),
                r.mse.to_string(),
                r.mae.to_string(),
                opt(r.mase),
                opt(r.crps),
            ];
            row.extend(r.wql.iter().map(|&v| opt(v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn build_cells(protocol: &Protocol) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &dcot in &protocol.dcot_grid {
        cells.push(Cell {
            id: format!("plain_lb{}_dcot{dcot}", protocol.lookback),
            kind: CellKind::Plain,
            dcot_points: dcot,
            lookbacks: vec![protocol.lookback],
        });
        for lbs in &protocol.ensembles {
            let tag = lbs
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("-");
            cells.push(Cell {
                id: format!("ens_lb{tag}_dcot{dcot}"),
                kind: CellKind::Ensemble,
                dcot_points: dcot,
                lookbacks: lbs.clone(),
            });
            if protocol.score_components {
                for &lb in lbs {
                    for (kind, name) in
                        [(CellKind::Direct, "direct"), (CellKind::Mirrored, "mirror")]
                    {
                        let id = format!("{name}_lb{lb}_dcot{dcot}");
                        if !cells.iter().any(|c| c.id == id) {
                            cells.push(Cell {
                                id,
                                kind,
                                dcot_points: dcot,
                                lookbacks: vec![lb],
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

fn cell_forecast<F: Forecaster + ?Sized>(
    model: &F,
    cell: &Cell,
    insample: &[f64],
    horizon: usize,
) -> Result<HorizonForecast, EvalError> {
    let tail = |lb: usize| &insample[insample.len() - lb..];
    Ok(match cell.kind {
        CellKind::Plain | CellKind::Direct => {
            model.forecast(tail(cell.lookbacks[0]), horizon, cell.dcot_points)?
        }
        CellKind::Mirrored => {
            let neg: Vec<f64> = tail(cell.lookbacks[0]).iter().map(|v| -v).collect();
            crate::infer::quantile_negate(&model.forecast(&neg, horizon, cell.dcot_points)?)?
        }
        CellKind::Ensemble => {
            mirror_ensemble_quantiles(model, insample, &cell.lookbacks, horizon, cell.dcot_points)?
        }
    })
}

/// Scores one forecast against a window. The point forecast is the median.
pub fn score_window(
    forecast: &HorizonForecast,
    window: &EvalWindow,
) -> Result<(f64, f64, Option<f64>, Option<f64>, Vec<Option<f64>>), EvalError> {
    let point = forecast.median()?;
    let wql = forecast
        .levels()
        .iter()
        .enumerate()
        .map(|(k, &a)| wql_metric(forecast.level(k), &window.actual, a).ok())
        .collect();
    Ok((
        mse(point, &window.actual)?,
        mae(point, &window.actual)?,
        mase(point, window).ok(),
        crps_approx(forecast, &window.actual).ok(),
        wql,
    ))
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

fn geo_mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        if v <= 0.0 {
            return Some(0.0);
        }
        s += v.ln();
        n += 1;
    }
    (n > 0).then(|| (s / n as f64).exp())
}

fn summarise(
    dataset: &str,
    cell: &str,
    rows: &[&WindowMetrics],
    n_levels: usize,
    agg: fn(&mut dyn Iterator<Item = f64>) -> Option<f64>,
) -> Summary {
    let col = |f: &dyn Fn(&WindowMetrics) -> Option<f64>| {
        let mut it = rows.iter().filter_map(|r| f(r));
        agg(&mut it)
    };
    Summary {
        dataset: dataset.to_string(),
        cell: cell.to_string(),
        n_windows: rows.len(),
        mse: col(&|r| Some(r.mse)).unwrap_or(f64::NAN),
        mae: col(&|r| Some(r.mae)).unwrap_or(f64::NAN),
        mase: col(&|r| r.mase),
        crps: col(&|r| r.crps),
        wql: (0..n_levels).map(|k| col(&|r| r.wql[k])).collect(),
    }
}

/// Sweeps every cell of the protocol over every dataset.
///
/// Per-dataset summaries are arithmetic means over windows. The `"all"`
/// summary combines the per-dataset means with the arithmetic or, if
/// `protocol.geometric` is set, geometric mean.
pub fn run_benchmark<F: Forecaster + ?Sized>(
    model: &F,
    levels: &[f64],
    datasets: &[Dataset],
    protocol: &Protocol,
) -> Result<BenchReport, EvalError> {
    protocol.validate()?;
    if datasets.is_empty() {
        return Err(EvalError::InsufficientData("no datasets".into()));
    }
    let context = protocol.context_needed();
    let cells = build_cells(protocol);
    let mut windows = Vec::new();
    for ds in datasets {
        let mut ws = split_windows(
            &ds.values,
            context,
            protocol.horizon,
            protocol.stride,
            ds.seasonality,
        )
        .map_err(|e| EvalError::InsufficientData(format!("dataset `{}`: {e}", ds.name)))?;
        if let Some(max) = protocol.max_windows {
            let skip = ws.len().saturating_sub(max);
            ws.drain(..skip);
        }
        let offset = ws.len();
        let jobs: Vec<(&Cell, usize)> = cells
            .iter()
            .flat_map(|c| (0..offset).map(move |w| (c, w)))
            .collect();
        let rows = jobs
            .par_iter()
            .map(|&(cell, w)| {
                let win = &ws[w];
                let mut f = cell_forecast(model, cell, &win.insample, protocol.horizon)?;
                if protocol.sort_quantiles {
                    f.sort_levels();
                }
                let (mse, mae, mase, crps, wql) = score_window(&f, win)?;
                Ok(WindowMetrics {
                    dataset: ds.name.clone(),
                    cell: cell.id.clone(),
                    window: w,
                    mse,
                    mae,
                    mase,
                    crps,
                    wql,
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        windows.extend(rows);
    }

    let mut summaries = Vec::new();
    for cell in &cells {
        let mut per_ds = Vec::new();
        for ds in datasets {
            let rows: Vec<&WindowMetrics> = windows
                .iter()
                .filter(|r| r.dataset == ds.name && r.cell == cell.id)
                .collect();
            per_ds.push(summarise(&ds.name, &cell.id, &rows, levels.len(), |it| {
                mean_of(it)
            }));
        }
        let as_rows: Vec<WindowMetrics> = per_ds
            .iter()
            .map(|s| WindowMetrics {
                dataset: s.dataset.clone(),
                cell: s.cell.clone(),
                window: 0,
                mse: s.mse,
                mae: s.mae,
                mase: s.mase,
                crps: s.crps,
                wql: s.wql.clone(),
            })
            .collect();
        let refs: Vec<&WindowMetrics> = as_rows.iter().collect();
        let agg: fn(&mut dyn Iterator<Item = f64>) -> Option<f64> = if protocol.geometric {
            |it| geo_mean_of(it)
        } else {
            |it| mean_of(it)
        };
        let mut all = summarise("all", &cell.id, &refs, levels.len(), agg);
        all.n_windows = per_ds.iter().map(|s| s.n_windows).sum();
        summaries.extend(per_ds);
        summaries.push(all);
    }
    Ok(BenchReport {
        protocol: protocol.clone(),
        levels: levels.to_vec(),
        cells,
        windows,
        summaries,
    })
}

/// Side-by-side summaries of two models on the same protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationRow {
    pub dataset: String,
    pub cell: String,
    pub vanilla: Summary,
    pub u_shape: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn compare_structures(vanilla: &BenchReport, u_shape: &BenchReport) -> AblationReport {
    let rows = vanilla
        .summaries
        .iter()
        .filter_map(|v| {
            u_shape.summary(&v.dataset, &v.cell).map(|u| AblationRow {
                dataset: v.dataset.clone(),
                cell: v.cell.clone(),
                vanilla: v.clone(),
                u_shape: u.clone(),
            })
        })
        .collect();
    AblationReport { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(insample: Vec<f64>, actual: Vec<f64>, s: usize) -> EvalWindow {
        EvalWindow {
            insample,
            actual,
            seasonality: s,
        }
    }

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mse(&[2.0], &[-1.0]).unwrap(), 9.0);
        assert_eq!(mae(&[2.0], &[-1.0]).unwrap(), 3.0);
        assert!(matches!(
            mse(&[1.0], &[1.0, 2.0]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn mase_examples() {
        let w = window(vec![0.0, 1.0, 0.0, 1.0, 0.0], vec![1.0, 0.0], 1);
        assert_eq!(mase(&[1.0, 0.0], &w).unwrap(), 0.0);
        assert!((mase(&[1.0, 1.0], &w).unwrap() - 0.5).abs() < 1e-15);
        let flat = window(vec![3.0; 6], vec![1.0], 1);
        assert!(matches!(
            mase(&[1.0], &flat),
            Err(EvalError::UndefinedScale)
        ));
        let short = window(vec![1.0, 2.0], vec![1.0], 2);
        assert!(matches!(
            mase(&[1.0], &short),
            Err(EvalError::ShortInsample { .. })
        ));
    }

    #[test]
    fn wql_and_crps_examples() {
        assert_eq!(wql_metric(&[1.0, 2.0], &[1.0, 2.0], 0.3).unwrap(), 0.0);
        assert_eq!(wql_metric(&[0.0], &[2.0], 0.5).unwrap(), 1.0);
        assert!(matches!(
            wql_metric(&[1.0], &[0.0], 0.5),
            Err(EvalError::ZeroActual)
        ));

        let levels: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let actual = [1.0, -2.0];
        let perfect = HorizonForecast::new(levels.clone(), 2, actual.repeat(9)).unwrap();
        assert_eq!(crps_approx(&perfect, &actual).unwrap(), 0.0);
        let bad = HorizonForecast::new(vec![0.1, 0.5, 0.9], 2, vec![0.0; 6]).unwrap();
        assert!(matches!(
            crps_approx(&bad, &actual),
            Err(EvalError::WrongLevels(_))
        ));
    }

    #[test]
    fn seasonal_naive_repeats_last_season() {
        assert_eq!(
            seasonal_naive(&[1.0, 2.0, 3.0, 4.0, 5.0], 5, 2),
            vec![4.0, 5.0, 4.0, 5.0, 4.0]
        );
        assert_eq!(seasonal_naive(&[1.0, 2.0], 3, 1), vec![2.0; 3]);
    }

    /// Emits levels in reverse order, so every point's quantiles cross.
    struct Crossing;

    impl Forecaster for Crossing {
        fn forecast(
            &self,
            history: &[f64],
            horizon: usize,
            _dcot_points: usize,
        ) -> Result<HorizonForecast, InferError> {
            let last = *history.last().unwrap();
            let levels: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
            let values = (0..9)
                .flat_map(|k| vec![last + (4.0 - k as f64); horizon])
                .collect();
            HorizonForecast::new(levels, horizon, values)
        }
    }

    #[test]
    fn quantiles_sorted_before_scoring_by_default() {
        let levels: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
        let data = [Dataset {
            name: "d".into(),
            values: (0..40).map(|t| 1.0 + t as f64 * 0.5).collect(),
            seasonality: 1,
        }];
        let protocol = Protocol {
            lookback: 16,
            horizon: 4,
            stride: 8,
            ..Protocol::default()
        };
        let sorted = run_benchmark(&Crossing, &levels, &data, &protocol).unwrap();
        let raw = run_benchmark(
            &Crossing,
            &levels,
            &data,
            &Protocol {
                sort_quantiles: false,
                ..protocol.clone()
            },
        )
        .unwrap();
        let (a, b) = (&sorted.windows[0], &raw.windows[0]);
        assert_eq!(a.mse, b.mse);
        assert!(a.crps.unwrap() < b.crps.unwrap());
    }
}
