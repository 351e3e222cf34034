//! Joint forecasting with delayed chain-of-thought placeholders and the
//! sign-mirrored multi-lookback ensemble.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::tokenize::{append_placeholders, patchify, TokenizeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferError {
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("history of {len} points is shorter than one patch ({need})")]
    ShortHistory { len: usize, need: usize },
    #[error("lookback {lookback} exceeds history length {len}")]
    LookbackTooLong { lookback: usize, len: usize },
    #[error("at least one lookback is required")]
    NoLookbacks,
    #[error("quantile levels are not symmetric about 0.5: {0:?}")]
    AsymmetricLevels(Vec<f64>),
    #[error("no 0.5 quantile level to use as point forecast")]
    NoMedian,
    #[error("forecast shapes differ")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

/// Quantile forecast for consecutive future points, `R x horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonForecast {
    levels: Vec<f64>,
    horizon: usize,
    values: Vec<f64>,
}

impl HorizonForecast {
    pub fn new(levels: Vec<f64>, horizon: usize, values: Vec<f64>) -> Result<Self, InferError> {
        if values.len() != levels.len() * horizon {
            return Err(InferError::ShapeMismatch);
        }
        Ok(Self {
            levels,
            horizon,
            values,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.values[k * self.horizon..(k + 1) * self.horizon]
    }

    pub fn median_index(&self) -> Option<usize> {
        self.levels.iter().position(|&a| (a - 0.5).abs() < 1e-12)
    }

    /// The 0.5-quantile path.
    pub fn median(&self) -> Result<&[f64], InferError> {
        Ok(self.level(self.median_index().ok_or(InferError::NoMedian)?))
    }

    /// Sorts each point's quantiles ascending across levels.
    pub fn sort_levels(&mut self) {
        let (r, h) = (self.levels.len(), self.horizon);
        let mut col = vec![0.0; r];
        for t in 0..h {
            for (k, c) in col.iter_mut().enumerate() {
                *c = self.values[k * h + t];
            }
            col.sort_by(|a, b| a.total_cmp(b));
            for (k, c) in col.iter().enumerate() {
                self.values[k * h + t] = *c;
            }
        }
    }
}

/// Anything that turns a history into a quantile forecast.
pub trait Forecaster: Sync {
    fn forecast(
        &self,
        history: &[f64],
        horizon: usize,
        dcot_points: usize,
    ) -> Result<HorizonForecast, InferError>;
}

impl Forecaster for Model {
    fn forecast(
        &self,
        history: &[f64],
        horizon: usize,
        dcot_points: usize,
    ) -> Result<HorizonForecast, InferError> {
        forecast_dcot(self, history, horizon, dcot_points)
    }
}

/// Placeholder tokens needed to cover `horizon + dcot_points` points.
pub fn placeholder_count(horizon: usize, dcot_points: usize, patch_len: usize) -> usize {
    (horizon + dcot_points).div_ceil(patch_len)
}

/// One joint pass over history plus placeholders; only the first `horizon`
/// predicted points are kept.
pub fn forecast_dcot(
    model: &Model,
    history: &[f64],
    horizon: usize,
    dcot_points: usize,
) -> Result<HorizonForecast, InferError> {
    if horizon == 0 {
        return Err(InferError::ZeroHorizon);
    }
    let p = model.config.patch_len;
    if history.len() < p {
        return Err(InferError::ShortHistory {
            len: history.len(),
            need: p,
        });
    }
    let grid = patchify(history, p)?;
    let seq = append_placeholders(&grid, placeholder_count(horizon, dcot_points, p))?;
    let qf = model.predict(&seq)?;
    let levels = qf.levels().to_vec();
    let values = (0..levels.len())
        .flat_map(|k| qf.level(k)[..horizon].to_vec())
        .collect();
    HorizonForecast::new(levels, horizon, values)
}

/// Forecast of `−X` from a forecast of `X`: values negated, level `α` taken
/// from level `1 − α`.
pub fn quantile_negate(f: &HorizonForecast) -> Result<HorizonForecast, InferError> {
    let r = f.levels.len();
    let symmetric = (0..r).all(|k| (f.levels[k] + f.levels[r - 1 - k] - 1.0).abs() < 1e-9);
    if !symmetric {
        return Err(InferError::AsymmetricLevels(f.levels.clone()));
    }
    let values = (0..r)
        .flat_map(|k| f.level(r - 1 - k).iter().map(|v| -v).collect::<Vec<_>>())
        .collect();
    HorizonForecast::new(f.levels.clone(), f.horizon, values)
}

/// The `2k` mirror components, in order `Model(x_j), −Model(−x_j)` per lookback.
pub fn mirror_components<F: Forecaster + ?Sized>(
    model: &F,
    history: &[f64],
    lookbacks: &[usize],
    horizon: usize,
    dcot_points: usize,
) -> Result<Vec<HorizonForecast>, InferError> {
    if lookbacks.is_empty() {
        return Err(InferError::NoLookbacks);
    }
    if let Some(&lb) = lookbacks.iter().find(|&&lb| lb > history.len() || lb == 0) {
        return Err(InferError::LookbackTooLong {
            lookback: lb,
            len: history.len(),
        });
    }
    let jobs: Vec<(usize, bool)> = lookbacks
        .iter()
        .flat_map(|&lb| [(lb, false), (lb, true)])
        .collect();
    jobs.par_iter()
        .map(|&(lb, mirrored)| {
            let x = &history[history.len() - lb..];
            if mirrored {
                let neg: Vec<f64> = x.iter().map(|v| -v).collect();
                quantile_negate(&model.forecast(&neg, horizon, dcot_points)?)
            } else {
                model.forecast(x, horizon, dcot_points)
            }
        })
        .collect()
}

/// Element-wise mean of forecasts sharing levels and horizon.
pub fn average_forecasts(parts: &[HorizonForecast]) -> Result<HorizonForecast, InferError> {
    let first = parts.first().ok_or(InferError::NoLookbacks)?;
    let mut values = vec![0.0; first.values.len()];
    for p in parts {
        if p.levels != first.levels || p.horizon != first.horizon {
            return Err(InferError::ShapeMismatch);
        }
        values.iter_mut().zip(&p.values).for_each(|(a, b)| *a += b);
    }
    let n = parts.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    HorizonForecast::new(first.levels.clone(), first.horizon, values)
}

/// Per-level ensemble `(1/2k) Σ_j [Model(x_j) + negate(Model(−x_j))]`.
pub fn mirror_ensemble_quantiles<F: Forecaster + ?Sized>(
    model: &F,
    history: &[f64],
    lookbacks: &[usize],
    horizon: usize,
    dcot_points: usize,
) -> Result<HorizonForecast, InferError> {
    average_forecasts(&mirror_components(
        model,
        history,
        lookbacks,
        horizon,
        dcot_points,
    )?)
}

/// Point form of the ensemble: the averaged median path.
pub fn mirror_ensemble<F: Forecaster + ?Sized>(
    model: &F,
    history: &[f64],
    lookbacks: &[usize],
    horizon: usize,
    dcot_points: usize,
) -> Result<Vec<f64>, InferError> {
    let parts = mirror_components(model, history, lookbacks, horizon, dcot_points)?;
    let medians = parts
        .iter()
        .map(|p| p.median().map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = vec![0.0; horizon];
    for m in &medians {
        out.iter_mut().zip(m).for_each(|(a, b)| *a += b);
    }
    let n = medians.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}
