//! Pinball loss and the weighted quantile objective over masked tokens.

use thiserror::Error;

use crate::model::QuantileForecast;
use crate::numcore::{Graph, TensorError, Var};
use crate::tokenize::PatchGrid;

/// Guards the per-patch weight against all-zero patches.
pub const WQL_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("quantile level {0} outside (0, 1)")]
    BadAlpha(f64),
    #[error("no masked tokens, nothing to train on")]
    EmptyMask,
    #[error("targets have {actual} values, forecast covers {expected}")]
    TargetLength { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_alpha(alpha: f64) -> Result<(), LossError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(LossError::BadAlpha(alpha))
    }
}

pub fn pinball(q: f64, x: f64, alpha: f64) -> Result<f64, LossError> {
    check_alpha(alpha)?;
    Ok(if x >= q {
        (x - q) * alpha
    } else {
        (q - x) * (1.0 - alpha)
    })
}

pub fn wql_weight(alpha: f64, patch_abs_sum: f64, floor: f64) -> f64 {
    1.0 / ((alpha * (1.0 - alpha)).sqrt() * patch_abs_sum.max(floor))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Weighted loss contributed by each quantile level.
    pub per_quantile: Vec<f64>,
    pub n_terms: usize,
}

/// Per-element `(target, alpha, weight)` laid out like the forecast values:
/// level-major, then token, then position inside the patch.
#[derive(Debug, Clone, PartialEq)]
pub struct WqlTerms {
    pub targets: Vec<f64>,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `targets` holds the true values of the masked tokens, `n_masked x P`.
pub fn wql_terms(levels: &[f64], patch_len: usize, targets: &[f64]) -> Result<WqlTerms, LossError> {
    if targets.is_empty() {
        return Err(LossError::EmptyMask);
    }
    if patch_len == 0 || targets.len() % patch_len != 0 {
        return Err(LossError::TargetLength {
            expected: targets.len().next_multiple_of(patch_len.max(1)),
            actual: targets.len(),
        });
    }
    for &a in levels {
        check_alpha(a)?;
    }
    let abs_sums: Vec<f64> = targets
        .chunks(patch_len)
        .map(|row| row.iter().map(|v| v.abs()).sum())
        .collect();
    let n = targets.len() * levels.len();
    let mut terms = WqlTerms {
        targets: Vec::with_capacity(n),
        alphas: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
    };
    for &alpha in levels {
        for (row, &abs_sum) in targets.chunks(patch_len).zip(&abs_sums) {
            let w = wql_weight(alpha, abs_sum, WQL_FLOOR);
            for &x in row {
                terms.targets.push(x);
                terms.alphas.push(alpha);
                terms.weights.push(w);
            }
        }
    }
    Ok(terms)
}

/// True values of the masked tokens of a grid, in mask order.
pub fn masked_targets(grid: &PatchGrid, mask_idx: &[usize]) -> Vec<f64> {
    mask_idx
        .iter()
        .flat_map(|&i| grid.row(i).to_vec())
        .collect()
}

pub fn wql_loss(forecast: &QuantileForecast, targets: &[f64]) -> Result<LossReport, LossError> {
    if forecast.n_points() == 0 {
        return Err(LossError::EmptyMask);
    }
    if targets.len() != forecast.n_points() {
        return Err(LossError::TargetLength {
            expected: forecast.n_points(),
            actual: targets.len(),
        });
    }
    let terms = wql_terms(forecast.levels(), forecast.patch_len(), targets)?;
    let n = forecast.n_points();
    let mut per_quantile = vec![0.0; forecast.levels().len()];
    for (idx, &q) in forecast.values().iter().enumerate() {
        let l = pinball(q, terms.targets[idx], terms.alphas[idx])?;
        per_quantile[idx / n] += terms.weights[idx] * l;
    }
    Ok(LossReport {
        total: per_quantile.iter().sum(),
        per_quantile,
        n_terms: forecast.values().len(),
    })
}

/// Differentiable form of [`wql_loss`] on the head output node.
pub fn wql_graph(
    g: &mut Graph,
    quantiles: Var,
    levels: &[f64],
    patch_len: usize,
    targets: &[f64],
) -> Result<Var, LossError> {
    let expected = g.value(quantiles).len();
    if targets.len() * levels.len() != expected {
        return Err(LossError::TargetLength {
            expected: expected / levels.len().max(1),
            actual: targets.len(),
        });
    }
    let terms = wql_terms(levels, patch_len, targets)?;
    Ok(g.weighted_pinball(quantiles, &terms.targets, &terms.alphas, &terms.weights)?)
}
