//! Shared fixtures for the acceptance suite: synthetic data sets, trained
//! models (trained once per process) and result reporting.

#![allow(dead_code)]

use std::sync::OnceLock;
use std::time::Instant;

use jointcast::data::{gen_mixture, gen_sine, holdout_split, split_windows, Series};
use jointcast::eval::EvalWindow;
use jointcast::model::{Model, ModelConfig};
use jointcast::train::{train_loop, TrainConfig};

/// Prints the one-line verdict for a criterion.
pub fn verdict(criterion: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    eprintln!("[{tag}] {criterion}: {detail}");
}

pub const HORIZON: usize = 64;
pub const LOOKBACK: usize = 512;
pub const N_EVAL_WINDOWS: usize = 20;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub struct Benchmark {
    pub name: &'static str,
    pub train: Vec<f64>,
    pub windows: Vec<EvalWindow>,
}

fn benchmark(name: &'static str, series: Series) -> Benchmark {
    let (train, eval) = holdout_split(&series, LOOKBACK, HORIZON, N_EVAL_WINDOWS).unwrap();
    let windows = split_windows(eval.values(), LOOKBACK, HORIZON, HORIZON, 1).unwrap();
    assert_eq!(windows.len(), N_EVAL_WINDOWS);
    Benchmark {
        name,
        train: train.values().to_vec(),
        windows,
    }
}

/// Sine plus noise, sine plus trend, and a two-period mixture.
pub fn benchmarks() -> &'static [Benchmark] {
    static CELL: OnceLock<Vec<Benchmark>> = OnceLock::new();
    CELL.get_or_init(|| {
        vec![
            benchmark(
                "sine+noise",
                gen_sine(8000, 48.0, 2.0, 0.0, 0.3, 1).unwrap(),
            ),
            benchmark(
                "sine+trend",
                gen_sine(8000, 40.0, 1.5, 0.002, 0.1, 2).unwrap(),
            ),
            benchmark(
                "two-period",
                gen_mixture(8000, &[(24.0, 1.0), (100.0, 0.7)], 0.0, 0.1, 3).unwrap(),
            ),
        ]
    })
}

pub fn forecast_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        embed_dim: 32,
        ffn_dim: 64,
        patch_len: 16,
        ..ModelConfig::default()
    }
}

/// Plain masked-token recipe (ρ = 0.2, no extra tail masking). Windows are
/// long enough to hold the lookback plus the longest DCoT placeholder run.
pub fn forecast_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: 1500,
        warmup_steps: 150,
        batch_size: 8,
        context_len: LOOKBACK + HORIZON + 256,
        mask_ratio: 0.2,
        tail_mask_prob: 0.0,
        seed,
        ..TrainConfig::default()
    }
}

/// `models()[dataset][seed]`, trained on first use.
pub fn forecast_models() -> &'static [Vec<Model>] {
    static CELL: OnceLock<Vec<Vec<Model>>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = forecast_model_config();
        benchmarks()
            .iter()
            .map(|b| {
                SEEDS
                    .iter()
                    .map(|&seed| {
                        let t = Instant::now();
                        let out =
                            train_loop(&cfg, &forecast_train_config(seed), &[b.train.clone()])
                                .unwrap();
                        eprintln!("  trained {} seed {seed} in {:.1?}", b.name, t.elapsed());
                        Model::new(cfg.clone(), out.checkpoint.weights).unwrap()
                    })
                    .collect()
            })
            .collect()
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean squared error, written out independently of the library metric.
pub fn sq_err(forecast: &[f64], actual: &[f64]) -> f64 {
    assert_eq!(forecast.len(), actual.len());
    let mut s = 0.0;
    for i in 0..actual.len() {
        let d = forecast[i] - actual[i];
        s += d * d;
    }
    s / actual.len() as f64
}
