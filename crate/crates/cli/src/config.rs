//! Run configuration: one JSON file covering every subcommand, overridden
//! by flags and written back next to the outputs.

use std::path::{Path, PathBuf};

use jointcast::data::{gen_mixture, gen_random_walk, gen_sine, load_csv, Series};
use jointcast::eval::Protocol;
use jointcast::lemma::StepKind;
use jointcast::model::ModelConfig;
use jointcast::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sine,
    Mixture,
    Walk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub n: usize,
    pub period: f64,
    pub amplitude: f64,
    /// `(period, amplitude)` pairs for the mixture generator.
    pub components: Vec<(f64, f64)>,
    pub trend: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SynthKind::Sine,
            n: 4096,
            period: 64.0,
            amplitude: 1.0,
            components: vec![(24.0, 1.0), (100.0, 0.7)],
            trend: 0.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn generate(&self) -> Result<Series, CliError> {
        let s = match self.kind {
            SynthKind::Sine => gen_sine(
                self.n,
                self.period,
                self.amplitude,
                self.trend,
                self.noise,
                self.seed,
            ),
            SynthKind::Mixture => gen_mixture(self.n, &self.components, self.trend, self.noise, self.seed),
            SynthKind::Walk => gen_random_walk(self.n, self.seed),
        };
        s.map_err(|e| CliError::Validation(format!("synthetic: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV file; the synthetic generator is used when absent.
    pub path: Option<PathBuf>,
    pub columns: Vec<String>,
    pub timestamp: Option<String>,
    /// Seasonal period used by MASE.
    pub seasonality: usize,
    pub synthetic: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            columns: vec!["value".into()],
            timestamp: None,
            seasonality: 1,
            synthetic: SynthConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Vec<Series>, CliError> {
        match &self.path {
            Some(p) => read_series(p, &self.columns, self.timestamp.as_deref()),
            None => Ok(vec![self.synthetic.generate()?]),
        }
    }
}

pub fn read_series(
    path: &Path,
    columns: &[String],
    timestamp: Option<&str>,
) -> Result<Vec<Series>, CliError> {
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    load_csv(path, &cols, timestamp).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub horizon: usize,
    pub dcot_points: usize,
    /// Non-empty switches to the mirror ensemble over these lookbacks.
    pub lookbacks: Vec<usize>,
    pub sort_quantiles: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            horizon: 64,
            dcot_points: 0,
            lookbacks: Vec::new(),
            sort_quantiles: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LemmaConfig {
    pub n_paths: Vec<usize>,
    pub horizons: Vec<usize>,
    /// Explicit eps values; when empty, `eps_points` evenly spaced values
    /// inside the valid range are used per grid point.
    pub eps: Vec<f64>,
    pub eps_points: usize,
    pub trials: usize,
    pub steps: StepKind,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        Self {
            n_paths: vec![1, 2, 4],
            horizons: vec![1, 2, 4, 8],
            eps: Vec::new(),
            eps_points: 5,
            trials: 100_000,
            steps: StepKind::Rademacher,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub forecast: ForecastConfig,
    pub eval: Protocol,
    pub lemma: LemmaConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Validation(format!("config not found: {}", path.display()))
            } else {
                CliError::Runtime(format!("reading {}: {e}", path.display()))
            }
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(dir.join("effective_config.json"), text)
            .map_err(|e| CliError::Runtime(format!("writing effective config: {e}")))
    }
}
