//! Anti-concentration of sample-path averages for a ±1 random walk.
//!
//! `N` independent paths are run `j` steps from `x_m`; `Z_j` is the squared
//! deviation of their average endpoint from `x_m`. The Paley–Zygmund bound
//! `P(Z > θ E[Z]) ≥ (1 − θ)² E[Z]² / E[Z²]` with `θ = ε² / E[Z]` lower-bounds
//! the chance that the average strays further than `ε`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest `N·j` handled by exhaustive enumeration.
pub const MAX_ENUMERATION: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LemmaError {
    #[error("invalid walk: {0}")]
    Spec(String),
    #[error("eps {eps} outside (0, {max})")]
    EpsOutOfRange { eps: f64, max: f64 },
    #[error("N·j = {0} is too large to enumerate (limit {MAX_ENUMERATION})")]
    TooLarge(usize),
    #[error("exact enumeration is only defined for ±1 steps")]
    NotEnumerable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    /// `±1` with equal probability.
    #[default]
    Rademacher,
    /// `Uniform(−1, 1)`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub n_paths: usize,
    /// Steps simulated per path.
    pub horizon: usize,
    pub start: f64,
    pub trials: usize,
    pub seed: u64,
    pub steps: StepKind,
}

impl WalkSpec {
    pub fn validate(&self) -> Result<(), LemmaError> {
        if self.n_paths == 0 || self.horizon == 0 || self.trials == 0 {
            return Err(LemmaError::Spec(
                "n_paths, horizon and trials must be positive".into(),
            ));
        }
        if !self.start.is_finite() {
            return Err(LemmaError::Spec("start must be finite".into()));
        }
        Ok(())
    }
}

fn step<R: Rng>(rng: &mut R, kind: StepKind) -> f64 {
    match kind {
        StepKind::Rademacher => {
            if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
        StepKind::Uniform => rng.gen_range(-1.0..1.0),
    }
}

/// Path values `x_{m+1..m+n}` for each of the `N` paths of one trial.
pub fn simulate_paths(spec: &WalkSpec) -> Result<Vec<Vec<f64>>, LemmaError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_paths)
        .map(|_| {
            let mut x = spec.start;
            (0..spec.horizon)
                .map(|_| {
                    x += step(&mut rng, spec.steps);
                    x
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentMode {
    Enumerate,
    ClosedForm,
}

/// `(E[Z_j], E[Z_j²])`.
pub fn exact_moments(
    n: usize,
    j: usize,
    steps: StepKind,
    mode: MomentMode,
) -> Result<(f64, f64), LemmaError> {
    if n == 0 || j == 0 {
        return Err(LemmaError::Spec("N and j must be positive".into()));
    }
    let m = (n * j) as f64;
    let n4 = (n as f64).powi(4);
    match (mode, steps) {
        (MomentMode::ClosedForm, StepKind::Rademacher) => {
            Ok((j as f64 / n as f64, (3.0 * m * m - 2.0 * m) / n4))
        }
        (MomentMode::ClosedForm, StepKind::Uniform) => {
            let s2 = m / 3.0;
            let s4 = m / 5.0 + m * (m - 1.0) / 3.0;
            Ok((s2 / (n * n) as f64, s4 / n4))
        }
        (MomentMode::Enumerate, StepKind::Uniform) => Err(LemmaError::NotEnumerable),
        (MomentMode::Enumerate, StepKind::Rademacher) => {
            let total = n * j;
            if total > MAX_ENUMERATION {
                return Err(LemmaError::TooLarge(total));
            }
            // Z = (S/N)² with S = 2·popcount − M over every sign pattern
            let (mut s2, mut s4) = (0u128, 0u128);
            for mask in 0u32..(1u32 << total) {
                let s = 2 * mask.count_ones() as i64 - total as i64;
                let sq = (s * s) as u128;
                s2 += sq;
                s4 += sq * sq;
            }
            let count = (1u64 << total) as f64;
            let n2 = (n * n) as f64;
            Ok((s2 as f64 / (n2 * count), s4 as f64 / (n2 * n2 * count)))
        }
    }
}

/// `P(|mean endpoint − x_m| > eps)` by enumerating every sign pattern.
pub fn exact_deviation_prob(n: usize, j: usize, eps: f64) -> Result<f64, LemmaError> {
    let total = n * j;
    if n == 0 || j == 0 {
        return Err(LemmaError::Spec("N and j must be positive".into()));
    }
    if total > MAX_ENUMERATION {
        return Err(LemmaError::TooLarge(total));
    }
    let threshold = eps * n as f64;
    let hits = (0u32..(1u32 << total))
        .filter(|mask| {
            let s = 2 * mask.count_ones() as i64 - total as i64;
            (s as f64).abs() > threshold
        })
        .count();
    Ok(hits as f64 / (1u64 << total) as f64)
}

/// Paley–Zygmund lower bound on `P(Z > eps²)`, and the constant
/// `C = E[Z]² / E[Z²]`.
pub fn pz_bound(n: usize, j: usize, eps: f64, steps: StepKind) -> Result<(f64, f64), LemmaError> {
    let (ez, ez2) = exact_moments(n, j, steps, MomentMode::ClosedForm)?;
    let max = ez.sqrt();
    if !(eps > 0.0 && eps < max) {
        return Err(LemmaError::EpsOutOfRange { eps, max });
    }
    let theta = eps * eps / ez;
    let c = ez * ez / ez2;
    Ok(((1.0 - theta).powi(2) * c, c))
}

/// Sum of `count` steps of one trial. Each trial has its own ChaCha stream,
/// so results do not depend on how trials are spread over threads.
fn trial_sum(seed: u64, trial: u64, count: usize, steps: StepKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    match steps {
        StepKind::Rademacher => {
            let mut ones = 0u32;
            let mut left = count;
            while left > 0 {
                let bits: u64 = rng.gen();
                let take = left.min(64);
                let masked = if take == 64 {
                    bits
                } else {
                    bits & ((1u64 << take) - 1)
                };
                ones += masked.count_ones();
                left -= take;
            }
            2.0 * ones as f64 - count as f64
        }
        StepKind::Uniform => (0..count).map(|_| rng.gen_range(-1.0..1.0)).sum(),
    }
}

/// Fraction of trials where `|mean_i x^i_{m+j} − x_m| > eps`.
pub fn deviation_prob(
    n: usize,
    j: usize,
    eps: f64,
    trials: usize,
    seed: u64,
    steps: StepKind,
) -> Result<f64, LemmaError> {
    if n == 0 || j == 0 || trials == 0 {
        return Err(LemmaError::Spec("N, j and trials must be positive".into()));
    }
    let count = n * j;
    let hits: usize = (0..trials as u64)
        .into_par_iter()
        .filter(|&t| (trial_sum(seed, t, count, steps) / n as f64).abs() > eps)
        .count();
    Ok(hits as f64 / trials as f64)
}

/// `k` evenly spaced values strictly inside `(0, sqrt(E[Z]))`.
pub fn eps_grid(n: usize, j: usize, steps: StepKind, k: usize) -> Result<Vec<f64>, LemmaError> {
    let (ez, _) = exact_moments(n, j, steps, MomentMode::ClosedForm)?;
    let max = ez.sqrt();
    Ok((1..=k).map(|i| max * i as f64 / (k + 1) as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaRow {
    pub n_paths: usize,
    pub horizon: usize,
    pub eps: f64,
    pub empirical: f64,
    pub exact: Option<f64>,
    pub pz_bound: f64,
    pub c: f64,
}

/// Evaluates the bound, the Monte-Carlo estimate and (when enumerable) the
/// exact probability at every grid point.
pub fn lemma_grid(
    n_grid: &[usize],
    j_grid: &[usize],
    eps: &[f64],
    trials: usize,
    seed: u64,
    steps: StepKind,
) -> Result<Vec<LemmaRow>, LemmaError> {
    let mut rows = Vec::new();
    for &n in n_grid {
        for &j in j_grid {
            for &e in eps {
                let (bound, c) = pz_bound(n, j, e, steps)?;
                let exact = match steps {
                    StepKind::Rademacher if n * j <= MAX_ENUMERATION => {
                        Some(exact_deviation_prob(n, j, e)?)
                    }
                    _ => None,
                };
                rows.push(LemmaRow {
                    n_paths: n,
                    horizon: j,
                    eps: e,
                    empirical: deviation_prob(n, j, e, trials, seed, steps)?,
                    exact,
                    pz_bound: bound,
                    c,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, j: usize, seed: u64) -> WalkSpec {
        WalkSpec {
            n_paths: n,
            horizon: j,
            start: 3.0,
            trials: 1,
            seed,
            steps: StepKind::Rademacher,
        }
    }

    #[test]
    fn paths_take_unit_steps() {
        let paths = simulate_paths(&spec(5, 40, 1)).unwrap();
        assert_eq!(paths.len(), 5);
        for p in &paths {
            assert_eq!((p[0] - 3.0).abs(), 1.0);
            for w in p.windows(2) {
                assert_eq!((w[1] - w[0]).abs(), 1.0);
            }
        }
        assert_eq!(paths, simulate_paths(&spec(5, 40, 1)).unwrap());
        assert_ne!(paths, simulate_paths(&spec(5, 40, 2)).unwrap());
        assert!(simulate_paths(&spec(0, 4, 1)).is_err());
    }

    #[test]
    fn endpoint_mean_is_start() {
        let j = 6;
        let trials = 100_000u64;
        let mean: f64 = (0..trials)
            .map(|t| trial_sum(9, t, j, StepKind::Rademacher))
            .sum::<f64>()
            / trials as f64;
        assert!(mean.abs() < 3.0 * (j as f64 / trials as f64).sqrt());
    }

    #[test]
    fn moment_examples() {
        let e = |n, j| exact_moments(n, j, StepKind::Rademacher, MomentMode::Enumerate).unwrap();
        assert_eq!(e(1, 1), (1.0, 1.0));
        assert_eq!(e(2, 1), (0.5, 0.5));
        for n in 1..=4 {
            for j in 1..=6 {
                let (ez, ez2) = e(n, j);
                assert_eq!(ez, j as f64 / n as f64, "N={n} j={j}");
                let (cz, cz2) =
                    exact_moments(n, j, StepKind::Rademacher, MomentMode::ClosedForm).unwrap();
                assert_eq!(cz, ez);
                assert!((cz2 - ez2).abs() < 1e-12 * ez2);
            }
        }
        assert_eq!(
            exact_moments(5, 5, StepKind::Rademacher, MomentMode::Enumerate),
            Err(LemmaError::TooLarge(25))
        );
    }

    #[test]
    fn uniform_moments_match_simulation() {
        let (ez, ez2) = exact_moments(2, 3, StepKind::Uniform, MomentMode::ClosedForm).unwrap();
        let trials = 200_000u64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for t in 0..trials {
            let z = (trial_sum(4, t, 6, StepKind::Uniform) / 2.0).powi(2);
            s1 += z;
            s2 += z * z;
        }
        assert!((s1 / trials as f64 - ez).abs() < 0.01 * ez * 3.0);
        assert!((s2 / trials as f64 - ez2).abs() < 0.03 * ez2 * 3.0);
    }

    #[test]
    fn bound_examples() {
        for eps in [0.1, 0.5, 0.9] {
            let (b, c) = pz_bound(1, 1, eps, StepKind::Rademacher).unwrap();
            assert_eq!(c, 1.0);
            assert!((b - (1.0 - eps * eps).powi(2)).abs() < 1e-15);
            let (b, c) = pz_bound(2, 1, eps / 2.0, StepKind::Rademacher).unwrap();
            assert_eq!(c, 0.5);
            let e = eps / 2.0;
            assert!((b - 0.5 * (1.0 - 2.0 * e * e).powi(2)).abs() < 1e-15);
        }
        let near = (0.5f64).sqrt() * (1.0 - 1e-9);
        assert!(pz_bound(2, 1, near, StepKind::Rademacher).unwrap().0 < 1e-15);
        assert!(matches!(
            pz_bound(2, 1, 0.75, StepKind::Rademacher),
            Err(LemmaError::EpsOutOfRange { .. })
        ));
    }

    #[test]
    fn deviation_examples() {
        assert_eq!(
            deviation_prob(1, 1, 0.5, 1000, 0, StepKind::Rademacher).unwrap(),
            1.0
        );
        let p = deviation_prob(2, 1, 0.5, 100_000, 0, StepKind::Rademacher).unwrap();
        assert!((p - 0.5).abs() < 4.0 * (0.25f64 / 1e5).sqrt());
        assert_eq!(exact_deviation_prob(2, 1, 0.5).unwrap(), 0.5);
        assert_eq!(
            deviation_prob(3, 5, 0.4, 5000, 11, StepKind::Rademacher).unwrap(),
            deviation_prob(3, 5, 0.4, 5000, 11, StepKind::Rademacher).unwrap()
        );
    }

    #[test]
    fn wide_walks_use_several_words() {
        let p = deviation_prob(10, 10, 0.5, 20_000, 3, StepKind::Rademacher).unwrap();
        // S ~ N(0, 100) roughly; P(|S| > 5) ≈ 0.62 with the lattice
        assert!((0.5..0.75).contains(&p), "{p}");
    }
}
