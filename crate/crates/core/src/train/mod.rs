//! Masked-token training: AdamW, warmup plus cosine schedule, augmentations
//! and the deterministic training loop.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{masked_targets, wql_graph, LossError};
use crate::model::{forward, quantile_heads, Model, ModelConfig, ModelError, ModelWeights};
use crate::numcore::{Graph, Tensor, TensorError};
use crate::tokenize::{mask_explicit, mask_random, patchify, MaskedSequence, TokenizeError};

pub use checkpoint::{
    checkpoint_load, checkpoint_save, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("step {step} outside [0, {max_steps}]")]
    StepOutOfRange { step: usize, max_steps: usize },
    #[error("non-finite gradient in `{name}`")]
    NonFiniteGradient { name: String },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        /// The augmented windows that produced the loss.
        batch: Vec<Vec<f64>>,
    },
    #[error("no training data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mixup_prob: f64,
    pub rescale_range: (f64, f64),
    pub mask_ratio: f64,
    /// Points per training window.
    pub context_len: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Probability of additionally masking a random-length suffix of a window.
    pub tail_mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            warmup_steps: 50,
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 16,
            seed: 0,
            mixup_prob: 0.2,
            rescale_range: (1.0, 4.0),
            mask_ratio: 0.2,
            context_len: 256,
            grad_clip: 1.0,
            tail_mask_prob: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.warmup_steps > self.max_steps {
            return fail("warmup_steps must not exceed max_steps");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return fail("lr_min must lie in [0, lr_max]");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixup_prob) {
            return fail("mixup_prob must lie in [0, 1]");
        }
        let (lo, hi) = self.rescale_range;
        if !(lo >= 1.0 && lo <= hi && hi.is_finite()) {
            return fail("rescale_range must satisfy 1 <= lo <= hi");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail("mask_ratio must lie in [0, 1)");
        }
        if !(self.grad_clip >= 0.0) {
            return fail("grad_clip must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.tail_mask_prob) {
            return fail("tail_mask_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if step > cfg.max_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            max_steps: cfg.max_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_max * step as f64 / cfg.warmup_steps as f64);
    }
    let span = cfg.max_steps - cfg.warmup_steps;
    if span == 0 {
        return Ok(cfg.lr_min);
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    Ok(cfg.lr_min + (cfg.lr_max - cfg.lr_min) * cosine)
}

/// First and second moments per parameter, laid out like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: ModelWeights,
    pub v: ModelWeights,
}

impl AdamWState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros = || {
            let mut z = weights.clone();
            z.visit_mut(&mut |_, t| t.data_mut().fill(0.0));
            z
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// One AdamW update of a flat parameter slice; `t` is the 1-based step.
pub fn adamw_update(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    p: AdamWParams,
) {
    let bc1 = 1.0 - p.beta1.powi(t as i32);
    let bc2 = 1.0 - p.beta2.powi(t as i32);
    let decay = 1.0 - lr * p.weight_decay;
    for i in 0..w.len() {
        w[i] *= decay;
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= lr * m_hat / (v_hat.sqrt() + p.eps);
    }
}

pub fn adamw_step(
    weights: &mut ModelWeights,
    grads: &ModelWeights,
    state: &mut AdamWState,
    lr: f64,
    params: AdamWParams,
) -> Result<(), TrainError> {
    let names = weights.names();
    let grads = grads.tensors();
    if grads.len() != names.len() {
        return Err(TrainError::Config(
            "gradient layout does not match weights".into(),
        ));
    }
    for (name, g) in names.iter().zip(&grads) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { name: name.clone() });
        }
    }
    state.step += 1;
    let t = state.step;
    let ws = weights.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((w, g), m), v) in ws.into_iter().zip(grads).zip(ms).zip(vs) {
        adamw_update(
            w.data_mut(),
            g.data(),
            m.data_mut(),
            v.data_mut(),
            t,
            lr,
            params,
        );
    }
    Ok(())
}

/// With probability `prob` each window becomes `λ·self + (1 − λ)·partner`,
/// `λ ~ U(0.5, 1)`, partner drawn uniformly from the other windows.
pub fn mixup<R: Rng + ?Sized>(batch: Vec<Vec<f64>>, prob: f64, rng: &mut R) -> Vec<Vec<f64>> {
    if prob <= 0.0 {
        return batch;
    }
    if batch.len() < 2 {
        log::warn!("mixup needs at least two windows; batch left unchanged");
        return batch;
    }
    let mut out = batch.clone();
    for (i, sample) in out.iter_mut().enumerate() {
        if rng.gen::<f64>() >= prob {
            continue;
        }
        let lambda = rng.gen_range(0.5..=1.0);
        let mut j = rng.gen_range(0..batch.len() - 1);
        if j >= i {
            j += 1;
        }
        let partner = &batch[j];
        // windows of different length are aligned at their ends
        let offset = sample.len().saturating_sub(partner.len());
        let p_off = partner.len().saturating_sub(sample.len());
        for (s, &p) in sample[offset..].iter_mut().zip(&partner[p_off..]) {
            *s = lambda * *s + (1.0 - lambda) * p;
        }
    }
    out
}

/// Multiplies each window by `c`, log-uniform in `[lo, hi]`.
pub fn rescale_aug<R: Rng + ?Sized>(
    batch: Vec<Vec<f64>>,
    range: (f64, f64),
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let (lo, hi) = range;
    if !(lo >= 1.0 && lo <= hi && hi.is_finite()) {
        return Err(TrainError::Config(format!(
            "bad rescale range ({lo}, {hi})"
        )));
    }
    Ok(batch
        .into_iter()
        .map(|mut s| {
            let c = if lo == hi {
                lo
            } else {
                rng.gen_range(lo.ln()..=hi.ln()).exp()
            };
            s.iter_mut().for_each(|v| *v *= c);
            s
        })
        .collect())
}

/// A masked training or validation sequence with its true masked values.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub seq: MaskedSequence,
    pub targets: Vec<f64>,
}

/// Random-ratio masking, optionally followed by masking a random suffix.
pub fn make_example<R: Rng + ?Sized>(
    window: &[f64],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<MaskedExample, TrainError> {
    let grid = patchify(window, model_cfg.patch_len)?;
    let n = grid.n_tokens();
    let mut mask = vec![false; n];
    if (cfg.mask_ratio * n as f64).floor() >= 1.0 {
        let random = mask_random(&grid, cfg.mask_ratio, rng)?;
        mask.iter_mut()
            .enumerate()
            .for_each(|(i, m)| *m = random.is_masked(i));
    }
    if cfg.tail_mask_prob > 0.0 && n > 1 && rng.gen::<f64>() < cfg.tail_mask_prob {
        let len = rng.gen_range(1..n);
        mask[n - len..].fill(true);
    }
    if mask.iter().all(|&m| m) {
        mask[0] = false;
    }
    if !mask.iter().any(|&m| m) {
        mask[rng.gen_range(0..n)] = true;
    }
    let seq = mask_explicit(&grid, mask)?;
    let targets = masked_targets(&grid, seq.mask_idx());
    Ok(MaskedExample { seq, targets })
}

/// Loss and parameter gradients for one masked sequence.
pub fn loss_and_grad(
    weights: &ModelWeights,
    model_cfg: &ModelConfig,
    example: &MaskedExample,
) -> Result<(f64, ModelWeights), TrainError> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g, true);
    let hidden = forward(&mut g, &example.seq, model_cfg, &bound)?;
    let head = quantile_heads(&mut g, hidden, &example.seq, model_cfg, &bound)?;
    let loss = wql_graph(
        &mut g,
        head.quantiles,
        &model_cfg.quantile_levels,
        model_cfg.patch_len,
        &example.targets,
    )?;
    let value = g.value(loss)[0];
    if !value.is_finite() {
        return Ok((value, weights.clone()));
    }
    g.backward(loss)?;
    let grads = bound.try_map::<Tensor, TensorError>(&mut |_, &v| {
        let data = match g.grad(v) {
            Some(d) => d.to_vec(),
            None => vec![0.0; g.value(v).len()],
        };
        Tensor::new(g.shape(v).to_vec(), data)
    })?;
    Ok((value, grads))
}

/// Mean WQL of `model` over fixed examples.
pub fn mean_masked_loss(model: &Model, examples: &[MaskedExample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ex in examples {
        let fc = model.predict(&ex.seq)?;
        total += crate::loss::wql_loss(&fc, &ex.targets)?.total;
    }
    Ok(total / examples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(e.into()))?;
    w.write_record(["step", "lr", "loss"])
        .map_err(|e| TrainError::Io(e.into()))?;
    for p in curve {
        w.write_record([p.step.to_string(), p.lr.to_string(), p.loss.to_string()])
            .map_err(|e| TrainError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurvePoint>,
}

fn sample_windows<R: Rng + ?Sized>(
    data: &[Vec<f64>],
    len: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let s = &data[rng.gen_range(0..data.len())];
            let start = rng.gen_range(0..=s.len() - len);
            s[start..start + len].to_vec()
        })
        .collect()
}

/// Window length used for a data set: `context_len`, capped by the shortest series.
pub fn window_len(
    data: &[Vec<f64>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<usize, TrainError> {
    let shortest = data
        .iter()
        .map(Vec::len)
        .min()
        .ok_or_else(|| TrainError::Data("empty data source".into()))?;
    if shortest < 2 * model_cfg.patch_len {
        return Err(TrainError::Data(format!(
            "series of length {shortest} is shorter than two patches"
        )));
    }
    Ok(cfg.context_len.min(shortest).max(2 * model_cfg.patch_len))
}

/// Fixed validation examples drawn with their own seed.
pub fn validation_examples(
    data: &[Vec<f64>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<MaskedExample>, TrainError> {
    let len = window_len(data, model_cfg, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_windows(data, len, count, &mut rng)
        .iter()
        .map(|w| make_example(w, model_cfg, cfg, &mut rng))
        .collect()
}

/// Trains from a fresh initialisation drawn from `cfg.seed`.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Vec<f64>],
) -> Result<TrainOutput, TrainError> {
    train_loop_with(model_cfg, cfg, data, |_, _| {})
}

/// [`train_loop`] with a callback after every step, given the step's curve
/// point and the current weights.
pub fn train_loop_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &[Vec<f64>],
    mut on_step: impl FnMut(&CurvePoint, &ModelWeights),
) -> Result<TrainOutput, TrainError> {
    model_cfg.validate()?;
    cfg.validate()?;
    let len = window_len(data, model_cfg, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = ModelWeights::init(model_cfg, &mut rng)?;
    let mut state = AdamWState::new(&weights);
    let params = AdamWParams::from(cfg);
    let mut curve = Vec::with_capacity(cfg.max_steps);

    for step in 0..cfg.max_steps {
        let lr = lr_schedule(step + 1, cfg)?;
        let batch = sample_windows(data, len, cfg.batch_size, &mut rng);
        let batch = mixup(batch, cfg.mixup_prob, &mut rng);
        let batch = rescale_aug(batch, cfg.rescale_range, &mut rng)?;
        let examples = batch
            .iter()
            .map(|w| make_example(w, model_cfg, cfg, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;

        let results: Vec<(f64, ModelWeights)> = examples
            .par_iter()
            .map(|ex| loss_and_grad(&weights, model_cfg, ex))
            .collect::<Result<_, _>>()?;

        let scale = 1.0 / results.len() as f64;
        let loss: f64 = results.iter().map(|(l, _)| l).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss, batch });
        }
        let mut iter = results.into_iter();
        let (_, mut grads) = iter.next().expect("batch_size >= 1");
        for (_, g) in iter {
            for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                acc.data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        let norm_sq: f64 = grads
            .tensors()
            .iter()
            .flat_map(|t| t.data())
            .map(|v| (v * scale) * (v * scale))
            .sum();
        let mut factor = scale;
        if cfg.grad_clip > 0.0 && norm_sq.sqrt() > cfg.grad_clip {
            factor *= cfg.grad_clip / norm_sq.sqrt();
        }
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        adamw_step(&mut weights, &grads, &mut state, lr, params)?;

        let point = CurvePoint { step, lr, loss };
        if step % 50 == 0 {
            log::info!("step {step} lr {lr:.3e} loss {loss:.5}");
        }
        on_step(&point, &weights);
        curve.push(point);
    }

    let checkpoint = Checkpoint {
        model: model_cfg.clone(),
        weights,
        optimizer: (cfg.max_steps > 0).then_some(state),
        step: cfg.max_steps as u64,
        seed: cfg.seed,
    };
    Ok(TrainOutput { checkpoint, curve })
}

/// Writes the windows of a failed batch, one row per window.
pub fn dump_batch(path: impl AsRef<Path>, batch: &[Vec<f64>]) -> Result<(), TrainError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for w in batch {
        let row: Vec<String> = w.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()?;
    Ok(())
}
