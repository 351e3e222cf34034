//! Bidirectional encoder-only U-transformer with quantile output heads.
//!
//! Token flow for `n_layers = D` with the U-shape enabled:
//!
//! ```text
//! embed -> block 1 -> merge_shallow ... block D/2 -> merge_shallow
//!       -> merge_deep(skip D/2) -> block D/2+1 ... merge_deep(skip 1) -> block D
//!       -> final norm -> quantile heads (masked tokens only)
//! ```
//!
//! Shallow merges are stride-1 pairwise merges of neighbouring tokens (the
//! first token pairs with itself), so the sequence length never changes and
//! the long skip connections line up token for token.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numcore::{Graph, Tensor, TensorError, Var};
use crate::tokenize::{MaskedSequence, TokenizeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("sequence has no masked tokens to predict")]
    EmptyMask,
    #[error("patch length {got} does not match model patch length {expected}")]
    PatchLen { expected: usize, got: usize },
    #[error("weight `{name}` has shape {got:?}, expected {expected:?}")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing weight `{0}`")]
    MissingWeight(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Query heads sharing one key/value head (grouped-query attention).
    pub kv_group: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub patch_len: usize,
    pub quantile_levels: Vec<f64>,
    pub rope_base: f64,
    /// Added to sigma in normalisation and de-normalisation.
    pub eps_denorm: f64,
    pub norm_eps: f64,
    pub u_shape: bool,
    pub mask_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            kv_group: 1,
            embed_dim: 64,
            ffn_dim: 128,
            patch_len: 16,
            quantile_levels: (1..=9).map(|k| k as f64 / 10.0).collect(),
            rope_base: 10_000.0,
            eps_denorm: 1e-5,
            norm_eps: 1e-6,
            u_shape: true,
            mask_ratio: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layers < 2 || self.n_layers % 2 != 0 {
            return err("n_layers must be even and at least 2");
        }
        if self.n_heads == 0 || self.kv_group == 0 || self.n_heads % self.kv_group != 0 {
            return err("n_heads must be a positive multiple of kv_group");
        }
        if self.embed_dim == 0 || self.embed_dim % (2 * self.n_heads) != 0 {
            return err("embed_dim must be divisible by 2 * n_heads");
        }
        if self.ffn_dim == 0 || self.patch_len == 0 {
            return err("ffn_dim and patch_len must be positive");
        }
        if self.quantile_levels.is_empty()
            || self.quantile_levels.iter().any(|&a| !(a > 0.0 && a < 1.0))
            || self.quantile_levels.windows(2).any(|w| w[1] <= w[0])
        {
            return err("quantile_levels must be strictly increasing values in (0, 1)");
        }
        if !(self.rope_base > 0.0) {
            return err("rope_base must be positive");
        }
        if !(self.eps_denorm > 0.0) || !(self.norm_eps >= 0.0) {
            return err("eps_denorm must be positive and norm_eps non-negative");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return err("mask_ratio must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.head_dim() * (self.n_heads / self.kv_group)
    }

    pub fn n_quantiles(&self) -> usize {
        self.quantile_levels.len()
    }

    /// Index of the 0.5 level, if present.
    pub fn median_index(&self) -> Option<usize> {
        self.quantile_levels
            .iter()
            .position(|&a| (a - 0.5).abs() < 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn_norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub weight: T,
    pub bias: T,
}

/// Every learnable parameter, generic over storage so the same layout holds
/// tensors at rest and graph handles during a forward pass.
///
/// Linear maps are stored `[out, in]` except the SwiGLU matrices, which are
/// `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub patch_embed: T,
    pub mask_embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub merge_shallow: Vec<T>,
    pub merge_deep: Vec<T>,
    pub final_norm: T,
    pub heads: Vec<HeadParams<T>>,
}

pub type ModelWeights = ModelParams<Tensor>;

impl<T> ModelParams<T> {
    /// Visits every parameter with its canonical name, in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embed.patch".into(), &self.patch_embed);
        f("embed.mask".into(), &self.mask_embed);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.attn_norm"), &l.attn_norm);
            f(format!("layers.{i}.wq"), &l.wq);
            f(format!("layers.{i}.wk"), &l.wk);
            f(format!("layers.{i}.wv"), &l.wv);
            f(format!("layers.{i}.wo"), &l.wo);
            f(format!("layers.{i}.ffn_norm"), &l.ffn_norm);
            f(format!("layers.{i}.w_gate"), &l.w_gate);
            f(format!("layers.{i}.w_up"), &l.w_up);
            f(format!("layers.{i}.w_down"), &l.w_down);
        }
        for (i, m) in self.merge_shallow.iter().enumerate() {
            f(format!("merge.shallow.{i}"), m);
        }
        for (i, m) in self.merge_deep.iter().enumerate() {
            f(format!("merge.deep.{i}"), m);
        }
        f("final_norm".into(), &self.final_norm);
        for (k, h) in self.heads.iter().enumerate() {
            f(format!("heads.{k}.weight"), &h.weight);
            f(format!("heads.{k}.bias"), &h.bias);
        }
    }

    /// Same order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("embed.patch".into(), &mut self.patch_embed);
        f("embed.mask".into(), &mut self.mask_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layers.{i}.attn_norm"), &mut l.attn_norm);
            f(format!("layers.{i}.wq"), &mut l.wq);
            f(format!("layers.{i}.wk"), &mut l.wk);
            f(format!("layers.{i}.wv"), &mut l.wv);
            f(format!("layers.{i}.wo"), &mut l.wo);
            f(format!("layers.{i}.ffn_norm"), &mut l.ffn_norm);
            f(format!("layers.{i}.w_gate"), &mut l.w_gate);
            f(format!("layers.{i}.w_up"), &mut l.w_up);
            f(format!("layers.{i}.w_down"), &mut l.w_down);
        }
        for (i, m) in self.merge_shallow.iter_mut().enumerate() {
            f(format!("merge.shallow.{i}"), m);
        }
        for (i, m) in self.merge_deep.iter_mut().enumerate() {
            f(format!("merge.deep.{i}"), m);
        }
        f("final_norm".into(), &mut self.final_norm);
        for (k, h) in self.heads.iter_mut().enumerate() {
            f(format!("heads.{k}.weight"), &mut h.weight);
            f(format!("heads.{k}.bias"), &mut h.bias);
        }
    }

    /// Structure-preserving map; `f` sees parameters in visit order.
    pub fn try_map<U, E>(
        &self,
        f: &mut dyn FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<ModelParams<U>, E> {
        let mut one = |name: String, t: &T| f(&name, t);
        let patch_embed = one("embed.patch".into(), &self.patch_embed)?;
        let mask_embed = one("embed.mask".into(), &self.mask_embed)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(LayerParams {
                    attn_norm: one(format!("layers.{i}.attn_norm"), &l.attn_norm)?,
                    wq: one(format!("layers.{i}.wq"), &l.wq)?,
                    wk: one(format!("layers.{i}.wk"), &l.wk)?,
                    wv: one(format!("layers.{i}.wv"), &l.wv)?,
                    wo: one(format!("layers.{i}.wo"), &l.wo)?,
                    ffn_norm: one(format!("layers.{i}.ffn_norm"), &l.ffn_norm)?,
                    w_gate: one(format!("layers.{i}.w_gate"), &l.w_gate)?,
                    w_up: one(format!("layers.{i}.w_up"), &l.w_up)?,
                    w_down: one(format!("layers.{i}.w_down"), &l.w_down)?,
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        let merge_shallow = self
            .merge_shallow
            .iter()
            .enumerate()
            .map(|(i, m)| one(format!("merge.shallow.{i}"), m))
            .collect::<Result<Vec<_>, E>>()?;
        let merge_deep = self
            .merge_deep
            .iter()
            .enumerate()
            .map(|(i, m)| one(format!("merge.deep.{i}"), m))
            .collect::<Result<Vec<_>, E>>()?;
        let final_norm = one("final_norm".into(), &self.final_norm)?;
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| {
                Ok(HeadParams {
                    weight: one(format!("heads.{k}.weight"), &h.weight)?,
                    bias: one(format!("heads.{k}.bias"), &h.bias)?,
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        Ok(ModelParams {
            patch_embed,
            mask_embed,
            layers,
            merge_shallow,
            merge_deep,
            final_norm,
            heads,
        })
    }

    /// References in visit order.
    pub fn tensors(&self) -> Vec<&T> {
        let mut out = vec![&self.patch_embed, &self.mask_embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.extend(&self.merge_shallow);
        out.extend(&self.merge_deep);
        out.push(&self.final_norm);
        for h in &self.heads {
            out.extend([&h.weight, &h.bias]);
        }
        out
    }

    /// Mutable references in visit order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.patch_embed, &mut self.mask_embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.extend(self.merge_shallow.iter_mut());
        out.extend(self.merge_deep.iter_mut());
        out.push(&mut self.final_norm);
        for h in &mut self.heads {
            out.extend([&mut h.weight, &mut h.bias]);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

/// Expected `(name, shape)` list for a config, in visit order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, p, f, kv) = (cfg.embed_dim, cfg.patch_len, cfg.ffn_dim, cfg.kv_dim());
    let shapes = ModelParams {
        patch_embed: vec![d, p],
        mask_embed: vec![1, d],
        layers: (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: vec![d],
                wq: vec![d, d],
                wk: vec![kv, d],
                wv: vec![kv, d],
                wo: vec![d, d],
                ffn_norm: vec![d],
                w_gate: vec![d, f],
                w_up: vec![d, f],
                w_down: vec![f, d],
            })
            .collect(),
        merge_shallow: if cfg.u_shape {
            vec![vec![d, 2 * d]; cfg.n_layers / 2]
        } else {
            Vec::new()
        },
        merge_deep: if cfg.u_shape {
            vec![vec![d, 2 * d]; cfg.n_layers / 2]
        } else {
            Vec::new()
        },
        final_norm: vec![d],
        heads: (0..cfg.n_quantiles())
            .map(|_| HeadParams {
                weight: vec![p, d],
                bias: vec![p],
            })
            .collect(),
    };
    let mut out = Vec::new();
    shapes.visit(&mut |n, s| out.push((n, s.clone())));
    out
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 * std {
                break z;
            }
        })
        .collect()
}

/// `[a·I, b·I]` of shape `d x 2d`, plus small noise.
fn merge_init<R: Rng + ?Sized>(rng: &mut R, d: usize, a: f64, b: f64, std: f64) -> Vec<f64> {
    let mut w = truncated_normal(rng, std, d * 2 * d);
    for i in 0..d {
        w[i * 2 * d + i] += a;
        w[i * 2 * d + d + i] += b;
    }
    w
}

impl ModelWeights {
    /// Truncated-normal projections (std 0.02), unit norm gains, zero head
    /// biases. Merge layers start near `[0, I]` (shallow) and `[I/2, I/2]`
    /// (deep) so the U-shaped stack begins close to the plain residual stack.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        const STD: f64 = 0.02;
        let d = cfg.embed_dim;
        let mut tensors = Vec::new();
        for (name, shape) in param_shapes(cfg) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("norm") {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else if name.starts_with("merge.shallow") {
                merge_init(rng, d, 0.0, 1.0, STD)
            } else if name.starts_with("merge.deep") {
                merge_init(rng, d, 0.5, 0.5, STD)
            } else {
                truncated_normal(rng, STD, n)
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Self::from_named(cfg, tensors)
    }

    /// All-zero weights; useful for structural tests.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let tensors = param_shapes(cfg)
            .into_iter()
            .map(|(n, s)| Ok((n, Tensor::zeros(s)?)))
            .collect::<Result<Vec<_>, ModelError>>()?;
        Self::from_named(cfg, tensors)
    }

    /// Assembles weights from `(name, tensor)` pairs, checking every shape.
    pub fn from_named(
        cfg: &ModelConfig,
        tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut map: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let shapes = param_shapes(cfg);
        let mut take = |name: &str, expected: &[usize]| -> Result<Tensor, ModelError> {
            let t = map
                .remove(name)
                .ok_or_else(|| ModelError::MissingWeight(name.to_string()))?;
            if t.shape() != expected {
                return Err(ModelError::WeightShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            Ok(t)
        };
        let mut ordered = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            ordered.push(take(name, shape)?);
        }
        if let Some(extra) = map.keys().next() {
            return Err(ModelError::Config(format!("unexpected weight `{extra}`")));
        }
        let mut it = ordered.into_iter();
        let mut next = || it.next().expect("shape list matches layout");
        let patch_embed = next();
        let mask_embed = next();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let n_merge = if cfg.u_shape { cfg.n_layers / 2 } else { 0 };
        let merge_shallow = (0..n_merge).map(|_| next()).collect();
        let merge_deep = (0..n_merge).map(|_| next()).collect();
        let final_norm = next();
        let heads = (0..cfg.n_quantiles())
            .map(|_| HeadParams {
                weight: next(),
                bias: next(),
            })
            .collect();
        Ok(ModelParams {
            patch_embed,
            mask_embed,
            layers,
            merge_shallow,
            merge_deep,
            final_norm,
            heads,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every weight on `g` as a tracked (or untracked) leaf.
    pub fn bind(&self, g: &mut Graph, track: bool) -> ModelParams<Var> {
        self.try_map::<Var, std::convert::Infallible>(&mut |_, t| {
            Ok(if track { g.param(t) } else { g.leaf(t) })
        })
        .expect("infallible")
    }
}

/// Quantile predictions for the masked tokens, on the original value scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileForecast {
    levels: Vec<f64>,
    token_index: Vec<usize>,
    patch_len: usize,
    /// `R x n_masked x P`, row-major.
    values: Vec<f64>,
}

impl QuantileForecast {
    pub fn new(
        levels: Vec<f64>,
        token_index: Vec<usize>,
        patch_len: usize,
        values: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let expected = levels.len() * token_index.len() * patch_len;
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                actual: values.len(),
            }
            .into());
        }
        Ok(Self {
            levels,
            token_index,
            patch_len,
            values,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn token_index(&self) -> &[usize] {
        &self.token_index
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_points(&self) -> usize {
        self.token_index.len() * self.patch_len
    }

    /// All masked points for level `k`, tokens concatenated in index order.
    pub fn level(&self, k: usize) -> &[f64] {
        let n = self.n_points();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn get(&self, k: usize, token: usize, s: usize) -> f64 {
        self.values[(k * self.token_index.len() + token) * self.patch_len + s]
    }

    /// Sorts the quantile values of each point ascending across levels.
    pub fn sort_levels(&mut self) {
        let r = self.levels.len();
        let n = self.n_points();
        let mut column = vec![0.0; r];
        for p in 0..n {
            for (k, c) in column.iter_mut().enumerate() {
                *c = self.values[k * n + p];
            }
            column.sort_by(|a, b| a.total_cmp(b));
            for (k, c) in column.iter().enumerate() {
                self.values[k * n + p] = *c;
            }
        }
    }
}

fn check_seq(seq: &MaskedSequence, cfg: &ModelConfig) -> Result<(), ModelError> {
    if seq.patch_len() != cfg.patch_len {
        return Err(ModelError::PatchLen {
            expected: cfg.patch_len,
            got: seq.patch_len(),
        });
    }
    Ok(())
}

/// Observed tokens are normalised by `(mu, sigma + eps)` and projected by the
/// patch embedding; masked tokens take the learned mask embedding.
pub fn embed(
    g: &mut Graph,
    seq: &MaskedSequence,
    cfg: &ModelConfig,
    w: &ModelParams<Var>,
) -> Result<Var, ModelError> {
    check_seq(seq, cfg)?;
    let n = seq.n_tokens();
    let (mu, scale) = (seq.mu(), seq.sigma() + cfg.eps_denorm);
    let normalized: Vec<f64> = (0..n)
        .flat_map(|i| {
            let masked = seq.is_masked(i);
            seq.token(i)
                .iter()
                .map(move |&v| if masked { 0.0 } else { (v - mu) / scale })
        })
        .collect();
    let tokens = g.constant(vec![n, cfg.patch_len], normalized)?;
    let projected = g.matmul_nt(tokens, w.patch_embed)?;
    let with_mask = g.concat_rows(&[projected, w.mask_embed])?;
    let idx: Vec<usize> = (0..n)
        .map(|i| if seq.is_masked(i) { n } else { i })
        .collect();
    Ok(g.gather_rows(with_mask, &idx)?)
}

/// Pre-norm block with dense bidirectional attention, returning the block
/// output and the per-head attention probabilities.
pub fn attention_block_with_probs(
    g: &mut Graph,
    x: Var,
    layer: &LayerParams<Var>,
    cfg: &ModelConfig,
    positions: &[usize],
) -> Result<(Var, Vec<Var>), ModelError> {
    let hd = cfg.head_dim();
    let h = g.rms_norm(x, layer.attn_norm, cfg.norm_eps)?;
    let q = g.matmul_nt(h, layer.wq)?;
    let k = g.matmul_nt(h, layer.wk)?;
    let v = g.matmul_nt(h, layer.wv)?;
    let n_kv = cfg.n_heads / cfg.kv_group;
    let mut keys = Vec::with_capacity(n_kv);
    let mut vals = Vec::with_capacity(n_kv);
    for j in 0..n_kv {
        let kh = g.slice_cols(k, j * hd, hd)?;
        keys.push(g.rope(kh, positions, cfg.rope_base)?);
        vals.push(g.slice_cols(v, j * hd, hd)?);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let j = head / cfg.kv_group;
        let qh = g.slice_cols(q, head * hd, hd)?;
        let qh = g.rope(qh, positions, cfg.rope_base)?;
        let scores = g.matmul_nt(qh, keys[j])?;
        let scores = g.scale(scores, scale);
        let p = g.softmax_lastdim(scores);
        heads.push(g.matmul(p, vals[j])?);
        probs.push(p);
    }
    let attn = g.concat_cols(&heads)?;
    let attn = g.matmul_nt(attn, layer.wo)?;
    let x = g.add(x, attn)?;
    let h = g.rms_norm(x, layer.ffn_norm, cfg.norm_eps)?;
    let f = g.swiglu_ffn(h, layer.w_gate, layer.w_up, layer.w_down)?;
    Ok((g.add(x, f)?, probs))
}

pub fn attention_block(
    g: &mut Graph,
    x: Var,
    layer: &LayerParams<Var>,
    cfg: &ModelConfig,
    positions: &[usize],
) -> Result<Var, ModelError> {
    attention_block_with_probs(g, x, layer, cfg, positions).map(|(y, _)| y)
}

/// `out[i] = F_c([x[i-1]; x[i]])`, with `x[-1] := x[0]`.
pub fn merge_shallow(g: &mut Graph, x: Var, f_c: Var) -> Result<Var, ModelError> {
    let n = g.shape(x)[0];
    let prev: Vec<usize> = (0..n).map(|i| i.saturating_sub(1)).collect();
    let shifted = g.gather_rows(x, &prev)?;
    let pairs = g.concat_cols(&[shifted, x])?;
    Ok(g.matmul_nt(pairs, f_c)?)
}

/// `out[i] = F_m([x[i]; skip[i]])`.
pub fn merge_deep(g: &mut Graph, x: Var, skip: Var, f_m: Var) -> Result<Var, ModelError> {
    if g.shape(x) != g.shape(skip) {
        return Err(TensorError::ShapeMismatch {
            op: "merge_deep",
            left: g.shape(x).to_vec(),
            right: g.shape(skip).to_vec(),
        }
        .into());
    }
    let pairs = g.concat_cols(&[x, skip])?;
    Ok(g.matmul_nt(pairs, f_m)?)
}

/// Hidden states `N x d` after the last block (before the final norm).
pub fn forward(
    g: &mut Graph,
    seq: &MaskedSequence,
    cfg: &ModelConfig,
    w: &ModelParams<Var>,
) -> Result<Var, ModelError> {
    let positions = seq.positions();
    let mut h = embed(g, seq, cfg, w)?;
    let half = cfg.n_layers / 2;
    let mut skips = Vec::with_capacity(half);
    for (j, layer) in w.layers.iter().enumerate() {
        if cfg.u_shape && j >= half {
            // deep layer j+1 pairs with shallow layer D-j
            h = merge_deep(g, h, skips[cfg.n_layers - 1 - j], w.merge_deep[j - half])?;
        }
        h = attention_block(g, h, layer, cfg, &positions)?;
        if cfg.u_shape && j < half {
            skips.push(h);
            h = merge_shallow(g, h, w.merge_shallow[j])?;
        }
    }
    Ok(h)
}

/// Head outputs as a graph node of shape `(R · n_masked) x P` plus the
/// matching forecast snapshot.
pub struct HeadOutput {
    pub quantiles: Var,
    pub forecast: QuantileForecast,
}

/// `q_k = F_k(norm(hidden[i])) · (sigma + eps) + mu` for every masked token.
pub fn quantile_heads(
    g: &mut Graph,
    hidden: Var,
    seq: &MaskedSequence,
    cfg: &ModelConfig,
    w: &ModelParams<Var>,
) -> Result<HeadOutput, ModelError> {
    if seq.mask_idx().is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let masked = g.gather_rows(hidden, seq.mask_idx())?;
    let normed = g.rms_norm(masked, w.final_norm, cfg.norm_eps)?;
    let (mu, scale) = (seq.mu(), seq.sigma() + cfg.eps_denorm);
    let mut per_level = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let y = g.matmul_nt(normed, head.weight)?;
        let y = g.add_row(y, head.bias)?;
        per_level.push(g.affine(y, scale, mu));
    }
    let quantiles = g.concat_rows(&per_level)?;
    let forecast = QuantileForecast::new(
        cfg.quantile_levels.clone(),
        seq.mask_idx().to_vec(),
        cfg.patch_len,
        g.value(quantiles).to_vec(),
    )?;
    Ok(HeadOutput {
        quantiles,
        forecast,
    })
}

/// Configuration plus weights, ready for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_shapes(&config);
        let names = weights.named();
        if names.len() != expected.len() {
            return Err(ModelError::Config("weights do not match config".into()));
        }
        for ((name, t), (_, shape)) in names.iter().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::WeightShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { config, weights })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        let weights = ModelWeights::init(&config, rng)?;
        Ok(Self { config, weights })
    }

    /// Untracked forward pass; quantiles are left in head order.
    pub fn predict(&self, seq: &MaskedSequence) -> Result<QuantileForecast, ModelError> {
        let mut g = Graph::new();
        let w = self.weights.bind(&mut g, false);
        let hidden = forward(&mut g, seq, &self.config, &w)?;
        Ok(quantile_heads(&mut g, hidden, seq, &self.config, &w)?.forecast)
    }
}

#[cfg(test)]
mod tests;
