//! Eager computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates immediately and records enough state on the tape
//! to replay its vector-Jacobian product. A graph lives for one forward pass;
//! build a fresh one per sample.

use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    Pinball {
        q: Var,
        weighted_terms: Vec<PinballTerm>,
    },
}

#[derive(Debug, Clone, Copy)]
struct PinballTerm {
    target: f64,
    alpha: f64,
    weight: f64,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }
}

/// Tape of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// `c += op(a) * op(b)` for row-major operands described by strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: strides describe in-bounds views of `a` (m x k), `b` (k x n) and
    // the row-major `c` (m x n); all three slices outlive the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a tensor as a leaf; gradients are tracked if the tensor asks.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a tensor as a tracked parameter regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph values are finite")
    }

    /// Accumulated gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn expect_rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.expect_rank2(a, "matmul")?;
        let (k2, n) = self.expect_rank2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            rg,
        ))
    }

    /// Matrix product `a · bᵀ`, the layout used by linear layers stored as
    /// `[out, in]` and by attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.expect_rank2(a, "matmul_nt")?;
        let (n, k2) = self.expect_rank2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (1, k as isize),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            rg,
        ))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(a, b, name)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast add of a vector over the last dimension.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let cols = self.node(x).cols();
        if self.shape(row) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|c| c.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, row }, rg))
    }

    /// `factor · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, factor: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor + shift).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, factor }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `z · sigmoid(z)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&z| z * sigmoid(z)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Silu(x), rg)
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let cols = self.node(x).cols();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    /// RMS normalisation over the last dimension followed by a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, TensorError> {
        let cols = self.node(x).cols();
        if self.shape(gain) != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain);
        let mut inv_rms = Vec::with_capacity(self.node(x).rows());
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let r = if ms + eps > 0.0 {
                1.0 / (ms + eps).sqrt()
            } else {
                0.0
            };
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(v, gi)| v * r * gi));
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Rotary position embedding: each row is one token, consecutive pairs
    /// `(2i, 2i+1)` rotate by `pos · base^(-2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var, TensorError> {
        let d = self.node(x).cols();
        if d % 2 != 0 {
            return Err(TensorError::OddDimension(d));
        }
        let rows = self.node(x).rows();
        if positions.len() != rows {
            return Err(TensorError::LengthMismatch {
                expected: rows,
                actual: positions.len(),
            });
        }
        let half = d / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / d as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                row[2 * i] = a * c - b * s;
                row[2 * i + 1] = a * s + b * c;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Rope { x, cos, sin }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.expect_rank2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (rows, _) = self.expect_rank2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.expect_rank2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row gather; indices may repeat (gradients scatter-add).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.expect_rank2(x, "gather_rows")?;
        if idx.is_empty() {
            return Err(TensorError::Empty("gather_rows"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::OutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let src = self.value(x);
        let out = idx
            .iter()
            .flat_map(|&i| src[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![idx.len(), cols],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, cols) = self.expect_rank2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.expect_rank2(p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let out = parts
            .iter()
            .flat_map(|&p| self.value(p).iter().copied())
            .collect();
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v * v).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::SumSquares(x), rg)
    }

    /// Scalar `Σ w·ℓ_α(q, x)` over all elements of `q`. At `q == x` the
    /// subgradient takes the `(1 − α)` branch.
    pub fn weighted_pinball(
        &mut self,
        q: Var,
        targets: &[f64],
        alphas: &[f64],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let n = self.value(q).len();
        for len in [targets.len(), alphas.len(), weights.len()] {
            if len != n {
                return Err(TensorError::LengthMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        let terms: Vec<PinballTerm> = targets
            .iter()
            .zip(alphas)
            .zip(weights)
            .map(|((&target, &alpha), &weight)| PinballTerm {
                target,
                alpha,
                weight,
            })
            .collect();
        let total = self
            .value(q)
            .iter()
            .zip(&terms)
            .map(|(&qv, t)| {
                let diff = t.target - qv;
                let l = if diff >= 0.0 {
                    diff * t.alpha
                } else {
                    -diff * (1.0 - t.alpha)
                };
                t.weight * l
            })
            .sum();
        let rg = self.rg(&[q]);
        Ok(self.push(
            vec![1],
            vec![total],
            Op::Pinball {
                q,
                weighted_terms: terms,
            },
            rg,
        ))
    }

    /// `(silu(x·w_gate) ⊙ (x·w_up)) · w_down` with weights stored `[in, out]`.
    pub fn swiglu_ffn(
        &mut self,
        x: Var,
        w_gate: Var,
        w_up: Var,
        w_down: Var,
    ) -> Result<Var, TensorError> {
        let gate = self.matmul(x, w_gate)?;
        let gate = self.silu(gate);
        let up = self.matmul(x, w_up)?;
        let h = self.mul(gate, up)?;
        self.matmul(h, w_down)
    }

    /// Reverse pass from a scalar. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                add_into(&mut self.nodes[i].grad, &g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                let (av, bv) = (self.value(a), self.value(b));
                if wants(a) {
                    let mut da = vec![0.0; m * k];
                    // trans_b: B is n x k, dA = dC·B; else B is k x n, dA = dC·Bᵀ
                    let b_strides = if trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    gemm_acc(m, n, k, g, (n as isize, 1), bv, b_strides, &mut da);
                    add_into(&mut grads[a.0], &da);
                }
                if wants(b) {
                    if trans_b {
                        // dB = dCᵀ·A, n x k
                        let mut db = vec![0.0; n * k];
                        gemm_acc(n, m, k, g, (1, n as isize), av, (k as isize, 1), &mut db);
                        add_into(&mut grads[b.0], &db);
                    } else {
                        // dB = Aᵀ·dC, k x n
                        let mut db = vec![0.0; k * n];
                        gemm_acc(k, m, n, av, (1, k as isize), g, (n as isize, 1), &mut db);
                        add_into(&mut grads[b.0], &db);
                    }
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    add_into(&mut grads[a.0], g);
                }
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &da);
                }
                if wants(b) {
                    let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &db);
                }
            }
            &Op::AddRow { x, row } => {
                if wants(x) {
                    add_into(&mut grads[x.0], g);
                }
                if wants(row) {
                    let cols = node.cols();
                    let mut dr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        dr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[row.0], &dr);
                }
            }
            &Op::Scale { x, factor } => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Silu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(&gv, &z)| {
                        let s = sigmoid(z);
                        gv * s * (1.0 + z * (1.0 - s))
                    })
                    .collect();
                add_into(&mut grads[x.0], &dx);
            }
            &Op::Softmax(x) => {
                let cols = node.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(cols).zip(node.data.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let cols = node.cols();
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if wants(*gain) {
                    let mut dg = vec![0.0; cols];
                    for ((gr, xr), r) in g.chunks(cols).zip(xv.chunks(cols)).zip(inv_rms) {
                        for j in 0..cols {
                            dg[j] += gr[j] * xr[j] * r;
                        }
                    }
                    add_into(&mut grads[gain.0], &dg);
                }
                if wants(*x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for ((gr, xr), &r) in g.chunks(cols).zip(xv.chunks(cols)).zip(inv_rms) {
                        let dot: f64 = (0..cols).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let c = r * r * r * dot / cols as f64;
                        dx.extend((0..cols).map(|j| r * gv[j] * gr[j] - c * xr[j]));
                    }
                    add_into(&mut grads[x.0], &dx);
                }
            }
            Op::Rope { x, cos, sin } => {
                let d = node.cols();
                let half = d / 2;
                let mut dx = g.to_vec();
                for (r, row) in dx.chunks_mut(d).enumerate() {
                    for i in 0..half {
                        let (c, s) = (cos[r * half + i], sin[r * half + i]);
                        let (a, b) = (row[2 * i], row[2 * i + 1]);
                        row[2 * i] = a * c + b * s;
                        row[2 * i + 1] = -a * s + b * c;
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            &Op::SliceCols { x, start } => {
                let src = &self.nodes[x.0];
                let (rows, cols) = (src.shape[0], src.shape[1]);
                let len = node.shape[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if wants(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        add_into(&mut grads[p.0], &dp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = node.shape[1];
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dx[src * cols + j] += g[r * cols + j];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    if wants(p) {
                        add_into(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::Sum(x) => {
                let dx = vec![g[0]; self.nodes[x.0].data.len()];
                add_into(&mut grads[x.0], &dx);
            }
            &Op::SumSquares(x) => {
                let dx: Vec<f64> = self.value(x).iter().map(|v| 2.0 * v * g[0]).collect();
                add_into(&mut grads[x.0], &dx);
            }
            Op::Pinball { q, weighted_terms } => {
                let dq: Vec<f64> = self
                    .value(*q)
                    .iter()
                    .zip(weighted_terms)
                    .map(|(&qv, t)| {
                        let slope = if t.target > qv {
                            -t.alpha
                        } else {
                            1.0 - t.alpha
                        };
                        g[0] * t.weight * slope
                    })
                    .collect();
                add_into(&mut grads[q.0], &dq);
            }
        }
    }
}
