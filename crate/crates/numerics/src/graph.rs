//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly and appends a node; node ids are assigned in creation order, so
//! the node list is already a topological order and [`Graph::backward`] is a
//! single reverse sweep that visits each node once.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericsError, Result};
use crate::kernels::{self, MatMut, MatRef};
use crate::tensor::{check_ce_inputs, logsumexp, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// A named trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.grad = Some(Tensor::from_parts(self.value.shape().to_vec(), g.to_vec()));
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, segments: Vec<usize>, probs: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    MeanRows(Var),
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    Sum(Var),
    Transpose(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus, after [`Graph::backward`], its gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf holding `t`; its gradient is kept after backward when `requires_grad`.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(t, Op::Leaf, requires_grad, "input")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.input(t, false)
    }

    /// Trainable leaf for `p`. Registering the same parameter twice returns
    /// the same node, so tied weights accumulate a single gradient.
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.id) {
            return Ok(v);
        }
        let v = self.input(p.value.clone(), true)?;
        self.params.insert(p.id, v);
        Ok(v)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.as_matrix("matmul")?;
        let (br, bc) = tb.as_matrix("matmul")?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let bview = if trans_b {
            MatRef::new(tb.data(), br, bc).t()
        } else {
            MatRef::new(tb.data(), br, bc)
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(1.0, MatRef::new(ta.data(), m, k), bview, 0.0, MatMut::new(&mut out, m, n));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg, "matmul")
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.numel() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        kernels::add_row_in_place(&mut data, tr.data());
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::AddRow { a, row }, rg, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg, "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(kernels::gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg, "relu")
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d < 2 {
            return Err(NumericsError::Dimension {
                op: "layer_norm",
                detail: format!("normalized width must be at least 2, got {d}"),
            });
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_rows(tx.data(), d, tg.data(), tb.data(), &mut out, &mut xhat, &mut rstd);
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg, "layer_norm")
    }

    /// Multi-head scaled dot-product self-attention over a batch of
    /// independent sequences stacked by rows. `segments` lists the sequence
    /// lengths in order and must sum to the row count of `q`, `k` and `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool, segments: &[usize]) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = tq.as_matrix("attention")?;
        if tk.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if tv.shape() != tq.shape() {
            return Err(mismatch("attention", tq, tv));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Dimension {
                op: "attention",
                detail: format!("width {d} not divisible into {heads} heads"),
            });
        }
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(NumericsError::Dimension {
                op: "attention",
                detail: format!("segments {segments:?} do not partition {rows} rows"),
            });
        }
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; segments.iter().map(|t| heads * t * t).sum()];
        let (mut r0, mut p0) = (0, 0);
        for &t in segments {
            let span = r0 * d..(r0 + t) * d;
            let plen = heads * t * t;
            kernels::attention_forward(
                &tq.data()[span.clone()],
                &tk.data()[span.clone()],
                &tv.data()[span.clone()],
                t,
                t,
                d,
                heads,
                causal,
                0,
                &mut out[span],
                Some(&mut probs[p0..p0 + plen]),
            );
            r0 += t;
            p0 += plen;
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            causal,
            segments: segments.to_vec(),
            probs,
        };
        self.push(Tensor::from_parts(vec![rows, d], out), op, rg, "attention")
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = tt.as_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(NumericsError::Dimension {
                op: "gather_rows",
                detail: "no rows selected".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(NumericsError::Dimension {
                    op: "gather_rows",
                    detail: format!("row {i} out of range for {n} rows"),
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let rg = self.rg(table);
        let t = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, rg, "gather_rows")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NumericsError::Dimension {
            op: "concat_rows",
            detail: "nothing to concatenate".into(),
        })?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.as_matrix("concat_rows")?;
            if c != d {
                return Err(mismatch("concat_rows", self.value(first), t));
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![rows, d], data), Op::ConcatRows(parts.to_vec()), rg, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.as_matrix("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(NumericsError::Dimension {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of range for {r}", start + len),
            });
        }
        let t = Tensor::from_parts(vec![len, c], ta.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        self.push(t, Op::SliceRows { a, start }, rg, "slice_rows")
    }

    /// Column-wise mean, giving a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.as_matrix("mean_rows")?;
        let mut out = vec![0.0; c];
        for row in ta.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(a), rg, "mean_rows")
    }

    /// Scales each row to unit Euclidean length. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, c) = ta.as_matrix("l2_normalize_rows")?;
        let mut data = ta.data().to_vec();
        let mut norms = Vec::new();
        for (i, row) in data.chunks_exact_mut(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NumericsError::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has zero norm"),
                });
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::L2NormalizeRows { a, norms }, rg, "l2_normalize_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg, "transpose")
    }

    /// Mean token-level cross entropy over unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = tl.as_matrix("cross_entropy")?;
        check_ce_inputs(n, v, targets, mask)?;
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = tl.row(r);
            let lse = logsumexp(row);
            total += lse - row[targets[r]];
            count += 1;
            for (p, &z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(total / count as f64), op, rg, "cross_entropy")
    }

    /// Mean binary cross entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let ones = vec![1.0; targets.len()];
        self.weighted_bce_with_logits(logits, targets, &ones)
    }

    /// Binary cross entropy with a per-entry weight, summed and divided by
    /// the entry count.
    pub fn weighted_bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.numel() != targets.len() || weights.len() != targets.len() {
            return Err(NumericsError::Dimension {
                op: "bce_with_logits",
                detail: format!("{} logits vs {} targets, {} weights", tl.numel(), targets.len(), weights.len()),
            });
        }
        let n = targets.len() as f64;
        let loss = tl
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, rg, "bce_with_logits")
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                let gv = MatRef::new(g, m, n);
                if rg(*a) {
                    let ga = accumulate(grads, *a, m * k);
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let bv = if *trans_b {
                        MatRef::new(tb.data(), n, k)
                    } else {
                        MatRef::new(tb.data(), k, n).t()
                    };
                    kernels::gemm(1.0, gv, bv, 1.0, MatMut::new(ga, m, k));
                }
                if rg(*b) {
                    let gb = accumulate(grads, *b, k * n);
                    let av = MatRef::new(ta.data(), m, k);
                    if *trans_b {
                        kernels::gemm(1.0, gv.t(), av, 1.0, MatMut::new(gb, n, k));
                    } else {
                        kernels::gemm(1.0, av.t(), gv, 1.0, MatMut::new(gb, k, n));
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    for (x, y) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if rg(*b) {
                    for (x, y) in accumulate(grads, *b, g.len()).iter_mut().zip(g) {
                        *x += sign * y;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let tb = val(*b).data();
                    for ((x, y), z) in accumulate(grads, *a, g.len()).iter_mut().zip(g).zip(tb) {
                        *x += y * z;
                    }
                }
                if rg(*b) {
                    let ta = val(*a).data();
                    for ((x, y), z) in accumulate(grads, *b, g.len()).iter_mut().zip(g).zip(ta) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if rg(*a) {
                    for (x, y) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if rg(*row) {
                    let n = val(*row).numel();
                    let gr = accumulate(grads, *row, n);
                    for grow in g.chunks_exact(n) {
                        for (x, y) in gr.iter_mut().zip(grow) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                for (x, y) in accumulate(grads, *a, g.len()).iter_mut().zip(g) {
                    *x += s * y;
                }
            }
            Op::Gelu(a) => {
                let ta = val(*a).data();
                for ((x, y), &z) in accumulate(grads, *a, g.len()).iter_mut().zip(g).zip(ta) {
                    *x += y * kernels::gelu_grad(z);
                }
            }
            Op::Tanh(a) => {
                for ((x, y), &o) in accumulate(grads, *a, g.len()).iter_mut().zip(g).zip(out.data()) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::Relu(a) => {
                let ta = val(*a).data();
                for ((x, y), &z) in accumulate(grads, *a, g.len()).iter_mut().zip(g).zip(ta) {
                    if z > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let ga = accumulate(grads, *a, g.len());
                for ((gx, gy), y) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.data().chunks_exact(n)) {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..n {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = out.cols();
                let tg = val(*gain).data();
                if rg(*gain) {
                    let gg = accumulate(grads, *gain, d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if rg(*bias) {
                    let gb = accumulate(grads, *bias, d);
                    for grow in g.chunks_exact(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = accumulate(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dhh = 0.0;
                        for j in 0..d {
                            dh[j] = grow[j] * tg[j];
                            mean_dh += dh[j];
                            mean_dhh += dh[j] * hrow[j];
                        }
                        mean_dh /= d as f64;
                        mean_dhh /= d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, causal, segments, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, *causal, segments, probs, grads);
            }
            Op::GatherRows { table, ids } => {
                let tt = val(*table);
                let d = tt.cols();
                let gt = accumulate(grads, *table, tt.numel());
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if rg(p) {
                        for (x, y) in accumulate(grads, p, n).iter_mut().zip(&g[off..off + n]) {
                            *x += y;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let ta = val(*a);
                let c = ta.cols();
                let ga = accumulate(grads, *a, ta.numel());
                for (x, y) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::MeanRows(a) => {
                let ta = val(*a);
                let c = ta.cols();
                let inv = 1.0 / ta.rows() as f64;
                let ga = accumulate(grads, *a, ta.numel());
                for row in ga.chunks_exact_mut(c) {
                    for (x, y) in row.iter_mut().zip(g) {
                        *x += y * inv;
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                let c = out.cols();
                let ga = accumulate(grads, *a, g.len());
                for (r, ((gx, gy), y)) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data().chunks_exact(c))
                    .enumerate()
                {
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[j] += (gy[j] - y[j] * dot) / norms[r];
                    }
                }
            }
            Op::Sum(a) => {
                for x in accumulate(grads, *a, val(*a).numel()).iter_mut() {
                    *x += g[0];
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let ga = accumulate(grads, *a, g.len());
                // out is r×c, input is c×r
                for i2 in 0..r {
                    for j in 0..c {
                        ga[j * r + i2] += g[i2 * c + j];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let v = val(*logits).cols();
                let scale = g[0] / *count as f64;
                let gl = accumulate(grads, *logits, probs.len());
                for r in 0..mask.len() {
                    if !mask[r] {
                        continue;
                    }
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (x, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *x += scale * p;
                    }
                    row[targets[r]] -= scale;
                }
            }
            Op::BceWithLogits { logits, targets, weights } => {
                let tl = val(*logits).data();
                let scale = g[0] / targets.len() as f64;
                let gl = accumulate(grads, *logits, tl.len());
                for (((x, &z), &t), &w) in gl.iter_mut().zip(tl).zip(targets).zip(weights) {
                    *x += scale * w * (1.0 / (1.0 + (-z).exp()) - t);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        segments: &[usize],
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total = tq.numel();
        let mut gq = vec![0.0; total];
        let mut gk = vec![0.0; total];
        let mut gv = vec![0.0; total];
        let (mut r0, mut p0) = (0, 0);
        for &t in segments {
            let span = r0 * d..(r0 + t) * d;
            let (qs, ks, vs, gs) = (&tq.data()[span.clone()], &tk.data()[span.clone()], &tv.data()[span.clone()], &g[span.clone()]);
            let mut dp = vec![0.0; t * t];
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[p0 + h * t * t..p0 + (h + 1) * t * t];
                // dV = Pᵀ dO
                kernels::gemm(
                    1.0,
                    MatRef::new(p, t, t).t(),
                    MatRef::col_block(gs, t, d, c0, dh),
                    1.0,
                    MatMut::col_block(&mut gv[span.clone()], t, d, c0, dh),
                );
                // dP = dO Vᵀ
                kernels::gemm(
                    1.0,
                    MatRef::col_block(gs, t, d, c0, dh),
                    MatRef::col_block(vs, t, d, c0, dh).t(),
                    0.0,
                    MatMut::new(&mut dp, t, t),
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), masked entries have P = 0
                for i in 0..t {
                    let visible = if causal { i + 1 } else { t };
                    let prow = &p[i * t..i * t + visible];
                    let drow = &mut dp[i * t..(i + 1) * t];
                    let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..visible {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                    for x in &mut drow[visible..] {
                        *x = 0.0;
                    }
                }
                // dQ = scale · dS K ; dK = scale · dSᵀ Q
                kernels::gemm(
                    scale,
                    MatRef::new(&dp, t, t),
                    MatRef::col_block(ks, t, d, c0, dh),
                    1.0,
                    MatMut::col_block(&mut gq[span.clone()], t, d, c0, dh),
                );
                kernels::gemm(
                    scale,
                    MatRef::new(&dp, t, t).t(),
                    MatRef::col_block(qs, t, d, c0, dh),
                    1.0,
                    MatMut::col_block(&mut gk[span.clone()], t, d, c0, dh),
                );
            }
            r0 += t;
            p0 += heads * t * t;
        }
        for (var, gvec) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(var) {
                for (x, y) in accumulate(grads, var, total).iter_mut().zip(&gvec) {
                    *x += y;
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`. Available for
    /// leaves that require a gradient and were reached from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every registered parameter into `Param::grad`.
    pub fn accumulate_param_grads<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        for p in params {
            if let Some(&v) = self.params.get(&p.id) {
                if let Some(g) = self.grad(v) {
                    p.accumulate_grad(g);
                }
            }
        }
    }
}
