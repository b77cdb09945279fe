//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records operations on a flat tape; [`Graph::backward`] walks
//! the tape in reverse construction order and accumulates gradients into
//! every node. Only what the tiny bidirectional MLM needs is implemented:
//! 2-D matmuls, row-broadcast add/mul, row softmax, layernorm, tanh-GELU,
//! embedding lookup, weighted cross entropy, column slice/concat, dropout.

use crate::error::{Error, Result};
use rand::Rng;

/// Dense row-major tensor. `shape` is `[rows, cols]` for matrices and
/// `[n]` for vectors/scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) of a 2-D tensor; a 1-D tensor is treated as one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("expected 1-D or 2-D tensor, got shape {:?}", self.shape),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    /// C = A · B
    MatMul(NodeId, NodeId),
    /// C = A · Bᵀ
    MatMulNt(NodeId, NodeId),
    /// Elementwise, or B broadcast as a row over A's rows.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Row-wise softmax; saved value is reused in backward.
    Softmax(NodeId),
    /// Row-wise normalization (no affine); ctx holds per-row (mean, inv_std).
    LayerNorm(NodeId, Vec<(f64, f64)>),
    Gelu(NodeId),
    /// Gather rows `ids` from a table node.
    Embedding(NodeId, Vec<usize>),
    /// Weighted mean NLL; ctx holds softmax rows and the weight sum.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        weight_sum: f64,
    },
    SumAll(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Multiply by a fixed mask (already scaled by 1/(1-p)).
    Dropout(NodeId, Vec<f64>),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Tape of operations. Construction order is topological order; backward
/// visits nodes strictly in reverse.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("[{m}x{k}] x [{k2}x{n}]"),
            });
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b)))
    }

    /// C = A · Bᵀ with A `[m x k]`, B `[n x k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                details: format!("[{m}x{k}] x [{n}x{k2}]^T"),
            });
        }
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += av[i * k + p] * bv[j * k + p];
                }
                out[i * n + j] = s;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b)))
    }

    fn binary_shapes(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize, bool)> {
        let (m, n) = self.value(a).dims2();
        let (bm, bn) = self.value(b).dims2();
        if bm == m && bn == n {
            Ok((m, n, false))
        } else if bm == 1 && bn == n {
            Ok((m, n, true))
        } else {
            Err(Error::ShapeMismatch {
                op,
                details: format!("[{m}x{n}] vs [{bm}x{bn}]"),
            })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n, bcast) = self.binary_shapes("add", a, b)?;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let bi = if bcast { j } else { i * n + j };
                out[i * n + j] = av[i * n + j] + bv[bi];
            }
        }
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor::new(shape, out), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n, bcast) = self.binary_shapes("mul", a, b)?;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let bi = if bcast { j } else { i * n + j };
                out[i * n + j] = av[i * n + j] * bv[bi];
            }
        }
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor::new(shape, out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut t = self.value(a).clone();
        for v in &mut t.data {
            *v *= c;
        }
        self.push(t, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let av = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
        }
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, out), Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.value(a).dims2();
        let av = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; m * n];
        let mut ctx = Vec::with_capacity(m);
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std;
            }
            ctx.push((mean, inv_std));
        }
        let shape = self.value(a).shape.clone();
        self.push(Tensor::new(shape, out), Op::LayerNorm(a, ctx))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut t = self.value(a).clone();
        for v in &mut t.data {
            *v = gelu(*v);
        }
        self.push(t, Op::Gelu(a))
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.value(table).dims2();
        for &id in ids {
            if id >= rows {
                return Err(Error::InvalidOp {
                    op: "embedding",
                    details: format!("index {id} out of range for table with {rows} rows"),
                });
            }
        }
        let tv = &self.nodes[table.0].value.data;
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out),
            Op::Embedding(table, ids.to_vec()),
        ))
    }

    /// Weighted mean negative log-likelihood over rows:
    /// `sum_i w_i * nll_i / sum_i w_i`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let (m, v) = self.value(logits).dims2();
        if targets.len() != m || weights.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                details: format!(
                    "logits [{m}x{v}], {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(Error::InvalidOp {
                op: "cross_entropy",
                details: "weight sum must be positive".into(),
            });
        }
        let lv = &self.nodes[logits.0].value.data;
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            if targets[i] >= v {
                return Err(Error::InvalidOp {
                    op: "cross_entropy",
                    details: format!("target {} out of vocab {v}", targets[i]),
                });
            }
            softmax_row(&lv[i * v..(i + 1) * v], &mut probs[i * v..(i + 1) * v]);
            loss -= weights[i] * probs[i * v + targets[i]].max(1e-300).ln();
        }
        loss /= weight_sum;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                weight_sum,
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                details: format!("cols {start}..{} of [{m}x{n}]", start + len),
            });
        }
        let av = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&av[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidOp {
                op: "concat_cols",
                details: "no inputs".into(),
            });
        }
        let (m, _) = self.value(parts[0]).dims2();
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            if pm != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    details: format!("row counts {m} vs {pm}"),
                });
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = self.value(p).dims2();
            let pv = &self.nodes[p.0].value.data;
            for i in 0..m {
                out[i * total + off..i * total + off + pn]
                    .copy_from_slice(&pv[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        Ok(self.push(Tensor::matrix(m, total, out), Op::ConcatCols(parts.to_vec())))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl Rng) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut t = self.value(a).clone();
        for (v, m) in t.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(t, Op::Dropout(a, mask))
    }

    /// Reverse-mode sweep from a scalar `loss`; gradients accumulate into
    /// every node reachable backwards from it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidOp {
                op: "backward",
                details: format!("loss must be scalar, got shape {:?}", self.value(loss).shape),
            });
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            // take op context out to appease the borrow checker
            let node = &self.nodes[idx];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = node.grad.clone();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.value(a).dims2();
                    let (_, n) = self.value(b).dims2();
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += av[i * k + p] * g[i * n + j];
                            }
                            gb[p * n + j] += s;
                        }
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = self.value(a).dims2();
                    let (n, _) = self.value(b).dims2();
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv[j * k + p];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    for j in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += g[i * n + j] * av[i * k + p];
                            }
                            gb[j * k + p] += s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, n, bcast) = self.binary_shapes("add", a, b)?;
                    for (ga, gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    if bcast {
                        for i in 0..m {
                            for j in 0..n {
                                gb[j] += g[i * n + j];
                            }
                        }
                    } else {
                        for (gb, gi) in gb.iter_mut().zip(&g) {
                            *gb += gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, n, bcast) = self.binary_shapes("mul", a, b)?;
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    {
                        let ga = &mut self.nodes[a.0].grad;
                        for i in 0..m {
                            for j in 0..n {
                                let bi = if bcast { j } else { i * n + j };
                                ga[i * n + j] += g[i * n + j] * bv[bi];
                            }
                        }
                    }
                    let gb = &mut self.nodes[b.0].grad;
                    for i in 0..m {
                        for j in 0..n {
                            let bi = if bcast { j } else { i * n + j };
                            gb[bi] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    for (ga, gi) in self.nodes[a.0].grad.iter_mut().zip(&g) {
                        *ga += c * gi;
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let (m, n) = self.value(a).dims2();
                    let y = self.nodes[idx].value.data.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            ga[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm(a, ctx) => {
                    let a = *a;
                    let ctx = ctx.clone();
                    let (m, n) = self.value(a).dims2();
                    let y = self.nodes[idx].value.data.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        let (_, inv_std) = ctx[i];
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mean_g: f64 = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy: f64 =
                            gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for j in 0..n {
                            ga[i * n + j] += inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let x = self.nodes[a.0].value.data.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for j in 0..x.len() {
                        ga[j] += g[j] * gelu_grad(x[j]);
                    }
                }
                Op::Embedding(table, ids) => {
                    let table = *table;
                    let ids = ids.clone();
                    let (_, d) = self.value(table).dims2();
                    let gt = &mut self.nodes[table.0].grad;
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                    weight_sum,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let weights = weights.clone();
                    let probs = probs.clone();
                    let ws = *weight_sum;
                    let (m, v) = self.value(logits).dims2();
                    let gl = &mut self.nodes[logits.0].grad;
                    let g0 = g[0];
                    for i in 0..m {
                        let w = weights[i] / ws;
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * v + j] += g0 * w * (probs[i * v + j] - onehot);
                        }
                    }
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let g0 = g[0];
                    for ga in self.nodes[a.0].grad.iter_mut() {
                        *ga += g0;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (a, start, len) = (*a, *start, *len);
                    let (m, n) = self.value(a).dims2();
                    let ga = &mut self.nodes[a.0].grad;
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let (m, total) = self.value(NodeId(idx)).dims2();
                    let mut off = 0;
                    for p in parts {
                        let (_, pn) = self.value(p).dims2();
                        let gp = &mut self.nodes[p.0].grad;
                        for i in 0..m {
                            for j in 0..pn {
                                gp[i * pn + j] += g[i * total + off + j];
                            }
                        }
                        off += pn;
                    }
                }
                Op::Dropout(a, mask) => {
                    let a = *a;
                    let mask = mask.clone();
                    let ga = &mut self.nodes[a.0].grad;
                    for j in 0..mask.len() {
                        ga[j] += g[j] * mask[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
