//! Tape-based reverse-mode automatic differentiation on 2-D f64 tensors.
//!
//! A [`Graph`] records every forward op; [`Graph::backward`] replays the
//! tape in reverse and returns gradients for all parameter leaves. Shape
//! errors while building are programming bugs and panic; cross-graph node
//! use and non-scalar losses are rejected with errors.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::kernels::{
    axpy, dot, logsumexp, matmul_nn, matmul_nt, matmul_tn_acc, softmax_inplace,
};

/// Row-major 2-D tensor. Scalars are `[1,1]`, row vectors `[1,n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![x])
    }

    pub fn row(data: Vec<f64>) -> Tensor {
        Tensor::from_vec(1, data.len(), data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Rounds every element to f32 precision. Parameters are kept exactly
    /// f32-representable so checkpoints (f32 on disk) round-trip bit-exactly.
    pub fn quantize_f32(&mut self) {
        for x in self.data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}

static GRAPH_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    graph: u64,
    idx: u32,
}

enum Op {
    Input,
    /// Leaf whose gradient is collected under the given parameter key.
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `a * b^T` with `b` stored `[n,k]`.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[m,n] + [1,n]` broadcast.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather(NodeId, Vec<u32>),
    /// Rows shifted down by the offset, zero-filled at the top.
    RowShift(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Gelu(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
    },
    RowRange(NodeId, usize, usize),
    /// Picks `(row, col)` entries into an `[n,1]` column.
    Select(NodeId, Vec<(u32, u32)>),
    SumAll(NodeId),
    MinElem(NodeId, NodeId),
    Clamp(NodeId, f64, f64),
    Exp(NodeId),
    /// Scatter-adds per-row scores into class bins: `[T,1]` -> `[1,C]`.
    ScatterClassAdd {
        scores: NodeId,
        classes: Vec<Option<u32>>,
        n_classes: usize,
    },
    /// Column means: `[m,n]` -> `[1,n]`.
    MeanRows(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific saved state (layer-norm stats, attention probabilities).
    aux: Vec<f64>,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            id: GRAPH_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.push_aux(op, value, Vec::new())
    }

    fn push_aux(&mut self, op: Op, value: Tensor, aux: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId {
            graph: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    fn node(&self, id: NodeId) -> &Node {
        assert_eq!(id.graph, self.id, "node used with a different graph");
        &self.nodes[id.idx as usize]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.node(id).value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.shape(), (1, 1), "not a scalar node");
        t.data[0]
    }

    // ---- leaf constructors ----

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, t)
    }

    pub fn scalar_input(&mut self, x: f64) -> NodeId {
        self.input(Tensor::scalar(x))
    }

    /// Parameter leaf; gradients are collected under `key`.
    pub fn param(&mut self, key: usize, t: Tensor) -> NodeId {
        self.push(Op::Param(key), t)
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.value(a).shape();
        let (kb, n) = self.value(b).shape();
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = Tensor::zeros(m, n);
        matmul_nn(
            &self.value(a).data,
            &self.value(b).data,
            &mut out.data,
            m,
            ka,
            n,
        );
        self.push(Op::MatMul(a, b), out)
    }

    /// `a * b^T`, with `b` stored `[n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.value(a).shape();
        let (n, kb) = self.value(b).shape();
        assert_eq!(ka, kb, "matmul_nt inner dims {ka} vs {kb}");
        let mut out = Tensor::zeros(m, n);
        matmul_nt(
            &self.value(a).data,
            &self.value(b).data,
            &mut out.data,
            m,
            ka,
            n,
        );
        self.push(Op::MatMulNT(a, b), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let mut out = self.value(a).clone();
        for (o, x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o += x;
        }
        self.push(Op::Add(a, b), out)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row shapes");
        let mut out = self.value(a).clone();
        for i in 0..m {
            let r = &self.value(row).data;
            for j in 0..n {
                out.data[i * n + j] += r[j];
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let mut out = self.value(a).clone();
        for (o, x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= x;
        }
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        for o in out.data.iter_mut() {
            *o *= c;
        }
        self.push(Op::Scale(a, c), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (v, d) = self.value(table).shape();
        let mut out = Tensor::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            assert!((id as usize) < v, "gather index {id} out of range {v}");
            out.data[i * d..(i + 1) * d]
                .copy_from_slice(self.value(table).row_slice(id as usize));
        }
        self.push(Op::Gather(table, ids.to_vec()), out)
    }

    pub fn row_shift(&mut self, x: NodeId, by: usize) -> NodeId {
        let (m, n) = self.value(x).shape();
        let mut out = Tensor::zeros(m, n);
        for i in by..m {
            let src = self.value(x).row_slice(i - by).to_vec();
            out.data[i * n..(i + 1) * n].copy_from_slice(&src);
        }
        self.push(Op::RowShift(x, by), out)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = self.value(x).shape();
        assert_eq!(self.value(gain).shape(), (1, n), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, n), "layer_norm bias shape");
        const EPS: f64 = 1e-5;
        let mut out = Tensor::zeros(m, n);
        let mut aux = vec![0.0; 2 * m]; // mean, rstd per row
        for i in 0..m {
            let row = self.value(x).row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + EPS).sqrt();
            aux[2 * i] = mean;
            aux[2 * i + 1] = rstd;
            let g = &self.value(gain).data;
            let b = &self.value(bias).data;
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                out.data[i * n + j] = xhat * g[j] + b[j];
            }
        }
        self.push_aux(Op::LayerNorm { x, gain, bias }, out, aux)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = gelu_fwd(*v);
        }
        self.push(Op::Gelu(x), out)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = v.max(0.0);
        }
        self.push(Op::Relu(x), out)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let n = out.cols;
        for i in 0..out.rows {
            softmax_inplace(&mut out.data[i * n..(i + 1) * n]);
        }
        self.push(Op::SoftmaxRows(x), out)
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let n = out.cols;
        for i in 0..out.rows {
            let row = &mut out.data[i * n..(i + 1) * n];
            let lse = logsumexp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(Op::LogSoftmaxRows(x), out)
    }

    /// Fused causal multi-head self-attention over a single sequence.
    /// `q`, `k`, `v` are `[T, d]`; heads split `d` evenly.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, n_heads: usize) -> NodeId {
        let (t, d) = self.value(q).shape();
        assert_eq!(self.value(k).shape(), (t, d), "attention k shape");
        assert_eq!(self.value(v).shape(), (t, d), "attention v shape");
        assert_eq!(d % n_heads, 0, "d_model not divisible by heads");
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(t, d);
        // Saved softmax probabilities, causal: row i holds i+1 entries.
        let mut aux = vec![0.0; n_heads * t * t];
        for h in 0..n_heads {
            let off = h * dh;
            let probs = &mut aux[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &self.value(q).row_slice(i)[off..off + dh];
                let row = &mut probs[i * t..i * t + i + 1];
                for (j, pj) in row.iter_mut().enumerate() {
                    let kj = &self.value(k).row_slice(j)[off..off + dh];
                    *pj = dot(qi, kj) * scale;
                }
                softmax_inplace(row);
            }
            for i in 0..t {
                let row = &probs[i * t..i * t + i + 1];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &self.value(v).row_slice(j)[off..off + dh];
                    axpy(p, vj, &mut out.data[i * d + off..i * d + off + dh]);
                }
            }
        }
        self.push_aux(Op::Attention { q, k, v, n_heads }, out, aux)
    }

    pub fn row_range(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let (m, n) = self.value(x).shape();
        assert!(start <= end && end <= m, "row_range {start}..{end} of {m}");
        let data = self.value(x).data[start * n..end * n].to_vec();
        self.push(Op::RowRange(x, start, end), Tensor::from_vec(end - start, n, data))
    }

    pub fn select(&mut self, x: NodeId, indices: &[(u32, u32)]) -> NodeId {
        let (m, n) = self.value(x).shape();
        let mut out = Tensor::zeros(indices.len(), 1);
        for (i, &(r, c)) in indices.iter().enumerate() {
            assert!((r as usize) < m && (c as usize) < n, "select index out of range");
            out.data[i] = self.value(x).at(r as usize, c as usize);
        }
        self.push(Op::Select(x, indices.to_vec()), out)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "min_elem shapes");
        let mut out = self.value(a).clone();
        for (o, x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o = o.min(*x);
        }
        self.push(Op::MinElem(a, b), out)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = v.clamp(lo, hi);
        }
        self.push(Op::Clamp(x, lo, hi), out)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data.iter_mut() {
            *v = v.exp();
        }
        self.push(Op::Exp(x), out)
    }

    pub fn scatter_class_add(
        &mut self,
        scores: NodeId,
        classes: &[Option<u32>],
        n_classes: usize,
    ) -> NodeId {
        let (m, n) = self.value(scores).shape();
        assert_eq!(n, 1, "scatter_class_add expects a column of scores");
        assert_eq!(classes.len(), m, "one class per score row");
        let mut out = Tensor::zeros(1, n_classes);
        for (i, cls) in classes.iter().enumerate() {
            if let Some(c) = cls {
                assert!((*c as usize) < n_classes, "class {c} out of range");
                out.data[*c as usize] += self.value(scores).data[i];
            }
        }
        self.push(
            Op::ScatterClassAdd {
                scores,
                classes: classes.to_vec(),
                n_classes,
            },
            out,
        )
    }

    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.value(x).shape();
        let mut out = Tensor::zeros(1, n);
        for i in 0..m {
            axpy(1.0 / m as f64, self.value(x).row_slice(i), &mut out.data);
        }
        self.push(Op::MeanRows(x), out)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss; returns gradients indexed by
    /// parameter key (length `n_params`).
    pub fn backward(&self, loss: NodeId, n_params: usize) -> Result<Vec<Option<Tensor>>> {
        if loss.graph != self.id || (loss.idx as usize) >= self.nodes.len() {
            return Err(Error::Graph(
                "loss node does not belong to this graph (detached)".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Graph("loss must be a scalar node".into()));
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let li = loss.idx as usize;
        grads[li] = Some(Tensor::scalar(1.0));

        let mut param_grads: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();

        for i in (0..=li).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(key) => {
                    let slot = &mut param_grads[*key];
                    match slot {
                        Some(acc) => {
                            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                                *a += b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).shape();
                    let n = self.value(*b).cols;
                    // dA = g * B^T; matmul_nt reads B as [k,n] and dots rows.
                    let mut da = Tensor::zeros(m, k);
                    matmul_nt(&g.data, &self.value(*b).data, &mut da.data, m, n, k);
                    accumulate(&mut grads, a.idx as usize, da);
                    // dB += A^T * g
                    let mut db = Tensor::zeros(k, n);
                    matmul_tn_acc(&self.value(*a).data, &g.data, &mut db.data, k, m, n);
                    accumulate(&mut grads, b.idx as usize, db);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.value(*a).shape();
                    let n = self.value(*b).rows;
                    // out = A B^T; dA += g * B
                    let mut da = Tensor::zeros(m, k);
                    matmul_nn(&g.data, &self.value(*b).data, &mut da.data, m, n, k);
                    accumulate(&mut grads, a.idx as usize, da);
                    // dB += g^T * A
                    let mut db = Tensor::zeros(n, k);
                    matmul_tn_acc(&g.data, &self.value(*a).data, &mut db.data, n, m, k);
                    accumulate(&mut grads, b.idx as usize, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.idx as usize, g.clone());
                    accumulate(&mut grads, b.idx as usize, g);
                }
                Op::AddRow(a, row) => {
                    let (m, n) = g.shape();
                    let mut dr = Tensor::zeros(1, n);
                    for i in 0..m {
                        axpy(1.0, g.row_slice(i), &mut dr.data);
                    }
                    accumulate(&mut grads, a.idx as usize, g);
                    accumulate(&mut grads, row.idx as usize, dr);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (x, y) in da.data.iter_mut().zip(&self.value(*b).data) {
                        *x *= y;
                    }
                    let mut db = g;
                    for (x, y) in db.data.iter_mut().zip(&self.value(*a).data) {
                        *x *= y;
                    }
                    accumulate(&mut grads, a.idx as usize, da);
                    accumulate(&mut grads, b.idx as usize, db);
                }
                Op::Scale(a, c) => {
                    let mut da = g;
                    for x in da.data.iter_mut() {
                        *x *= c;
                    }
                    accumulate(&mut grads, a.idx as usize, da);
                }
                Op::Gather(table, ids) => {
                    let (v, d) = self.value(*table).shape();
                    let mut dt = Tensor::zeros(v, d);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, g.row_slice(r), &mut dt.data[id as usize * d..(id as usize + 1) * d]);
                    }
                    accumulate(&mut grads, table.idx as usize, dt);
                }
                Op::RowShift(x, by) => {
                    let (m, n) = g.shape();
                    let mut dx = Tensor::zeros(m, n);
                    for i in *by..m {
                        dx.data[(i - by) * n..(i - by + 1) * n].copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = g.shape();
                    let mut dx = Tensor::zeros(m, n);
                    let mut dgain = Tensor::zeros(1, n);
                    let mut dbias = Tensor::zeros(1, n);
                    let gd = &self.value(*gain).data;
                    for i in 0..m {
                        let mean = node.aux[2 * i];
                        let rstd = node.aux[2 * i + 1];
                        let xrow = self.value(*x).row_slice(i);
                        let grow = g.row_slice(i);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dxhat = grow[j] * gd[j];
                            dgain.data[j] += grow[j] * xhat;
                            dbias.data[j] += grow[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (xrow[j] - mean) * rstd;
                            let dxhat = grow[j] * gd[j];
                            dx.data[i * n + j] =
                                rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                    accumulate(&mut grads, gain.idx as usize, dgain);
                    accumulate(&mut grads, bias.idx as usize, dbias);
                }
                Op::Gelu(x) => {
                    let mut dx = g;
                    for (d, v) in dx.data.iter_mut().zip(&self.value(*x).data) {
                        *d *= gelu_bwd(*v);
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, v) in dx.data.iter_mut().zip(&self.value(*x).data) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::SoftmaxRows(x) => {
                    let p = &node.value;
                    let (m, n) = p.shape();
                    let mut dx = Tensor::zeros(m, n);
                    for i in 0..m {
                        let prow = p.row_slice(i);
                        let grow = g.row_slice(i);
                        let dotp: f64 = dot(prow, grow);
                        for j in 0..n {
                            dx.data[i * n + j] = prow[j] * (grow[j] - dotp);
                        }
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::LogSoftmaxRows(x) => {
                    let ls = &node.value;
                    let (m, n) = ls.shape();
                    let mut dx = Tensor::zeros(m, n);
                    for i in 0..m {
                        let grow = g.row_slice(i);
                        let gsum: f64 = grow.iter().sum();
                        let lrow = ls.row_slice(i);
                        for j in 0..n {
                            dx.data[i * n + j] = grow[j] - lrow[j].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::Attention { q, k, v, n_heads } => {
                    let (t, d) = g.shape();
                    let dh = d / n_heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(t, d);
                    let mut dk = Tensor::zeros(t, d);
                    let mut dv = Tensor::zeros(t, d);
                    for h in 0..*n_heads {
                        let off = h * dh;
                        let probs = &node.aux[h * t * t..(h + 1) * t * t];
                        for i in 0..t {
                            let grow = &g.row_slice(i)[off..off + dh];
                            let prow = &probs[i * t..i * t + i + 1];
                            // dV[j] += p_ij * g_i ; dP_ij = g_i . V_j
                            let mut dp = vec![0.0; i + 1];
                            for j in 0..=i {
                                let vvj = &self.value(*v).row_slice(j)[off..off + dh];
                                dp[j] = dot(grow, vvj);
                                axpy(prow[j], grow, &mut dv.data[j * d + off..j * d + off + dh]);
                            }
                            // softmax backward on the causal row
                            let dotp: f64 = dp
                                .iter()
                                .zip(prow)
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dotp) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &self.value(*k).row_slice(j)[off..off + dh];
                                axpy(ds, kj, &mut dq.data[i * d + off..i * d + off + dh]);
                                let qi = &self.value(*q).row_slice(i)[off..off + dh];
                                axpy(ds, qi, &mut dk.data[j * d + off..j * d + off + dh]);
                            }
                        }
                    }
                    accumulate(&mut grads, q.idx as usize, dq);
                    accumulate(&mut grads, k.idx as usize, dk);
                    accumulate(&mut grads, v.idx as usize, dv);
                }
                Op::RowRange(x, start, _end) => {
                    let (m, n) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(m, n);
                    dx.data[start * n..start * n + g.len()].copy_from_slice(&g.data);
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::Select(x, indices) => {
                    let (m, n) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(m, n);
                    for (i, &(r, c)) in indices.iter().enumerate() {
                        dx.data[r as usize * n + c as usize] += g.data[i];
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::SumAll(x) => {
                    let (m, n) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(m, n);
                    dx.data.fill(g.data[0]);
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::MinElem(a, b) => {
                    let av = &self.value(*a).data;
                    let bv = &self.value(*b).data;
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    let mut db = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            da.data[i] = g.data[i];
                        } else {
                            db.data[i] = g.data[i];
                        }
                    }
                    accumulate(&mut grads, a.idx as usize, da);
                    accumulate(&mut grads, b.idx as usize, db);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = &self.value(*x).data;
                    let mut dx = g;
                    for (d, v) in dx.data.iter_mut().zip(xv) {
                        if *v < *lo || *v > *hi {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::Exp(x) => {
                    let mut dx = g;
                    for (d, o) in dx.data.iter_mut().zip(&node.value.data) {
                        *d *= o;
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
                Op::ScatterClassAdd {
                    scores, classes, ..
                } => {
                    let m = self.value(*scores).rows;
                    let mut ds = Tensor::zeros(m, 1);
                    for (i, cls) in classes.iter().enumerate() {
                        if let Some(c) = cls {
                            ds.data[i] = g.data[*c as usize];
                        }
                    }
                    accumulate(&mut grads, scores.idx as usize, ds);
                }
                Op::MeanRows(x) => {
                    let (m, n) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(m, n);
                    for i in 0..m {
                        axpy(1.0 / m as f64, &g.data, &mut dx.data[i * n..(i + 1) * n]);
                    }
                    accumulate(&mut grads, x.idx as usize, dx);
                }
            }
        }
        Ok(param_grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `build` over each given parameter.
    fn fd_check<F>(params: Vec<Tensor>, build: F, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = params
            .iter()
            .enumerate()
            .map(|(k, t)| g.param(k, t.clone()))
            .collect();
        let loss = build(&mut g, &leaves);
        let grads = g.backward(loss, params.len()).unwrap();

        let h = 1e-4;
        for (k, p) in params.iter().enumerate() {
            let analytic = grads[k]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(p.rows, p.cols));
            for e in 0..p.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let leaves2: Vec<NodeId> = params
                        .iter()
                        .enumerate()
                        .map(|(k2, t)| {
                            let mut t = t.clone();
                            if k2 == k {
                                t.data[e] += delta;
                            }
                            g2.param(k2, t)
                        })
                        .collect();
                    let l = build(&mut g2, &leaves2);
                    g2.scalar_value(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data[e];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (a - fd).abs() / denom <= tol,
                    "param {k} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn fd_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randt(&mut rng, 3, 4);
        let b = randt(&mut rng, 4, 5);
        let c = randt(&mut rng, 3, 5);
        fd_check(
            vec![a, b, c],
            |g, p| {
                let ab = g.matmul(p[0], p[1]);
                let s = g.mul(ab, p[2]);
                g.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn fd_matmul_nt_gather_addrow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = randt(&mut rng, 6, 4);
        let w = randt(&mut rng, 4, 4);
        let bias = randt(&mut rng, 1, 4);
        fd_check(
            vec![emb, w, bias],
            |g, p| {
                let x = g.gather(p[0], &[1, 3, 5, 0]);
                let h = g.matmul(x, p[1]);
                let h = g.add_row(h, p[2]);
                let logits = g.matmul_nt(h, p[0]); // tied projection
                let ls = g.log_softmax_rows(logits);
                let picked = g.select(ls, &[(0, 1), (1, 2), (2, 0), (3, 5)]);
                let s = g.sum_all(picked);
                g.scale(s, -0.25)
            },
            1e-5,
        );
    }

    #[test]
    fn fd_layer_norm_gelu_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&mut rng, 4, 6);
        let gain = randt(&mut rng, 1, 6);
        let bias = randt(&mut rng, 1, 6);
        fd_check(
            vec![x, gain, bias],
            |g, p| {
                let n = g.layer_norm(p[0], p[1], p[2]);
                let ge = g.gelu(n);
                let re = g.relu(ge);
                g.mean_all(re)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = randt(&mut rng, 5, 8);
        let k = randt(&mut rng, 5, 8);
        let v = randt(&mut rng, 5, 8);
        let w = randt(&mut rng, 8, 3);
        fd_check(
            vec![q, k, v, w],
            |g, p| {
                let a = g.attention(p[0], p[1], p[2], 2);
                let h = g.matmul(a, p[3]);
                g.mean_all(h)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_softmax_exp_clamp_min_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randt(&mut rng, 4, 3);
        let y = randt(&mut rng, 4, 3);
        let s = randt(&mut rng, 5, 1);
        fd_check(
            vec![x, y, s],
            |g, p| {
                let sm = g.softmax_rows(p[0]);
                let e = g.exp(p[1]);
                let m = g.min_elem(sm, e);
                let c = g.clamp(m, 0.1, 0.9);
                let l1 = g.mean_all(c);
                let sc = g.scatter_class_add(p[2], &[Some(0), None, Some(2), Some(0), Some(1)], 4);
                let shifted = g.row_shift(p[2], 2);
                let l2 = g.mean_all(sc);
                let l3 = g.mean_all(shifted);
                let t = g.add(l1, l2);
                g.add(t, l3)
            },
            1e-4,
        );
    }

    #[test]
    fn fd_mean_rows_rowrange() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randt(&mut rng, 6, 4);
        let w = randt(&mut rng, 4, 2);
        fd_check(
            vec![x, w],
            |g, p| {
                let mid = g.row_range(p[0], 2, 5);
                let pooled = g.mean_rows(mid);
                let out = g.matmul(pooled, p[1]);
                g.sum_all(out)
            },
            1e-5,
        );
    }

    #[test]
    fn zero_loss_gives_zero_grads() {
        let mut g = Graph::new();
        let p = g.param(0, Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let z = g.scale(p, 0.0);
        let loss = g.sum_all(z);
        let grads = g.backward(loss, 1).unwrap();
        assert!(grads[0].as_ref().unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let t = Tensor::from_vec(2, 2, vec![0.5, -0.25, 1.5, 2.0]);
        let build = |combined: bool| {
            let mut g = Graph::new();
            let p = g.param(0, t.clone());
            let sq = g.mul(p, p);
            let l1 = g.mean_all(sq);
            let e = g.exp(p);
            let l2 = g.mean_all(e);
            let loss = if combined { g.add(l1, l2) } else { l1 };
            let gr = g.backward(loss, 1).unwrap();
            let l2_only = if combined {
                None
            } else {
                let mut g2 = Graph::new();
                let p2 = g2.param(0, t.clone());
                let e2 = g2.exp(p2);
                let l = g2.mean_all(e2);
                Some(g2.backward(l, 1).unwrap())
            };
            (gr, l2_only)
        };
        let (combined, _) = build(true);
        let (g1, g2) = build(false);
        let g2 = g2.unwrap();
        for i in 0..4 {
            let sum = g1[0].as_ref().unwrap().data[i] + g2[0].as_ref().unwrap().data[i];
            let comb = combined[0].as_ref().unwrap().data[i];
            assert!((sum - comb).abs() < 1e-12);
        }
    }

    #[test]
    fn detached_or_nonscalar_loss_rejected() {
        let mut g1 = Graph::new();
        let p = g1.param(0, Tensor::scalar(1.0));
        let l = g1.scale(p, 2.0);
        let g2 = Graph::new();
        assert!(g2.backward(l, 1).is_err());
        let mut g3 = Graph::new();
        let x = g3.input(Tensor::zeros(2, 2));
        assert!(g3.backward(x, 0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randt(&mut rng, 8, 13);
        let mut g = Graph::new();
        let xin = g.input(x);
        let sm = g.softmax_rows(xin);
        for i in 0..8 {
            let s: f64 = g.value(sm).row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
