//! Recorded-operation reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive appends a
//! node holding its value; [`Graph::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into the parents that require them.

use std::collections::HashMap;
use std::ops::Range;

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{config_err, Result};

/// Norm floor applied before dividing by a vector length.
pub const NORM_CLAMP: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    RowNormalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    MeanRows(Var),
    Gather { x: Var, index: Vec<Option<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    SegmentMax { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics of one batch-normalization call, reported for running-average
/// updates by the owner of the parameters.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    degenerate_norms: usize,
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Vec<Var>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Total gradient of a parameter, summed across every leaf bound to it.
    pub fn param(&self, id: ParamId) -> Option<Tensor> {
        let vars = self.params.get(&id)?;
        let mut acc: Option<Tensor> = None;
        for &v in vars {
            if let Some(g) = self.of(v) {
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        acc
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

    /// Number of times a norm clamp fired during this graph's forward pass.
    pub fn degeneracy_warnings(&self) -> usize {
        self.degenerate_norms
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.shape().len(), 2, "graph values are rank 2");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = as_rank2(t);
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free input (not tied to a parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = as_rank2(t);
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Buffers are bound as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = as_rank2(store.get(id).clone());
        let trainable = store.is_trainable(id);
        let v = self.push(t, Op::Leaf, trainable);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::matrix(ta.rows(), ta.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a + row` with `row` (1 x c) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape2(a);
        assert_eq!(self.shape2(row), (1, c), "add_row extents");
        let (ta, tr) = (self.value(a).data(), self.value(row).data());
        let data = (0..r * c).map(|i| ta[i] + tr[i % c]).collect();
        let rg = self.rg(&[a, row]);
        self.push(Tensor::matrix(r, c, data), Op::AddRow(a, row), rg)
    }

    /// `a * row` with `row` (1 x c) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape2(a);
        assert_eq!(self.shape2(row), (1, c), "mul_row extents");
        let (ta, tr) = (self.value(a).data(), self.value(row).data());
        let data = (0..r * c).map(|i| ta[i] * tr[i % c]).collect();
        let rg = self.rg(&[a, row]);
        self.push(Tensor::matrix(r, c, data), Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Ln(a), rg)
    }

    /// Softmax along `axis` (0: down columns, 1: along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_values(self.value(a), axis, false)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_values(self.value(a), axis, true)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a, axis), rg))
    }

    /// Scale each row to unit ℓ2 norm, flooring the norm at [`NORM_CLAMP`].
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        let mut clamped = 0;
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let n = if n < NORM_CLAMP {
                clamped += 1;
                NORM_CLAMP
            } else {
                n
            };
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        self.degenerate_norms += clamped;
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, data), Op::RowNormalize { x: a, norms }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Column-wise mean over rows, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape2(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), rg)
    }

    /// Select rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let (r, c) = self.shape2(a);
        let x = self.value(a).data();
        let mut data = vec![0.0; index.len() * c];
        for (o, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                assert!(i < r, "gather index {i} out of {r} rows");
                data[o * c..(o + 1) * c].copy_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(&[a]);
        let out = Tensor::matrix(index.len(), c, data);
        self.push(out, Op::Gather { x: a, index }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape2(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), r, "concat_cols row mismatch");
                data.extend_from_slice(t.row_slice(i));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(r, total, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.shape2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), c, "concat_rows col mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Var {
        let (r, c) = self.shape2(a);
        assert!(cols.end <= c && cols.start < cols.end, "slice_cols range");
        let x = self.value(a);
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[cols.clone()]);
        }
        let rg = self.rg(&[a]);
        let out = Tensor::matrix(r, cols.len(), data);
        self.push(out, Op::SliceCols(a, cols.start), rg)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Var {
        let (r, c) = self.shape2(a);
        assert!(rows.end <= r && rows.start < rows.end, "slice_rows range");
        let data = self.value(a).data()[rows.start * c..rows.end * c].to_vec();
        let rg = self.rg(&[a]);
        let out = Tensor::matrix(rows.len(), c, data);
        self.push(out, Op::SliceRows(a, rows.start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshaped(&[rows, cols])
            .expect("reshape element count");
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Element-wise max over each row range, one output row per segment.
    pub fn segment_max(&mut self, a: Var, segments: &[Range<usize>]) -> Var {
        let (r, c) = self.shape2(a);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for seg in segments {
            assert!(seg.start < seg.end && seg.end <= r, "empty or invalid segment");
            for j in 0..c {
                let mut best = seg.start;
                for i in seg.clone() {
                    if x[i * c + j] > x[best * c + j] {
                        best = i;
                    }
                }
                data.push(x[best * c + j]);
                argmax.push(best);
            }
        }
        let rg = self.rg(&[a]);
        let out = Tensor::matrix(segments.len(), c, data);
        self.push(out, Op::SegmentMax { x: a, argmax }, rg)
    }

    /// Normalize each column by its batch mean and population variance.
    pub fn batch_norm(&mut self, a: Var, eps: f64) -> (Var, BatchStats) {
        let (r, c) = self.shape2(a);
        let x = self.value(a).data();
        let n = r as f64;
        let mut mean = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                mean[j] += x[i * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                let d = x[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = (0..r * c)
            .map(|i| (x[i] - mean[i % c]) * inv_std[i % c])
            .collect();
        let rg = self.rg(&[a]);
        let out = self.push(Tensor::matrix(r, c, data), Op::BatchNorm { x: a, inv_std }, rg);
        (out, BatchStats { mean, var })
    }

    /// Cosine similarity of two row vectors as a `1 x 1` node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        let na = self.row_normalize(a);
        let nb = self.row_normalize(b);
        let prod = self.mul(na, nb);
        self.sum(prod)
    }

    /// Pairwise cosine similarities between the rows of `a` and of `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Var {
        let na = self.row_normalize(a);
        let nb = self.row_normalize(b);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: HashMap<ParamId, Vec<Var>> = HashMap::new();
        for &(v, id) in &self.params {
            params.entry(id).or_default().push(v);
        }
        Gradients {
            nodes: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let (r, c) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let da = self.slot(grads, *a);
                    gemm(r, c, k, g, (c, 1), tb.data(), (1, c), da, 1.0);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let db = self.slot(grads, *b);
                    gemm(k, r, c, ta.data(), (1, k), g, (c, 1), db, 1.0);
                }
            }
            Op::Transpose(a) => {
                let da = self.slot(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(g, y)| g * y));
                self.accumulate(grads, *b, g.iter().zip(ta).map(|(g, x)| g * x));
            }
            Op::Div(a, b) => {
                let tb = self.value(*b).data();
                self.accumulate(grads, *a, g.iter().zip(tb).map(|(g, d)| g / d));
                self.accumulate(
                    grads,
                    *b,
                    g.iter().zip(y).zip(tb).map(|((g, q), d)| -g * q / d),
                );
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.iter().copied());
                self.accumulate(grads, *row, column_sums(g, r, c).into_iter());
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a).data(), self.value(*row).data());
                self.accumulate(grads, *a, (0..r * c).map(|i| g[i] * tr[i % c]));
                let prod: Vec<f64> = (0..r * c).map(|i| g[i] * ta[i]).collect();
                self.accumulate(grads, *row, column_sums(&prod, r, c).into_iter());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                );
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y)),
            Op::Ln(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(g, x)| g / x));
            }
            Op::Softmax(a, axis) => {
                // dx = y * (g - <g, y>) along the axis
                let mut dx = vec![0.0; r * c];
                for_each_lane(r, c, *axis, |lane| {
                    let dot: f64 = lane.clone().map(|i| g[i] * y[i]).sum();
                    for i in lane {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                });
                self.accumulate(grads, *a, dx.into_iter());
            }
            Op::LogSoftmax(a, axis) => {
                // dx = g - softmax * sum(g) along the axis
                let mut dx = vec![0.0; r * c];
                for_each_lane(r, c, *axis, |lane| {
                    let total: f64 = lane.clone().map(|i| g[i]).sum();
                    for i in lane {
                        dx[i] = g[i] - y[i].exp() * total;
                    }
                });
                self.accumulate(grads, *a, dx.into_iter());
            }
            Op::RowNormalize { x, norms } => {
                let mut dx = vec![0.0; r * c];
                let xv = self.value(*x).data();
                for i in 0..r {
                    let lane = i * c..(i + 1) * c;
                    let n = norms[i];
                    let raw = xv[lane.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw < NORM_CLAMP {
                        for j in lane {
                            dx[j] = g[j] / n;
                        }
                    } else {
                        let dot: f64 = lane.clone().map(|j| g[j] * y[j]).sum();
                        for j in lane {
                            dx[j] = (g[j] - y[j] * dot) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, dx.into_iter());
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, std::iter::repeat(g[0]).take(len));
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let inv = 1.0 / rows as f64;
                self.accumulate(grads, *a, (0..rows * c).map(|i| g[i % c] * inv));
            }
            Op::Gather { x, index } => {
                let dx = self.slot(grads, *x);
                for (o, idx) in index.iter().enumerate() {
                    if let Some(i) = *idx {
                        for j in 0..c {
                            dx[i * c + j] += g[o * c + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let dp = self.slot(grads, p);
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g[i * c + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let w = self.value(*a).cols();
                let da = self.slot(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * w + start + j] += g[i * c + j];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let da = self.slot(grads, *a);
                for (d, v) in da[start * c..].iter_mut().zip(g) {
                    *d += v;
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.iter().copied()),
            Op::SegmentMax { x, argmax } => {
                let dx = self.slot(grads, *x);
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src * c + o % c] += g[o];
                }
            }
            Op::BatchNorm { x, inv_std } => {
                // dx = inv_std / n * (n g - sum(g) - x_hat * sum(g x_hat))
                let n = r as f64;
                let mut sg = vec![0.0; c];
                let mut sgx = vec![0.0; c];
                for i in 0..r * c {
                    sg[i % c] += g[i];
                    sgx[i % c] += g[i] * y[i];
                }
                self.accumulate(
                    grads,
                    *x,
                    (0..r * c).map(|i| {
                        let j = i % c;
                        inv_std[j] / n * (n * g[i] - sg[j] - y[i] * sgx[j])
                    }),
                );
            }
        }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut [f64] {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        values: impl Iterator<Item = f64>,
    ) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (s, d) in slot.iter_mut().zip(values) {
            *s += d;
        }
    }
}

fn as_rank2(t: Tensor) -> Tensor {
    match t.shape().len() {
        2 => t,
        1 => {
            let n = t.len();
            t.reshaped(&[1, n]).expect("rank-1 to row")
        }
        _ => {
            let lead = t.shape()[0];
            let rest = t.len() / lead;
            t.reshaped(&[lead, rest]).expect("flatten trailing extents")
        }
    }
}

fn column_sums(g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            out[j] += g[i * c + j];
        }
    }
    out
}

/// Visit every lane (row for axis 1, column for axis 0) as an index iterator.
fn for_each_lane(
    r: usize,
    c: usize,
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<Range<usize>>),
) {
    if axis == 1 {
        for i in 0..r {
            f((i * c..(i + 1) * c).step_by(1));
        }
    } else {
        for j in 0..c {
            f((j..r * c).step_by(c));
        }
    }
}

fn softmax_values(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis > 1 {
        return Err(config_err!("softmax axis {axis} invalid for a rank-2 tensor"));
    }
    let (r, c) = (t.rows(), t.cols());
    let x = t.data();
    let mut out = vec![0.0; r * c];
    for_each_lane(r, c, axis, |lane| {
        let max = lane.clone().map(|i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = lane.clone().map(|i| (x[i] - max).exp()).sum();
        let log_total = total.ln();
        for i in lane {
            out[i] = if log {
                x[i] - max - log_total
            } else {
                (x[i] - max).exp() / total
            };
        }
    });
    Ok(Tensor::matrix(r, c, out))
}
