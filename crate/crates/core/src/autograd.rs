//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so a single
//! reverse sweep from the loss visits each node after all of its consumers.
//! Nodes whose inputs are all constants are never differentiated.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    RowScale { x: Var, weights: Vec<f64> },
    RowScaleVar { x: Var, weights: Var },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Softmax(Var),
    MaskedLogSoftmax { x: Var, mask: Vec<bool>, probs: Tensor },
    Gelu(Var),
    Sigmoid(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SoftDice { pred: Var, target: Vec<f64>, eps: f64 },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    retain_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf: gradients are computed and retained.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A constant input: never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
            retain_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Make an intermediate node a differentiation target: its gradient is
    /// kept after [`Graph::backward`] and nodes built on it become
    /// differentiable. Must be called before any consumer is created.
    pub fn track(&mut self, v: Var) {
        let node = &mut self.nodes[v.0];
        node.requires_grad = true;
        node.retain_grad = true;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            retain_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Tensor::zeros(av.rows(), bv.cols());
        gemm(av, false, bv, false, &mut out, 0.0);
        self.push(out, Op::MatMul { a, b, transpose_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        gemm(av, false, bv, true, &mut out, 0.0);
        self.push(out, Op::MatMul { a, b, transpose_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o -= y;
        }
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// `x + 1·row`, broadcasting a `1 × c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        let mut out = self.nodes[x.0].value.clone();
        assert_eq!(r.cols(), out.cols(), "add_row width mismatch");
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// Elementwise product with a `1 × c` row broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = &self.nodes[row.0].value;
        let mut out = self.nodes[x.0].value.clone();
        assert_eq!(r.cols(), out.cols(), "mul_row width mismatch");
        for i in 0..out.rows() {
            for (o, &g) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= g;
            }
        }
        self.push(out, Op::MulRow(x, row), &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[a.0].value.clone();
        assert_eq!(out.shape(), bv.shape(), "mul shape mismatch");
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o *= y;
        }
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        assert_eq!(out.shape(), c.shape(), "mul_const shape mismatch");
        for (o, &y) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= y;
        }
        self.push(out, Op::MulConst(x, c), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Multiply row `i` of `x` by the constant `weights[i]`.
    pub fn row_scale(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let mut out = self.nodes[x.0].value.clone();
        assert_eq!(weights.len(), out.rows(), "row_scale length mismatch");
        for (i, &w) in weights.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        self.push(out, Op::RowScale { x, weights }, &[x])
    }

    /// Multiply row `i` of `x` by entry `i` of the `rows × 1` node `weights`.
    pub fn row_scale_var(&mut self, x: Var, weights: Var) -> Var {
        let w = &self.nodes[weights.0].value;
        let mut out = self.nodes[x.0].value.clone();
        assert_eq!(w.shape(), (out.rows(), 1), "row_scale_var shape mismatch");
        for i in 0..out.rows() {
            let wi = w.data()[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= wi);
        }
        self.push(out, Op::RowScaleVar { x, weights }, &[x, weights])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / math::sqrt(var + LN_EPS);
            for (o, &v) in out.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Row-wise `x_ij − log Σ_{k ∈ mask_i} exp(x_ik)` for every column `j`,
    /// where `mask` selects the columns that enter each row's normalizer.
    /// Rows with an empty mask are normalized over nothing and yield `+inf`
    /// offsets; callers must not create them.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Vec<bool>) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.shape();
        assert_eq!(mask.len(), rows * cols, "mask shape mismatch");
        let mut out = xv.clone();
        let mut probs = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let m = &mask[i * cols..(i + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if m[j] {
                    let e = math::exp(v - max);
                    probs.set(i, j, e);
                    z += e;
                }
            }
            let lse = max + math::ln(z);
            for j in 0..cols {
                if m[j] {
                    probs.set(i, j, probs.get(i, j) / z);
                }
                out.set(i, j, row[j] - lse);
            }
        }
        self.push(out, Op::MaskedLogSoftmax { x, mask, probs }, &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| {
            let u = GELU_C * (v + GELU_K * v * v * v);
            0.5 * v * (1.0 + math::tanh(u))
        });
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(math::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Scale each row to unit Euclidean norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = math::norm(xv.row(i));
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            out.row_mut(i).iter_mut().for_each(|v| *v *= inv);
            norms.push(n);
        }
        self.push(out, Op::RowNormalize { x, norms }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.nodes[parts[0].0].value.cols();
        let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data).expect("concat_rows shape");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows();
        let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let cols = xv.cols();
        let data = xv.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(len, cols, data).expect("slice_rows shape");
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Build a `rows × cols` tensor whose flat entry `k` is the flat entry
    /// `index[k]` of `x`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let xv = self.nodes[x.0].value.data();
        let data = index.iter().map(|&k| xv[k]).collect();
        let out = Tensor::from_vec(rows, cols, data).expect("gather shape");
        self.push(out, Op::Gather { x, index }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.nodes[x.0].value.sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(x), &[x])
    }

    /// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)` against a constant target.
    pub fn soft_dice(&mut self, pred: Var, target: Vec<f64>, eps: f64) -> Var {
        let p = self.nodes[pred.0].value.data();
        assert_eq!(p.len(), target.len(), "soft_dice length mismatch");
        let (inter, denom) = dice_terms(p, &target, eps);
        let out = Tensor::scalar(1.0 - (2.0 * inter + eps) / denom);
        self.push(out, Op::SoftDice { pred, target, eps }, &[pred])
    }

    /// `Σ w_k · x_k` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut out = Tensor::zeros(
            self.nodes[terms[0].0 .0].value.rows(),
            self.nodes[terms[0].0 .0].value.cols(),
        );
        for &(v, w) in terms {
            for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[v.0].value.data()) {
                *o += w * x;
            }
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(out, Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// Reverse sweep from the scalar `root`. Gradients of parameters and
    /// tracked nodes are kept; intermediate gradients are released.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return;
        }
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        let mut pending: Vec<(Var, Tensor)> = Vec::new();
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = if self.nodes[i].retain_grad {
                match &self.nodes[i].grad {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match self.nodes[i].grad.take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.local_grads(i, &g, &mut pending);
            for (p, contrib) in pending.drain(..) {
                let node = &mut self.nodes[p.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&contrib),
                    None => node.grad = Some(contrib),
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor, out: &mut Vec<(Var, Tensor)>) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    // y = a·b → ga = g·bᵀ ; y = a·bᵀ → ga = g·b
                    gemm(g, false, bv, !transpose_b, &mut ga, 0.0);
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *transpose_b {
                        gemm(g, true, av, false, &mut gb, 0.0);
                    } else {
                        gemm(av, true, g, false, &mut gb, 0.0);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    out.push((*x, g.clone()));
                }
                if self.needs(*row) {
                    out.push((*row, column_sums(g)));
                }
            }
            Op::MulRow(x, row) => {
                let (xv, rv) = (self.value(*x), self.value(*row));
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        for (o, &s) in gx.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= s;
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*row) {
                    let mut gr = Tensor::zeros(1, rv.cols());
                    for r in 0..g.rows() {
                        for ((o, &gv), &xv) in gr.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *o += gv * xv;
                        }
                    }
                    out.push((*row, gr));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, hadamard(g, self.value(*b))));
                }
                if self.needs(*b) {
                    out.push((*b, hadamard(g, self.value(*a))));
                }
            }
            Op::MulConst(x, c) => out.push((*x, hadamard(g, c))),
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * s))),
            Op::RowScale { x, weights } => {
                let mut gx = g.clone();
                for (r, &w) in weights.iter().enumerate() {
                    gx.row_mut(r).iter_mut().for_each(|v| *v *= w);
                }
                out.push((*x, gx));
            }
            Op::RowScaleVar { x, weights } => {
                let wv = self.value(*weights);
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let w = wv.data()[r];
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= w);
                    }
                    out.push((*x, gx));
                }
                if self.needs(*weights) {
                    let xv = self.value(*x);
                    let gw = (0..g.rows()).map(|r| math::dot(g.row(r), xv.row(r))).collect();
                    out.push((*weights, Tensor::column_vector(gw)));
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols() as f64;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mean_g = gr.iter().sum::<f64>() / cols;
                    let mean_gy = math::dot(gr, yr) / cols;
                    let inv = inv_std[r];
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                out.push((*x, gx));
            }
            Op::Softmax(x) => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s = math::dot(gr, yr);
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                out.push((*x, gx));
            }
            Op::MaskedLogSoftmax { x, mask, probs } => {
                let cols = y.cols();
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            let v = gx.get(r, c) - probs.get(r, c) * total;
                            gx.set(r, c, v);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                for (o, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                    let u = GELU_C * (v + GELU_K * v * v * v);
                    let t = math::tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    *o *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                }
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let mut gx = g.clone();
                for (o, &s) in gx.data_mut().iter_mut().zip(y.data()) {
                    *o *= s * (1.0 - s);
                }
                out.push((*x, gx));
            }
            Op::RowNormalize { x, norms } => {
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let (gr, yr) = (g.row(r), y.row(r));
                    let s = math::dot(gr, yr);
                    let inv = 1.0 / norms[r];
                    for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * s) * inv;
                    }
                }
                out.push((*x, gx));
            }
            Op::ConcatRows(parts) => {
                let cols = y.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.needs(*p) {
                        let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        out.push((*p, Tensor::from_vec(rows, cols, data).expect("shape")));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    if self.needs(*p) {
                        let mut gp = Tensor::zeros(y.rows(), cols);
                        for r in 0..y.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        out.push((*p, gp));
                    }
                    offset += cols;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let cols = xv.cols();
                gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                out.push((*x, gx));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                out.push((*x, gx));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let d = gx.data_mut();
                for (&k, &gv) in index.iter().zip(g.data()) {
                    d[k] += gv;
                }
                out.push((*x, gx));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                out.push((*x, Tensor::filled(xv.rows(), xv.cols(), g.item())));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.item() / xv.len() as f64;
                out.push((*x, Tensor::filled(xv.rows(), xv.cols(), v)));
            }
            Op::SoftDice { pred, target, eps } => {
                let pv = self.value(*pred);
                let (inter, denom) = dice_terms(pv.data(), target, *eps);
                let num = 2.0 * inter + eps;
                let scale = g.item() / (denom * denom);
                let data = target.iter().map(|&t| -scale * (2.0 * t * denom - num)).collect();
                out.push((*pred, Tensor::from_vec(pv.rows(), pv.cols(), data).expect("shape")));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        out.push((v, g.map(|x| x * w)));
                    }
                }
            }
        }
    }
}

fn dice_terms(p: &[f64], t: &[f64], eps: f64) -> (f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
    (inter, total + eps)
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
