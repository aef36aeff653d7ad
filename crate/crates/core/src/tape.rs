//! Reverse-mode automatic differentiation over batched matrices.
//!
//! Every node holds a dense row-major matrix. Rows are independent samples
//! (paths, time steps, scenarios) for all ops except the reductions, so one
//! recorded `MatMul` covers a whole batch of network evaluations. Nodes are
//! appended in creation order, which is a topological order; [`Tape::backward`]
//! walks them strictly in reverse.

use std::sync::Arc;

use crate::error::{DfpsError, Result};
use crate::linalg::{gemm, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + 1ᵀ bias`, bias is `1 x c`.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    /// Row `r` is multiplied on the right by `weights[r / group]`.
    GroupLinear(Var, Arc<Vec<Mat>>, usize),
    /// Row `r` is scaled by `s[r]`.
    RowScale(Var, Arc<Vec<f64>>),
    /// Output row `r` is input row `idx[r]`.
    GatherRows(Var, Arc<Vec<usize>>),
    /// Mean over consecutive blocks of `group` rows.
    SegmentMean(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `v`; `None` when `v` does not influence the output, was
    /// recorded as a constant, or is an interior node other than the output.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(rows, cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.adj.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (parameter or input whose adjoint is wanted).
    pub fn var(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "tape matmul shape mismatch");
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm(av, false, bv, false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), out, ng)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows, 1, "bias must be a row vector");
        assert_eq!(av.cols, bv.cols, "bias width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Op::AddBias(a, bias), out, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), out, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "tape mul shape mismatch");
        let out = av.zip_map(bv, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), out, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(crate::linalg::tanh);
        let ng = self.ng(a);
        self.push(Op::Tanh(a), out, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(Op::Square(a), out, ng)
    }

    /// Sum of all entries, a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Mat::scalar(s), ng)
    }

    /// Sum of entrywise products.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.square(a);
        self.sum(s)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for &p in parts {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.rows, rows, "concat_cols row mismatch");
                dst[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), out, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Op::SliceCols(a, start), out, ng)
    }

    pub fn group_linear(&mut self, a: Var, weights: Arc<Vec<Mat>>, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows == group * weights.len(), "group_linear row count");
        let out_cols = weights[0].cols;
        let mut out = Mat::zeros(av.rows, out_cols);
        for (g, w) in weights.iter().enumerate() {
            assert_eq!(w.rows, av.cols, "group_linear weight shape");
            for r in g * group..(g + 1) * group {
                let x = av.row(r);
                let o = &mut out.data[r * out_cols..(r + 1) * out_cols];
                for (k, xk) in x.iter().enumerate() {
                    if *xk != 0.0 {
                        for (oj, wkj) in o.iter_mut().zip(w.row(k)) {
                            *oj += xk * wkj;
                        }
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(Op::GroupLinear(a, weights, group), out, ng)
    }

    pub fn row_scale(&mut self, a: Var, s: Arc<Vec<f64>>) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows, s.len(), "row_scale length");
        let mut out = av.clone();
        for (r, sr) in s.iter().enumerate() {
            for o in out.row_mut(r) {
                *o *= sr;
            }
        }
        let ng = self.ng(a);
        self.push(Op::RowScale(a, s), out, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols);
        for (r, &src) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(src));
        }
        let ng = self.ng(a);
        self.push(Op::GatherRows(a, idx), out, ng)
    }

    pub fn segment_mean(&mut self, a: Var, group: usize) -> Var {
        let av = self.value(a);
        assert!(group > 0 && av.rows.is_multiple_of(group), "segment_mean group size");
        let segs = av.rows / group;
        let mut out = Mat::zeros(segs, av.cols);
        let inv = 1.0 / group as f64;
        for s in 0..segs {
            let o = out.row_mut(s);
            for r in s * group..(s + 1) * group {
                for (oj, x) in o.iter_mut().zip(av.row(r)) {
                    *oj += x;
                }
            }
            for oj in o.iter_mut() {
                *oj *= inv;
            }
        }
        let ng = self.ng(a);
        self.push(Op::SegmentMean(a, group), out, ng)
    }

    /// Reverse sweep from a scalar node. The output adjoint is seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(DfpsError::contract(format!("backward from non-scalar node of shape {out_shape:?}")));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Mat::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            // Interior adjoints are dropped once consumed; only leaves and the
            // output keep theirs.
            if i == output.0 {
                adj[i] = Some(g);
            }
        }
        // Constants never report an adjoint.
        for (i, a) in adj.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *a = None;
            }
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, node: &Node, g: &Mat, adj: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let slot = slot(adj, *a, av.rows, av.cols);
                    gemm(g, false, bv, true, slot, 1.0);
                }
                if self.ng(*b) {
                    let slot = slot(adj, *b, bv.rows, bv.cols);
                    gemm(av, true, g, false, slot, 1.0);
                }
            }
            Op::AddBias(a, bias) => {
                if self.ng(*a) {
                    accumulate(adj, *a, g);
                }
                if self.ng(*bias) {
                    let slot = slot(adj, *bias, 1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in slot.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(adj, *a, g);
                }
                if self.ng(*b) {
                    accumulate(adj, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    accumulate(adj, *a, g);
                }
                if self.ng(*b) {
                    let slot = slot(adj, *b, g.rows, g.cols);
                    slot.axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let slot = slot(adj, *a, g.rows, g.cols);
                    for ((s, gi), bi) in slot.data.iter_mut().zip(&g.data).zip(&bv.data) {
                        *s += gi * bi;
                    }
                }
                if self.ng(*b) {
                    let slot = slot(adj, *b, g.rows, g.cols);
                    for ((s, gi), ai) in slot.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *s += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                let slot = slot(adj, *a, g.rows, g.cols);
                slot.axpy(*s, g);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let slot = slot(adj, *a, g.rows, g.cols);
                for ((s, gi), yi) in slot.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *s += gi * (1.0 - yi * yi);
                }
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let slot = slot(adj, *a, g.rows, g.cols);
                for ((s, gi), ai) in slot.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *s += 2.0 * gi * ai;
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                let gs = g.data[0];
                let slot = slot(adj, *a, r, c);
                for s in &mut slot.data {
                    *s += gs;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.ng(*p) {
                        let slot = slot(adj, *p, r, c);
                        for row in 0..r {
                            for (s, x) in slot.row_mut(row).iter_mut().zip(&g.row(row)[off..off + c]) {
                                *s += x;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let slot = slot(adj, *a, r, c);
                for row in 0..r {
                    for (s, x) in slot.row_mut(row)[*start..*start + g.cols].iter_mut().zip(g.row(row)) {
                        *s += x;
                    }
                }
            }
            Op::GroupLinear(a, weights, group) => {
                let (r, c) = self.shape(*a);
                let slot = slot(adj, *a, r, c);
                for (gi, w) in weights.iter().enumerate() {
                    for row in gi * group..(gi + 1) * group {
                        let grow = g.row(row);
                        let s = slot.row_mut(row);
                        for (k, sk) in s.iter_mut().enumerate() {
                            *sk += w.row(k).iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::RowScale(a, sc) => {
                let (r, c) = self.shape(*a);
                let slot = slot(adj, *a, r, c);
                for (row, s) in sc.iter().enumerate() {
                    for (d, x) in slot.row_mut(row).iter_mut().zip(g.row(row)) {
                        *d += s * x;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let slot = slot(adj, *a, r, c);
                for (row, &src) in idx.iter().enumerate() {
                    for (d, x) in slot.row_mut(src).iter_mut().zip(g.row(row)) {
                        *d += x;
                    }
                }
            }
            Op::SegmentMean(a, group) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / *group as f64;
                let slot = slot(adj, *a, r, c);
                for row in 0..r {
                    let seg = row / group;
                    for (d, x) in slot.row_mut(row).iter_mut().zip(g.row(seg)) {
                        *d += inv * x;
                    }
                }
            }
        }
    }
}

fn slot(adj: &mut [Option<Mat>], v: Var, rows: usize, cols: usize) -> &mut Mat {
    adj[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut adj[v.0] {
        Some(m) => m.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}
