//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of a forward pass. Each node stores
//! its value; [`Graph::gradients`] walks the tape backwards once and returns
//! the gradient of a scalar node with respect to every parameter leaf.
//!
//! Every [`Op`] variant is matched exhaustively in the backward pass, so an
//! operation without a gradient rule does not compile.

use crate::engine::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Elementwise functions with their derivative rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Neg,
    Exp,
    Sqrt,
    Square,
    Recip,
    Sigmoid,
    /// `arcosh(max(x, 1))`; the derivative is 0 where the clamp is active.
    Arcosh,
    /// `cosh(sqrt(q))`, smooth in `q` including `q = 0`.
    CoshSqrt,
    /// `sinh(sqrt(q)) / sqrt(q)`, smooth in `q` including `q = 0`.
    SinhcSqrt,
}

/// Below this argument the `*Sqrt` functions switch to their power series.
pub const SQRT_SERIES_THRESHOLD: f64 = 1e-4;

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Neg => "neg",
            Unary::Exp => "exp",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Recip => "recip",
            Unary::Sigmoid => "sigmoid",
            Unary::Arcosh => "arcosh",
            Unary::CoshSqrt => "cosh_sqrt",
            Unary::SinhcSqrt => "sinhc_sqrt",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Arcosh => x.max(1.0).acosh(),
            Unary::CoshSqrt => cosh_sqrt(x),
            Unary::SinhcSqrt => sinhc_sqrt(x),
        }
    }

    /// Derivative at input `x` with output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Arcosh => {
                if x <= 1.0 {
                    0.0
                } else {
                    1.0 / (x * x - 1.0).sqrt()
                }
            }
            Unary::CoshSqrt => 0.5 * sinhc_sqrt(x),
            Unary::SinhcSqrt => sinhc_sqrt_derivative(x),
        }
    }
}

fn cosh_sqrt(q: f64) -> f64 {
    if q < SQRT_SERIES_THRESHOLD {
        let q = q.max(0.0);
        1.0 + q / 2.0 + q * q / 24.0 + q * q * q / 720.0
    } else {
        q.sqrt().cosh()
    }
}

fn sinhc_sqrt(q: f64) -> f64 {
    if q < SQRT_SERIES_THRESHOLD {
        let q = q.max(0.0);
        1.0 + q / 6.0 + q * q / 120.0 + q * q * q / 5040.0
    } else {
        let s = q.sqrt();
        s.sinh() / s
    }
}

fn sinhc_sqrt_derivative(q: f64) -> f64 {
    if q < SQRT_SERIES_THRESHOLD {
        let q = q.max(0.0);
        1.0 / 6.0 + q / 60.0 + q * q / 2520.0 + q * q * q / 181_440.0
    } else {
        let s = q.sqrt();
        (s * s.cosh() - s.sinh()) / (2.0 * s * s * s)
    }
}

/// Pairwise score used by windowed attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// `<q,k>_L`.
    Lorentz,
    /// `-||q-k||^2`.
    NegSqDist,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Unary(NodeId, Unary),
    SumCols(NodeId),
    Mean(NodeId),
    GroupMax { src: NodeId, argmax: Vec<usize> },
    GroupMean { src: NodeId, group: usize },
    SliceCols { src: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { src: NodeId, index: Vec<usize> },
    Minkowski(NodeId, NodeId),
    WindowScores { q: NodeId, k: NodeId, window: usize, kind: ScoreKind },
    WindowMix { weights: NodeId, values: NodeId, window: usize },
    SoftmaxRows(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Unary(_, u) => u.name(),
            Op::SumCols(_) => "sum_cols",
            Op::Mean(_) => "mean",
            Op::GroupMax { .. } => "group_max",
            Op::GroupMean { .. } => "group_mean",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Minkowski(..) => "minkowski",
            Op::WindowScores { .. } => "window_scores",
            Op::WindowMix { .. } => "window_mix",
            Op::SoftmaxRows(_) => "softmax_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar with respect to the parameters it depends on.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Mat)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.entries.iter().map(|(p, g)| (*p, g))
    }

    /// Adds `other` into `self`, merging parameters present in either.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.entries {
            match self.entries.iter_mut().find(|(p, _)| p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => self.entries.push((*id, g.clone())),
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in &mut self.entries {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
    non_finite: Option<String>,
}

fn broadcast_ok(lhs: (usize, usize), rhs: (usize, usize)) -> bool {
    (rhs.0 == 1 || rhs.0 == lhs.0) && (rhs.1 == 1 || rhs.1 == lhs.1)
}

/// Sum `g` down to `shape` along broadcast axes.
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for r in 0..g.rows() {
        let orow = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let ocol = if shape.1 == 1 { 0 } else { c };
            let v = out.get(orow, ocol) + g.get(r, c);
            out.set(orow, ocol, v);
        }
    }
    out
}

fn broadcast_zip(a: &Mat, b: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    let (rows, cols) = a.shape();
    let mut out = Mat::zeros(rows, cols);
    for r in 0..rows {
        let br = if b.rows() == 1 { 0 } else { r };
        for c in 0..cols {
            let bc = if b.cols() == 1 { 0 } else { c };
            out.set(r, c, f(a.get(r, c), b.get(br, bc)));
        }
    }
    out
}

#[inline]
fn signed(c: usize) -> f64 {
    if c == 0 {
        -1.0
    } else {
        1.0
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Fails with the first operation that produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFiniteGradient { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(format!("{} (forward)", op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.input(Mat::scalar(value))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some((_, node)) = self.params.iter().find(|(p, _)| *p == id) {
            return *node;
        }
        let p = store.get(id);
        let node = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            broadcast_ok(sa, sb),
            "{}: cannot broadcast {sb:?} onto {sa:?}",
            op.name()
        );
        let v = broadcast_zip(self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, op, rg)
    }

    /// `a + b`, with `b` broadcast over rows and/or columns of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn unary(&mut self, a: NodeId, f: Unary) -> NodeId {
        let v = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(v, Op::Unary(a, f), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Relu)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Neg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Exp)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Recip)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn arcosh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Unary::Arcosh)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let v = Mat::from_vec(
            src.rows(),
            1,
            (0..src.rows()).map(|r| src.row(r).iter().sum()).collect(),
        );
        let rg = self.rg(a);
        self.push(v, Op::SumCols(a), rg)
    }

    /// Mean of all entries as a 1x1 node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let v = Mat::scalar(src.data().iter().sum::<f64>() / src.len() as f64);
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Column-wise maximum over consecutive groups of `group` rows.
    pub fn group_max(&mut self, a: NodeId, group: usize) -> NodeId {
        let src = self.value(a);
        assert!(group > 0 && src.rows() % group == 0, "group_max: {} rows, group {group}", src.rows());
        let (groups, cols) = (src.rows() / group, src.cols());
        let mut out = Mat::zeros(groups, cols);
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best = g * group;
                let mut best_v = src.get(best, c);
                for r in g * group + 1..(g + 1) * group {
                    let v = src.get(r, c);
                    if v > best_v {
                        best = r;
                        best_v = v;
                    }
                }
                out.set(g, c, best_v);
                argmax[g * cols + c] = best;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMax { src: a, argmax }, rg)
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, a: NodeId, group: usize) -> NodeId {
        let src = self.value(a);
        assert!(group > 0 && src.rows() % group == 0, "group_mean: {} rows, group {group}", src.rows());
        let (groups, cols) = (src.rows() / group, src.cols());
        let mut out = Mat::zeros(groups, cols);
        for g in 0..groups {
            let orow = out.row_mut(g);
            for r in g * group..(g + 1) * group {
                for (o, v) in orow.iter_mut().zip(src.row(r)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o /= group as f64);
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMean { src: a, group }, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(src.rows(), len);
        for r in 0..src.rows() {
            out.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { src: a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let src = self.value(a);
        let mut out = Mat::zeros(index.len(), src.cols());
        for (o, &i) in index.iter().enumerate() {
            out.row_mut(o).copy_from_slice(src.row(i));
        }
        let rg = self.rg(a);
        self.push(out, Op::GatherRows { src: a, index }, rg)
    }

    /// Row-wise Lorentzian scalar product: `n x m, n x m -> n x 1`.
    pub fn minkowski(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "minkowski shape mismatch");
        let v = Mat::from_vec(
            va.rows(),
            1,
            (0..va.rows())
                .map(|r| crate::geometry::minkowski_dot(va.row(r), vb.row(r)))
                .collect(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Minkowski(a, b), rg)
    }

    /// Pairwise scores within consecutive windows of `window` rows:
    /// `(W*t) x d, (W*t) x d -> (W*t) x t`.
    pub fn window_scores(&mut self, q: NodeId, k: NodeId, window: usize, kind: ScoreKind) -> NodeId {
        let (vq, vk) = (self.value(q), self.value(k));
        assert_eq!(vq.shape(), vk.shape(), "window_scores shape mismatch");
        assert!(window > 0 && vq.rows() % window == 0);
        let mut out = Mat::zeros(vq.rows(), window);
        for w in 0..vq.rows() / window {
            for i in 0..window {
                let qi = vq.row(w * window + i);
                for j in 0..window {
                    let kj = vk.row(w * window + j);
                    let s = match kind {
                        ScoreKind::Lorentz => crate::geometry::minkowski_dot(qi, kj),
                        ScoreKind::NegSqDist => {
                            -qi.iter().zip(kj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                        }
                    };
                    out.set(w * window + i, j, s);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        self.push(out, Op::WindowScores { q, k, window, kind }, rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut out = src.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Weighted combination within windows:
    /// `out[w*t+i] = sum_j weights[w*t+i, j] * values[w*t+j]`.
    pub fn window_mix(&mut self, weights: NodeId, values: NodeId, window: usize) -> NodeId {
        let (a, v) = (self.value(weights), self.value(values));
        assert_eq!(a.rows(), v.rows(), "window_mix row mismatch");
        assert_eq!(a.cols(), window, "window_mix weight width");
        let mut out = Mat::zeros(v.rows(), v.cols());
        for w in 0..v.rows() / window {
            for i in 0..window {
                let row = w * window + i;
                for j in 0..window {
                    let aij = a.get(row, j);
                    let vj = v.row(w * window + j);
                    for (o, x) in out.row_mut(row).iter_mut().zip(vj) {
                        *o += aij * x;
                    }
                }
            }
        }
        let rg = self.rg(weights) || self.rg(values);
        self.push(out, Op::WindowMix { weights, values, window }, rg)
    }

    /// Reverse pass from the 1x1 node `loss`.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        assert_eq!(self.shape(loss), (1, 1), "gradients() needs a scalar loss");
        self.check_finite()?;
        let mut grads: Vec<Option<Mat>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient {
                    op: format!("{} (backward)", node.op.name()),
                });
            }
            let send = |grads: &mut Vec<Option<Mat>>, to: NodeId, contrib: Mat| {
                if !self.nodes[to.0].requires_grad {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => out.entries.push((*pid, g)),
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        send(&mut grads, *a, g.matmul_bt(self.value(*b)));
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, self.value(*a).matmul_at(&g));
                    }
                }
                Op::Add(a, b) => {
                    let sb = self.shape(*b);
                    if self.rg(*b) {
                        send(&mut grads, *b, reduce_to(&g, sb));
                    }
                    send(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let sb = self.shape(*b);
                    if self.rg(*b) {
                        send(&mut grads, *b, reduce_to(&g.map(|x| -x), sb));
                    }
                    send(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        send(&mut grads, *a, broadcast_zip(&g, vb, |x, y| x * y));
                    }
                    if self.rg(*b) {
                        let full = Mat::from_vec(
                            g.rows(),
                            g.cols(),
                            g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                        );
                        send(&mut grads, *b, reduce_to(&full, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let vb = self.value(*b);
                    if self.rg(*a) {
                        send(&mut grads, *a, broadcast_zip(&g, vb, |x, y| x / y));
                    }
                    if self.rg(*b) {
                        // d(a/b)/db = -out/b
                        let q = broadcast_zip(&node.value, vb, |o, y| -o / y);
                        let full = Mat::from_vec(
                            g.rows(),
                            g.cols(),
                            g.data().iter().zip(q.data()).map(|(x, y)| x * y).collect(),
                        );
                        send(&mut grads, *b, reduce_to(&full, vb.shape()));
                    }
                }
                Op::Scale(a, c) => send(&mut grads, *a, g.map(|x| x * c)),
                Op::AddConst(a) => send(&mut grads, *a, g),
                Op::Unary(a, f) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(node.value.data())
                        .map(|((gi, xi), yi)| gi * f.derivative(*xi, *yi))
                        .collect();
                    send(&mut grads, *a, Mat::from_vec(g.rows(), g.cols(), data));
                }
                Op::SumCols(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|v| *v = gr);
                    }
                    send(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    send(&mut grads, *a, Mat::filled(rows, cols, g.item() / (rows * cols) as f64));
                }
                Op::GroupMax { src, argmax } => {
                    let (rows, cols) = self.shape(*src);
                    let mut d = Mat::zeros(rows, cols);
                    for (slot, &r) in argmax.iter().enumerate() {
                        let c = slot % cols;
                        let v = d.get(r, c) + g.data()[slot];
                        d.set(r, c, v);
                    }
                    send(&mut grads, *src, d);
                }
                Op::GroupMean { src, group } => {
                    let (rows, cols) = self.shape(*src);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r / group);
                        for (o, v) in d.row_mut(r).iter_mut().zip(gr) {
                            *o = v / *group as f64;
                        }
                    }
                    send(&mut grads, *src, d);
                }
                Op::SliceCols { src, start } => {
                    let (rows, cols) = self.shape(*src);
                    let mut d = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(&mut grads, *src, d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (rows, cols) = self.shape(*p);
                        if self.rg(*p) {
                            let mut d = Mat::zeros(rows, cols);
                            for r in 0..rows {
                                d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                            }
                            send(&mut grads, *p, d);
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows { src, index } => {
                    let (rows, cols) = self.shape(*src);
                    let mut d = Mat::zeros(rows, cols);
                    for (o, &i) in index.iter().enumerate() {
                        for (acc, v) in d.row_mut(i).iter_mut().zip(g.row(o)) {
                            *acc += v;
                        }
                    }
                    send(&mut grads, *src, d);
                }
                Op::Minkowski(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let jac = |other: &Mat| {
                        let mut d = Mat::zeros(other.rows(), other.cols());
                        for r in 0..other.rows() {
                            let gr = g.get(r, 0);
                            for (c, (o, v)) in d.row_mut(r).iter_mut().zip(other.row(r)).enumerate() {
                                *o = gr * signed(c) * v;
                            }
                        }
                        d
                    };
                    if self.rg(*a) {
                        send(&mut grads, *a, jac(vb));
                    }
                    if self.rg(*b) {
                        send(&mut grads, *b, jac(va));
                    }
                }
                Op::WindowScores { q, k, window, kind } => {
                    let (vq, vk) = (self.value(*q), self.value(*k));
                    let (rows, cols) = vq.shape();
                    let mut dq = Mat::zeros(rows, cols);
                    let mut dk = Mat::zeros(rows, cols);
                    for w in 0..rows / window {
                        for i in 0..*window {
                            let ri = w * window + i;
                            for j in 0..*window {
                                let rj = w * window + j;
                                let gij = g.get(ri, j);
                                if gij == 0.0 {
                                    continue;
                                }
                                for c in 0..cols {
                                    let (qv, kv) = (vq.get(ri, c), vk.get(rj, c));
                                    let (gq, gk) = match kind {
                                        ScoreKind::Lorentz => (signed(c) * kv, signed(c) * qv),
                                        ScoreKind::NegSqDist => {
                                            (-2.0 * (qv - kv), 2.0 * (qv - kv))
                                        }
                                    };
                                    dq.set(ri, c, dq.get(ri, c) + gij * gq);
                                    dk.set(rj, c, dk.get(rj, c) + gij * gk);
                                }
                            }
                        }
                    }
                    if self.rg(*q) {
                        send(&mut grads, *q, dq);
                    }
                    if self.rg(*k) {
                        send(&mut grads, *k, dk);
                    }
                }
                Op::WindowMix { weights, values, window } => {
                    let (a, v) = (self.value(*weights), self.value(*values));
                    let mut da = Mat::zeros(a.rows(), a.cols());
                    let mut dv = Mat::zeros(v.rows(), v.cols());
                    for w in 0..v.rows() / window {
                        for i in 0..*window {
                            let ri = w * window + i;
                            let gi = g.row(ri);
                            for j in 0..*window {
                                let rj = w * window + j;
                                let dot: f64 = gi.iter().zip(v.row(rj)).map(|(x, y)| x * y).sum();
                                da.set(ri, j, dot);
                                let aij = a.get(ri, j);
                                for (o, x) in dv.row_mut(rj).iter_mut().zip(gi) {
                                    *o += aij * x;
                                }
                            }
                        }
                    }
                    if self.rg(*weights) {
                        send(&mut grads, *weights, da);
                    }
                    if self.rg(*values) {
                        send(&mut grads, *values, dv);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yi * (gi - dot);
                        }
                    }
                    send(&mut grads, *a, d);
                }
            }
        }
        out.entries.sort_by_key(|(p, _)| *p);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::params::ParamStore;

    /// Central-difference gradient of `f` at `x`.
    fn numeric(f: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    /// Checks the gradient of `build(graph, x) -> scalar` against finite
    /// differences.
    fn check(x: Mat, tol: f64, build: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut store = ParamStore::new();
        let id = store.add("x", x.clone(), true, false);
        let eval = |v: &Mat| {
            let mut s = ParamStore::new();
            let i = s.add("x", v.clone(), true, false);
            let mut g = Graph::new();
            let n = g.param(&s, i);
            let out = build(&mut g, n);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let n = g.param(&store, id);
        let out = build(&mut g, n);
        let grads = g.gradients(out).unwrap();
        let analytic = grads.get(id).unwrap();
        let fd = numeric(eval, &x, 1e-6);
        for (a, b) in analytic.data().iter().zip(fd.data()) {
            let denom = a.abs().max(b.abs());
            assert!((a - b).abs() <= tol * denom + 1e-9, "analytic {a} vs fd {b}\n{analytic:?}\n{fd:?}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn quadratic_form_gradient() {
        // loss = <x,x>_L  =>  grad = (-2 x0, 2 x1, ...)
        let x = Mat::row_vector(&[1.5, -0.3, 0.7]);
        let mut store = ParamStore::new();
        let id = store.add("x", x.clone(), true, false);
        let mut g = Graph::new();
        let n = g.param(&store, id);
        let l = g.minkowski(n, n);
        let grads = g.gradients(l).unwrap();
        assert_eq!(grads.get(id).unwrap().data(), &[-3.0, -0.6, 1.4]);
    }

    #[test]
    fn matmul_and_broadcast_rules() {
        let w = sample(3, 4, 7);
        check(sample(5, 3, 1), 1e-7, |g, x| {
            let wn = g.input(w.clone());
            let y = g.matmul(x, wn);
            let b = g.input(Mat::row_vector(&[0.1, -0.2, 0.3, 0.4]));
            let y = g.add(y, b);
            let y = g.square(y);
            g.mean(y)
        });
        let a = sample(4, 3, 3);
        check(sample(1, 3, 2), 1e-7, |g, b| {
            let an = g.input(a.clone());
            let y = g.mul(an, b);
            let z = g.div(y, b);
            let z = g.sub(z, b);
            let z = g.mul(z, y);
            g.mean(z)
        });
        check(sample(4, 1, 5).map(|v| v + 2.0), 1e-7, |g, col| {
            let an = g.input(a.clone());
            let y = g.div(an, col);
            let y = g.sum_cols(y);
            let y = g.square(y);
            g.mean(y)
        });
    }

    #[test]
    fn unary_rules() {
        let x = sample(3, 3, 11).map(|v| v * 2.0);
        for f in [Unary::Relu, Unary::Neg, Unary::Exp, Unary::Square, Unary::Sigmoid] {
            check(x.clone(), 1e-6, |g, n| {
                let y = g.unary(n, f);
                let y = g.square(y);
                g.mean(y)
            });
        }
        let pos = x.map(|v| v.abs() + 0.5);
        for f in [Unary::Sqrt, Unary::Recip, Unary::CoshSqrt, Unary::SinhcSqrt] {
            check(pos.clone(), 1e-6, |g, n| {
                let y = g.unary(n, f);
                g.mean(y)
            });
        }
        let beyond = x.map(|v| v.abs() + 1.2);
        check(beyond, 1e-6, |g, n| {
            let y = g.arcosh(n);
            g.mean(y)
        });
    }

    #[test]
    fn series_branches_are_smooth() {
        for f in [Unary::CoshSqrt, Unary::SinhcSqrt] {
            let t = SQRT_SERIES_THRESHOLD;
            let below = f.apply(t * (1.0 - 1e-12));
            let above = f.apply(t * (1.0 + 1e-12));
            assert!((below - above).abs() < 1e-14, "{f:?}");
            let db = f.derivative(t * (1.0 - 1e-12), below);
            let da = f.derivative(t * (1.0 + 1e-12), above);
            assert!((db - da).abs() < 1e-10, "{f:?} {db} {da}");
        }
        assert_eq!(Unary::CoshSqrt.apply(0.0), 1.0);
        assert_eq!(Unary::SinhcSqrt.apply(0.0), 1.0);
        assert_eq!(Unary::SinhcSqrt.derivative(0.0, 1.0), 1.0 / 6.0);
    }

    #[test]
    fn arcosh_clamp_has_zero_gradient() {
        assert_eq!(Unary::Arcosh.apply(0.99), 0.0);
        assert_eq!(Unary::Arcosh.derivative(0.99, 0.0), 0.0);
        assert_eq!(Unary::Arcosh.derivative(1.0, 0.0), 0.0);
    }

    #[test]
    fn structural_rules() {
        check(sample(6, 4, 13), 1e-7, |g, x| {
            let m = g.group_max(x, 3);
            let mm = g.group_mean(x, 2);
            let s = g.slice_cols(x, 1, 2);
            let c = g.concat_cols(&[s, x]);
            let r = g.gather_rows(c, vec![0, 0, 5, 2]);
            let a = g.square(m);
            let b = g.square(mm);
            let d = g.square(r);
            let (a, b, d) = (g.mean(a), g.mean(b), g.mean(d));
            let ab = g.add(a, b);
            g.add(ab, d)
        });
    }

    #[test]
    fn attention_rules() {
        let k = sample(6, 4, 21);
        for kind in [ScoreKind::Lorentz, ScoreKind::NegSqDist] {
            check(sample(6, 4, 17), 1e-6, |g, q| {
                let kn = g.input(k.clone());
                let s = g.window_scores(q, kn, 3, kind);
                let a = g.softmax_rows(s);
                let o = g.window_mix(a, q, 3);
                let o = g.square(o);
                g.mean(o)
            });
            check(sample(6, 4, 19), 1e-6, |g, kk| {
                let qn = g.input(k.clone());
                let s = g.window_scores(qn, kk, 2, kind);
                let s = g.square(s);
                g.mean(s)
            });
        }
    }

    #[test]
    fn minkowski_rule() {
        let b = sample(3, 4, 31);
        check(sample(3, 4, 29), 1e-7, |g, a| {
            let bn = g.input(b.clone());
            let m = g.minkowski(a, bn);
            let mm = g.minkowski(a, a);
            let s = g.mul(m, mm);
            g.mean(s)
        });
    }

    #[test]
    fn unused_params_get_no_gradient_and_inputs_are_skipped() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::scalar(2.0), true, false);
        let b = store.add("b", Mat::scalar(3.0), true, false);
        let mut g = Graph::new();
        let na = g.param(&store, a);
        let _nb = g.param(&store, b);
        let l = g.square(na);
        let grads = g.gradients(l).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 4.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn non_finite_values_are_reported_with_the_op() {
        let mut store = ParamStore::new();
        let a = store.add("a", Mat::scalar(-1.0), true, false);
        let mut g = Graph::new();
        let na = g.param(&store, a);
        let s = g.sqrt(na);
        let err = g.gradients(s).unwrap_err();
        match err {
            Error::NonFiniteGradient { op } => assert!(op.starts_with("sqrt"), "{op}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
