//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A `Graph` is a tape: nodes are appended in topological order and the
//! backward pass walks the tape in exact reverse insertion order,
//! accumulating gradients additively. Whitening is a composite node whose
//! backward pass is the analytic closed form (see `whitening_backward`),
//! not a differentiation through the factorization.

use std::collections::HashMap;
use std::time::Instant;

use thiserror::Error;

use crate::linalg::{self, Matrix, WhiteningStats};
use crate::scalar::Scalar;
use crate::slicing::{self, Sliceplan};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("node {node}: shape mismatch, expected {expected}, got {actual}")]
    ShapeMismatch { node: usize, expected: String, actual: String },
    #[error("input `{name}` not bound")]
    UnboundInput { name: String },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("backward requires a scalar (1x1) output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("batch_standardize in eval mode without running statistics")]
    MissingRunningStats,
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Slicing(#[from] slicing::SlicingError),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub type NodeId = usize;

/// Per-column running statistics for batch standardization.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Parameter { name: String },
    Input { name: String },
    Constant,
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    BatchStandardize {
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
        eps: f64,
        momentum: f64,
        buffer: Option<String>,
        running: Option<RunningStats>,
    },
    L2NormalizeRows { x: NodeId },
    Whitening { x: NodeId, plan: Sliceplan, ridge: f64 },
    MseMean { a: NodeId, b: NodeId },
    ScaleAdd { a: NodeId, b: NodeId, alpha: T, beta: T },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { x: NodeId, indices: Vec<usize> },
    SumAll { x: NodeId },
    Conv2d {
        x: NodeId,
        w: NodeId,
        in_hw: (usize, usize),
        in_channels: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool { x: NodeId, hw: (usize, usize) },
}

/// Saved forward context a backward pass needs.
#[derive(Debug, Clone)]
enum Ctx<T> {
    BatchStd { inv_std: Vec<f64>, xhat: Matrix<T> },
    Whitening { groups: Vec<(Vec<usize>, WhiteningStats)> },
    Softmax { probs: Matrix<T> },
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub op: Op<T>,
    pub value: Option<Matrix<T>>,
    pub grad: Option<Matrix<T>>,
    ctx: Option<Ctx<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct NodeTiming {
    pub forward_ns: u64,
    pub backward_ns: u64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    output: Option<NodeId>,
    /// Train-mode batch statistics vs eval-mode running statistics.
    pub train_mode: bool,
    forward_done: bool,
    /// Updated running statistics collected during a train-mode forward,
    /// keyed by buffer name; the owner of the buffers applies them.
    pub bn_updates: HashMap<String, RunningStats>,
    timings: Vec<NodeTiming>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            output: None,
            train_mode: true,
            forward_done: false,
            bn_updates: HashMap::new(),
            timings: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        self.nodes.push(Node { op, value: None, grad: None, ctx: None });
        self.timings.push(NodeTiming::default());
        self.nodes.len() - 1
    }

    pub fn parameter(&mut self, name: &str, value: Matrix<T>) -> NodeId {
        let id = self.push(Op::Parameter { name: name.to_string() });
        self.nodes[id].value = Some(value);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input { name: name.to_string() })
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        let id = self.push(Op::Constant);
        self.nodes[id].value = Some(value);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, transpose_b: false })
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul { a, b, transpose_b: true })
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias { x, bias })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu { x })
    }

    /// Standardize columns to zero mean, unit variance (eps-adjusted), with
    /// optional learnable per-column scale/shift and optional running-stats
    /// buffer for eval mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_standardize(
        &mut self,
        x: NodeId,
        scale: Option<NodeId>,
        shift: Option<NodeId>,
        eps: f64,
        momentum: f64,
        buffer: Option<String>,
        running: Option<RunningStats>,
    ) -> NodeId {
        self.push(Op::BatchStandardize { x, scale, shift, eps, momentum, buffer, running })
    }

    /// Plain standardization with the default eps and no affine pair.
    pub fn batch_standardize_plain(&mut self, x: NodeId) -> NodeId {
        self.batch_standardize(x, None, None, 1e-5, 0.9, None, None)
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        self.push(Op::L2NormalizeRows { x })
    }

    pub fn whitening(&mut self, x: NodeId, plan: Sliceplan, ridge: f64) -> NodeId {
        self.push(Op::Whitening { x, plan, ridge })
    }

    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MseMean { a, b })
    }

    pub fn scale_add(&mut self, a: NodeId, b: NodeId, alpha: T, beta: T) -> NodeId {
        self.push(Op::ScaleAdd { a, b, alpha, beta })
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy { logits, targets })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatRows { a, b })
    }

    pub fn slice_rows(&mut self, x: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::SliceRows { x, indices })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumAll { x })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        in_hw: (usize, usize),
        in_channels: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        self.push(Op::Conv2d { x, w, in_hw, in_channels, ksize, stride, pad })
    }

    pub fn global_avg_pool(&mut self, x: NodeId, hw: (usize, usize)) -> NodeId {
        self.push(Op::GlobalAvgPool { x, hw })
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output_id(&self) -> Option<NodeId> {
        self.output.or_else(|| self.nodes.len().checked_sub(1))
    }

    pub fn value(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.nodes[id].value.as_ref()
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn set_param_value(&mut self, name: &str, value: Matrix<T>) {
        let id = self.param_id(name).expect("unknown parameter");
        self.nodes[id].value = Some(value);
    }

    /// Total time spent in whitening nodes (forward + backward).
    pub fn whitening_ns(&self) -> u64 {
        self.nodes
            .iter()
            .zip(&self.timings)
            .filter(|(n, _)| matches!(n.op, Op::Whitening { .. }))
            .map(|(_, t)| t.forward_ns + t.backward_ns)
            .sum()
    }

    fn shape_err(&self, node: NodeId, expected: String, actual: String) -> AutodiffError {
        AutodiffError::ShapeMismatch { node, expected, actual }
    }

    /// Evaluate every node in insertion order; returns the output value.
    pub fn forward_eval(&mut self, bindings: &HashMap<String, Matrix<T>>) -> Result<Matrix<T>> {
        self.bn_updates.clear();
        for id in 0..self.nodes.len() {
            let t0 = Instant::now();
            let value = self.eval_node(id, bindings)?;
            self.timings[id].forward_ns = t0.elapsed().as_nanos() as u64;
            if let Some(v) = value {
                self.nodes[id].value = Some(v);
            }
        }
        self.forward_done = true;
        let out = self.output_id().expect("empty graph");
        Ok(self.nodes[out].value.clone().expect("output value"))
    }

    fn val(&self, id: NodeId) -> &Matrix<T> {
        self.nodes[id].value.as_ref().expect("value populated by forward order")
    }

    fn eval_node(
        &mut self,
        id: NodeId,
        bindings: &HashMap<String, Matrix<T>>,
    ) -> Result<Option<Matrix<T>>> {
        let op = self.nodes[id].op.clone();
        let v = match op {
            Op::Parameter { .. } | Op::Constant => None,
            Op::Input { name } => Some(
                bindings
                    .get(&name)
                    .cloned()
                    .ok_or(AutodiffError::UnboundInput { name })?,
            ),
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(a), self.val(b));
                let inner_ok =
                    if transpose_b { av.cols() == bv.cols() } else { av.cols() == bv.rows() };
                if !inner_ok {
                    return Err(self.shape_err(
                        id,
                        format!("inner dims for matmul(transpose_b={transpose_b})"),
                        format!("{:?} x {:?}", av.shape(), bv.shape()),
                    ));
                }
                Some(if transpose_b { av.matmul_transpose_b(bv) } else { av.matmul(bv) })
            }
            Op::AddBias { x, bias } => {
                let (xv, bv) = (self.val(x), self.val(bias));
                if bv.rows() != 1 || bv.cols() != xv.cols() {
                    return Err(self.shape_err(
                        id,
                        format!("1x{} bias", xv.cols()),
                        format!("{:?}", bv.shape()),
                    ));
                }
                let mut out = xv.clone();
                for i in 0..out.rows() {
                    for (o, &b) in out.row_mut(i).iter_mut().zip(bv.row(0)) {
                        *o = *o + b;
                    }
                }
                Some(out)
            }
            Op::Relu { x } => Some(self.val(x).map(|v| if v > T::zero() { v } else { T::zero() })),
            Op::BatchStandardize { x, scale, shift, eps, momentum, buffer, running } => {
                let xv = self.val(x).clone();
                let (rows, cols) = xv.shape();
                let (mean, var) = if self.train_mode {
                    let mut mean = vec![0.0f64; cols];
                    let mut var = vec![0.0f64; cols];
                    for i in 0..rows {
                        for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                            *m += v.cast_f64();
                        }
                    }
                    for m in &mut mean {
                        *m /= rows as f64;
                    }
                    for i in 0..rows {
                        for j in 0..cols {
                            let d = xv[(i, j)].cast_f64() - mean[j];
                            var[j] += d * d;
                        }
                    }
                    for v in &mut var {
                        *v /= rows as f64;
                    }
                    if let Some(name) = &buffer {
                        let (old_mean, old_var) = match &running {
                            Some(rs) => (rs.mean.clone(), rs.var.clone()),
                            None => (vec![0.0; cols], vec![1.0; cols]),
                        };
                        let mix = |old: &[f64], new: &[f64]| {
                            old.iter()
                                .zip(new)
                                .map(|(&o, &n)| momentum * o + (1.0 - momentum) * n)
                                .collect::<Vec<_>>()
                        };
                        self.bn_updates.insert(
                            name.clone(),
                            RunningStats { mean: mix(&old_mean, &mean), var: mix(&old_var, &var) },
                        );
                    }
                    (mean, var)
                } else {
                    let rs = running.as_ref().ok_or(AutodiffError::MissingRunningStats)?;
                    (rs.mean.clone(), rs.var.clone())
                };
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    for j in 0..cols {
                        xhat[(i, j)] =
                            T::cast_from((xv[(i, j)].cast_f64() - mean[j]) * inv_std[j]);
                    }
                }
                let mut out = xhat.clone();
                if let Some(s) = scale {
                    let sv = self.val(s).clone();
                    for i in 0..rows {
                        for (o, &g) in out.row_mut(i).iter_mut().zip(sv.row(0)) {
                            *o = *o * g;
                        }
                    }
                }
                if let Some(s) = shift {
                    let sv = self.val(s).clone();
                    for i in 0..rows {
                        for (o, &b) in out.row_mut(i).iter_mut().zip(sv.row(0)) {
                            *o = *o + b;
                        }
                    }
                }
                self.nodes[id].ctx = Some(Ctx::BatchStd { inv_std, xhat });
                Some(out)
            }
            Op::L2NormalizeRows { x } => {
                let xv = self.val(x);
                let mut out = xv.clone();
                for i in 0..out.rows() {
                    let norm = xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                    for o in out.row_mut(i) {
                        *o = *o / norm;
                    }
                }
                Some(out)
            }
            Op::Whitening { x, plan, ridge } => {
                let xv = self.val(x);
                let (z, groups) = slicing::whiten_sliced_with_stats(xv, &plan, ridge)?;
                self.nodes[id].ctx = Some(Ctx::Whitening { groups });
                Some(z)
            }
            Op::MseMean { a, b } => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.shape() != bv.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("{:?}", av.shape()),
                        format!("{:?}", bv.shape()),
                    ));
                }
                let mut acc = T::zero();
                for (&x, &y) in av.data().iter().zip(bv.data()) {
                    let d = x - y;
                    acc = acc + d * d;
                }
                let loss = acc * T::cast_from(1.0 / av.rows() as f64);
                Some(Matrix::from_vec(1, 1, vec![loss]))
            }
            Op::ScaleAdd { a, b, alpha, beta } => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.shape() != bv.shape() {
                    return Err(self.shape_err(
                        id,
                        format!("{:?}", av.shape()),
                        format!("{:?}", bv.shape()),
                    ));
                }
                Some(av.zip_map(bv, |x, y| alpha * x + beta * y))
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let lv = self.val(logits);
                let rows = lv.rows();
                assert_eq!(targets.len(), rows, "one target per row");
                let mut probs = lv.clone();
                let mut loss = 0.0f64;
                for i in 0..rows {
                    let row = probs.row_mut(i);
                    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut denom = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        denom = denom + *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / denom;
                    }
                    loss -= row[targets[i]].cast_f64().max(1e-300).ln();
                }
                loss /= rows as f64;
                self.nodes[id].ctx = Some(Ctx::Softmax { probs });
                Some(Matrix::from_vec(1, 1, vec![T::cast_from(loss)]))
            }
            Op::ConcatRows { a, b } => {
                let (av, bv) = (self.val(a), self.val(b));
                if av.cols() != bv.cols() {
                    return Err(self.shape_err(
                        id,
                        format!("cols {}", av.cols()),
                        format!("cols {}", bv.cols()),
                    ));
                }
                let mut data = av.data().to_vec();
                data.extend_from_slice(bv.data());
                Some(Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data))
            }
            Op::SliceRows { x, indices } => {
                let xv = self.val(x);
                let mut out = Matrix::zeros(indices.len(), xv.cols());
                for (dst, &src) in indices.iter().enumerate() {
                    out.row_mut(dst).copy_from_slice(xv.row(src));
                }
                Some(out)
            }
            Op::SumAll { x } => {
                let total: T = self.val(x).data().iter().copied().sum();
                Some(Matrix::from_vec(1, 1, vec![total]))
            }
            Op::Conv2d { x, w, in_hw, in_channels, ksize, stride, pad } => {
                let xv = self.val(x);
                let wv = self.val(w);
                let (h, wid) = in_hw;
                let batch = xv.rows() / (h * wid);
                let out_channels = wv.cols();
                let (ho, wo) = conv_out_hw(in_hw, ksize, stride, pad);
                let mut out = Matrix::zeros(batch * ho * wo, out_channels);
                for n in 0..batch {
                    let col = im2col(xv, n, in_hw, in_channels, ksize, stride, pad);
                    let y = col.matmul(wv);
                    for r in 0..ho * wo {
                        out.row_mut(n * ho * wo + r).copy_from_slice(y.row(r));
                    }
                }
                Some(out)
            }
            Op::GlobalAvgPool { x, hw } => {
                let xv = self.val(x);
                let spatial = hw.0 * hw.1;
                let batch = xv.rows() / spatial;
                let cols = xv.cols();
                let inv = T::cast_from(1.0 / spatial as f64);
                let mut out = Matrix::zeros(batch, cols);
                for n in 0..batch {
                    for s in 0..spatial {
                        let row = xv.row(n * spatial + s);
                        for (o, &v) in out.row_mut(n).iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    for o in out.row_mut(n) {
                        *o = *o * inv;
                    }
                }
                Some(out)
            }
        };
        Ok(v)
    }

    /// Reverse-mode sweep; returns gradients for every parameter node.
    pub fn backward(&mut self) -> Result<HashMap<String, Matrix<T>>> {
        if !self.forward_done {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let out = self.output_id().expect("empty graph");
        {
            let shape = self.val(out).shape();
            if shape != (1, 1) {
                return Err(AutodiffError::NonScalarOutput { rows: shape.0, cols: shape.1 });
            }
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out].grad = Some(Matrix::from_vec(1, 1, vec![T::one()]));
        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let t0 = Instant::now();
            self.backprop_node(id)?;
            self.timings[id].backward_ns = t0.elapsed().as_nanos() as u64;
        }
        let mut grads = HashMap::new();
        for (name, id) in &self.params {
            let g = match &self.nodes[*id].grad {
                Some(g) => g.clone(),
                None => {
                    let shape = self.val(*id).shape();
                    Matrix::zeros(shape.0, shape.1)
                }
            };
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    fn accumulate(&mut self, id: NodeId, delta: Matrix<T>) {
        match &mut self.nodes[id].grad {
            Some(g) => *g = g.add(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&mut self, id: NodeId) -> Result<()> {
        let g = self.nodes[id].grad.clone().expect("grad present");
        let op = self.nodes[id].op.clone();
        match op {
            Op::Parameter { .. } | Op::Input { .. } | Op::Constant => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(a).clone(), self.val(b).clone());
                if transpose_b {
                    // y = a b^T
                    self.accumulate(a, g.matmul(&bv));
                    self.accumulate(b, g.transpose().matmul(&av));
                } else {
                    self.accumulate(a, g.matmul_transpose_b(&bv));
                    self.accumulate(b, av.transpose().matmul(&g));
                }
            }
            Op::AddBias { x, bias } => {
                let mut db = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o = *o + v;
                    }
                }
                self.accumulate(x, g);
                self.accumulate(bias, db);
            }
            Op::Relu { x } => {
                let xv = self.val(x).clone();
                self.accumulate(x, g.zip_map(&xv, |gv, v| if v > T::zero() { gv } else { T::zero() }));
            }
            Op::BatchStandardize { x, scale, shift, .. } => {
                let Some(Ctx::BatchStd { inv_std, xhat }) = self.nodes[id].ctx.clone() else {
                    unreachable!("BatchStd ctx saved in forward")
                };
                let (rows, cols) = xhat.shape();
                // Affine backward first.
                let mut g_hat = g.clone();
                if let Some(s) = scale {
                    let sv = self.val(s).clone();
                    let mut dscale = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dscale[(0, j)] = dscale[(0, j)] + g[(i, j)] * xhat[(i, j)];
                            g_hat[(i, j)] = g[(i, j)] * sv[(0, j)];
                        }
                    }
                    self.accumulate(s, dscale);
                }
                if let Some(s) = shift {
                    let mut dshift = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dshift[(0, j)] = dshift[(0, j)] + g[(i, j)];
                        }
                    }
                    self.accumulate(s, dshift);
                }
                let mut dx = Matrix::zeros(rows, cols);
                if self.train_mode {
                    // Standard batch-norm backward with biased variance.
                    for j in 0..cols {
                        let mut mean_g = 0.0f64;
                        let mut mean_gx = 0.0f64;
                        for i in 0..rows {
                            mean_g += g_hat[(i, j)].cast_f64();
                            mean_gx += g_hat[(i, j)].cast_f64() * xhat[(i, j)].cast_f64();
                        }
                        mean_g /= rows as f64;
                        mean_gx /= rows as f64;
                        for i in 0..rows {
                            let v = (g_hat[(i, j)].cast_f64()
                                - mean_g
                                - xhat[(i, j)].cast_f64() * mean_gx)
                                * inv_std[j];
                            dx[(i, j)] = T::cast_from(v);
                        }
                    }
                } else {
                    for j in 0..cols {
                        for i in 0..rows {
                            dx[(i, j)] = T::cast_from(g_hat[(i, j)].cast_f64() * inv_std[j]);
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::L2NormalizeRows { x } => {
                let xv = self.val(x).clone();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let norm = xv.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
                    let y: Vec<T> = xv.row(i).iter().map(|&v| v / norm).collect();
                    let dot: T = g.row(i).iter().zip(&y).map(|(&gv, &yv)| gv * yv).sum();
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = (g[(i, j)] - dot * y[j]) / norm;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Whitening { x, .. } => {
                let Some(Ctx::Whitening { groups }) = self.nodes[id].ctx.clone() else {
                    unreachable!("Whitening ctx saved in forward")
                };
                let xv = self.val(x).clone();
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (rows, stats) in &groups {
                    let sub_v = Matrix::from_rows(
                        &rows.iter().map(|&i| xv.row(i).to_vec()).collect::<Vec<_>>(),
                    );
                    let sub_g =
                        Matrix::from_rows(&rows.iter().map(|&i| g.row(i).to_vec()).collect::<Vec<_>>());
                    let dv = whitening_backward(&sub_g.cast(), &sub_v.cast(), stats)?;
                    for (local, &global) in rows.iter().enumerate() {
                        for j in 0..xv.cols() {
                            dx[(global, j)] = dx[(global, j)] + T::cast_from(dv[(local, j)]);
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::MseMean { a, b } => {
                let s = g[(0, 0)];
                let (av, bv) = (self.val(a).clone(), self.val(b).clone());
                let scale = T::cast_from(2.0 / av.rows() as f64) * s;
                let da = av.zip_map(&bv, |x, y| (x - y) * scale);
                let db = da.scale(-T::one());
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::ScaleAdd { a, b, alpha, beta } => {
                self.accumulate(a, g.scale(alpha));
                self.accumulate(b, g.scale(beta));
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let Some(Ctx::Softmax { probs }) = self.nodes[id].ctx.clone() else {
                    unreachable!("Softmax ctx saved in forward")
                };
                let s = g[(0, 0)];
                let scale = T::cast_from(1.0 / probs.rows() as f64) * s;
                let mut dl = probs;
                for (i, &t) in targets.iter().enumerate() {
                    dl[(i, t)] = dl[(i, t)] - T::one();
                }
                self.accumulate(logits, dl.scale(scale));
            }
            Op::ConcatRows { a, b } => {
                let a_rows = self.val(a).rows();
                let cols = g.cols();
                let ga = Matrix::from_vec(a_rows, cols, g.data()[..a_rows * cols].to_vec());
                let gb = Matrix::from_vec(g.rows() - a_rows, cols, g.data()[a_rows * cols..].to_vec());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::SliceRows { x, indices } => {
                let xv_shape = self.val(x).shape();
                let mut dx = Matrix::zeros(xv_shape.0, xv_shape.1);
                for (src, &dst) in indices.iter().enumerate() {
                    for j in 0..g.cols() {
                        dx[(dst, j)] = dx[(dst, j)] + g[(src, j)];
                    }
                }
                self.accumulate(x, dx);
            }
            Op::SumAll { x } => {
                let s = g[(0, 0)];
                let shape = self.val(x).shape();
                let mut dx = Matrix::zeros(shape.0, shape.1);
                for d in dx.data_mut() {
                    *d = s;
                }
                self.accumulate(x, dx);
            }
            Op::Conv2d { x, w, in_hw, in_channels, ksize, stride, pad } => {
                let xv = self.val(x).clone();
                let wv = self.val(w).clone();
                let (h, wid) = in_hw;
                let batch = xv.rows() / (h * wid);
                let (ho, wo) = conv_out_hw(in_hw, ksize, stride, pad);
                let mut dw = Matrix::zeros(wv.rows(), wv.cols());
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for n in 0..batch {
                    let col = im2col(&xv, n, in_hw, in_channels, ksize, stride, pad);
                    let g_n = Matrix::from_rows(
                        &(0..ho * wo).map(|r| g.row(n * ho * wo + r).to_vec()).collect::<Vec<_>>(),
                    );
                    dw = dw.add(&col.transpose().matmul(&g_n));
                    let dcol = g_n.matmul_transpose_b(&wv);
                    col2im_add(&mut dx, &dcol, n, in_hw, in_channels, ksize, stride, pad);
                }
                self.accumulate(x, dx);
                self.accumulate(w, dw);
            }
            Op::GlobalAvgPool { x, hw } => {
                let spatial = hw.0 * hw.1;
                let xv_shape = self.val(x).shape();
                let inv = T::cast_from(1.0 / spatial as f64);
                let mut dx = Matrix::zeros(xv_shape.0, xv_shape.1);
                let batch = xv_shape.0 / spatial;
                for n in 0..batch {
                    for s in 0..spatial {
                        for (d, &gv) in dx.row_mut(n * spatial + s).iter_mut().zip(g.row(n)) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(x, dx);
            }
        }
        Ok(())
    }
}

pub fn conv_out_hw(in_hw: (usize, usize), ksize: usize, stride: usize, pad: usize) -> (usize, usize) {
    (
        (in_hw.0 + 2 * pad - ksize) / stride + 1,
        (in_hw.1 + 2 * pad - ksize) / stride + 1,
    )
}

/// Patch matrix for one sample: (Ho*Wo) x (Cin*ksize*ksize). Input layout is
/// rows (n, y, x), columns = channels.
fn im2col<T: Scalar>(
    x: &Matrix<T>,
    n: usize,
    in_hw: (usize, usize),
    in_channels: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> Matrix<T> {
    let (h, w) = in_hw;
    let (ho, wo) = conv_out_hw(in_hw, ksize, stride, pad);
    let mut col = Matrix::zeros(ho * wo, in_channels * ksize * ksize);
    for oy in 0..ho {
        for ox in 0..wo {
            let r = oy * wo + ox;
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let src = x.row((n * h + iy as usize) * w + ix as usize);
                    for c in 0..in_channels {
                        col[(r, c * ksize * ksize + ky * ksize + kx)] = src[c];
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Scalar>(
    dx: &mut Matrix<T>,
    dcol: &Matrix<T>,
    n: usize,
    in_hw: (usize, usize),
    in_channels: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) {
    let (h, w) = in_hw;
    let (ho, wo) = conv_out_hw(in_hw, ksize, stride, pad);
    for oy in 0..ho {
        for ox in 0..wo {
            let r = oy * wo + ox;
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let dst_row = (n * h + iy as usize) * w + ix as usize;
                    for c in 0..in_channels {
                        let v = dcol[(r, c * ksize * ksize + ky * ksize + kx)];
                        dx[(dst_row, c)] = dx[(dst_row, c)] + v;
                    }
                }
            }
        }
    }
}

/// Analytic backward pass of the whitening transform.
///
/// `dl_dz` and `v` are row-major (samples as rows, M x k); `v` is the raw
/// (uncentered) sub-batch the forward whitened with `stats`. Internally the
/// computation runs in the samples-as-columns orientation; the gradient of
/// the mean subtraction is applied at the end. Returns dL/dV, M x k.
pub fn whitening_backward(
    dl_dz: &Matrix<f64>,
    v: &Matrix<f64>,
    stats: &WhiteningStats,
) -> Result<Matrix<f64>> {
    if dl_dz.shape() != v.shape() {
        return Err(AutodiffError::ShapeMismatch {
            node: 0,
            expected: format!("{:?}", v.shape()),
            actual: format!("{:?}", dl_dz.shape()),
        });
    }
    let (m, k) = v.shape();
    // Orientation switch: columns are samples from here on.
    let mut vc = Matrix::<f64>::zeros(k, m);
    for i in 0..m {
        for j in 0..k {
            vc[(j, i)] = v[(i, j)] - stats.mu[j];
        }
    }
    let gz = dl_dz.transpose();
    let w = &stats.w;
    // dL/dW = dL/dZ V^T
    let dw = gz.matmul_transpose_b(&vc);
    // P: 1 below the diagonal, 1/2 on it, 0 above.
    let t1 = dw.matmul(&w.transpose());
    let mut masked = Matrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..i {
            masked[(i, j)] = t1[(i, j)];
        }
        masked[(i, i)] = 0.5 * t1[(i, i)];
    }
    let sym = masked.add(&masked.transpose());
    let dsigma = w.transpose().matmul(&sym).matmul(w).scale(-0.5);
    let mut dv = dsigma.matmul(&vc).scale(2.0 / (m as f64 - 1.0));
    dv = dv.add(&w.transpose().matmul(&gz));
    // Mean-subtraction gradient: remove the per-feature column average.
    for a in 0..k {
        let mean: f64 = (0..m).map(|c| dv[(a, c)]).sum::<f64>() / m as f64;
        for c in 0..m {
            dv[(a, c)] -= mean;
        }
    }
    Ok(dv.transpose())
}

/// Worst-case relative error between analytic and central finite-difference
/// gradients over every parameter entry.
pub fn grad_check<T: Scalar>(
    graph: &mut Graph<T>,
    bindings: &HashMap<String, Matrix<T>>,
    eps: f64,
) -> Result<f64> {
    graph.forward_eval(bindings)?;
    let analytic = graph.backward()?;
    let names = graph.param_names();
    let mut worst = 0.0f64;
    for name in names {
        let id = graph.param_id(&name).unwrap();
        let base = graph.val(id).clone();
        let ga = &analytic[&name];
        for idx in 0..base.data().len() {
            let orig = base.data()[idx];
            let mut probe = |delta: f64| -> Result<f64> {
                let mut p = base.clone();
                p.data_mut()[idx] = orig + T::cast_from(delta);
                graph.nodes[id].value = Some(p);
                let out = graph.forward_eval(bindings)?;
                Ok(out[(0, 0)].cast_f64())
            };
            let plus = probe(eps)?;
            let minus = probe(-eps)?;
            graph.nodes[id].value = Some(base.clone());
            let fd = (plus - minus) / (2.0 * eps);
            let an = ga.data()[idx].cast_f64();
            // An entry whose gradient magnitude is below the probe step is
            // pure finite-difference noise; floor the denominator at eps.
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(eps).max(1e-8);
            worst = worst.max(rel);
        }
    }
    // Restore a consistent forward state.
    graph.forward_eval(bindings)?;
    graph.backward()?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::whiten_batch;
    use crate::slicing::{make_sliceplan, SliceplanConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    fn no_bindings() -> HashMap<String, Matrix<f64>> {
        HashMap::new()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.parameter("x", Matrix::from_rows(&[vec![-1.0, 2.0]]));
        g.relu(x);
        let out = g.forward_eval(&no_bindings()).unwrap();
        assert_eq!(out, Matrix::from_rows(&[vec![0.0, 2.0]]));
    }

    #[test]
    fn l2_normalize_345() {
        let mut g = Graph::new();
        let x = g.parameter("x", Matrix::from_rows(&[vec![3.0, 4.0]]));
        g.l2_normalize_rows(x);
        let out = g.forward_eval(&no_bindings()).unwrap();
        assert!(out.max_abs_diff(&Matrix::from_rows(&[vec![0.6, 0.8]])) <= 1e-12);
    }

    #[test]
    fn mse_mean_grad_matches_definition() {
        let mut g = Graph::new();
        let x = g.parameter("x", Matrix::from_rows(&[vec![2.0]]));
        let zero = g.constant(Matrix::zeros(1, 1));
        g.mse_mean(x, zero);
        let out = g.forward_eval(&no_bindings()).unwrap();
        assert_eq!(out[(0, 0)], 4.0);
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"][(0, 0)], 4.0);
    }

    #[test]
    fn relu_subgradient_zero_at_negative() {
        let mut g = Graph::new();
        let x = g.parameter("x", Matrix::from_rows(&[vec![-1.0, 2.0]]));
        let r = g.relu(x);
        g.sum_all(r);
        g.forward_eval(&no_bindings()).unwrap();
        let grads = g.backward().unwrap();
        assert_eq!(grads["x"], Matrix::from_rows(&[vec![0.0, 1.0]]));
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.parameter("x", Matrix::zeros(1, 1));
        g.sum_all(x);
        assert!(matches!(g.backward(), Err(AutodiffError::BackwardBeforeForward)));
    }

    #[test]
    fn two_layer_mlp_matches_manual_forward() {
        let mut rng = StdRng::seed_from_u64(0);
        let x_val = random_matrix(&mut rng, 4, 3);
        let w1_val = random_matrix(&mut rng, 3, 5);
        let w2_val = random_matrix(&mut rng, 5, 2);
        let mut g = Graph::new();
        let x = g.input("x");
        let w1 = g.parameter("w1", w1_val.clone());
        let w2 = g.parameter("w2", w2_val.clone());
        let h = g.matmul(x, w1);
        let h = g.relu(h);
        g.matmul(h, w2);
        let mut bindings = HashMap::new();
        bindings.insert("x".to_string(), x_val.clone());
        let out = g.forward_eval(&bindings).unwrap();
        // Independent recomputation with plain matrix arithmetic.
        let manual = x_val.matmul(&w1_val).map(|v| v.max(0.0)).matmul(&w2_val);
        assert!(out.max_abs_diff(&manual) <= 1e-14);
    }

    #[test]
    fn gradient_accumulation_node_with_two_consumers() {
        // f(x) = sum(x W) + sum(x W) built two ways.
        let mut rng = StdRng::seed_from_u64(2);
        let x_val = random_matrix(&mut rng, 3, 3);
        let w_val = random_matrix(&mut rng, 3, 3);

        let mut g = Graph::new();
        let x = g.parameter("x", x_val.clone());
        let w = g.constant(w_val.clone());
        let y = g.matmul(x, w);
        let s1 = g.sum_all(y);
        let s2 = g.sum_all(y);
        g.scale_add(s1, s2, 1.0, 1.0);
        g.forward_eval(&no_bindings()).unwrap();
        let shared = g.backward().unwrap()["x"].clone();

        let mut g2 = Graph::new();
        let x2 = g2.parameter("x", x_val);
        let w2 = g2.constant(w_val);
        let ya = g2.matmul(x2, w2);
        let yb = g2.matmul(x2, w2);
        let s1 = g2.sum_all(ya);
        let s2 = g2.sum_all(yb);
        g2.scale_add(s1, s2, 1.0, 1.0);
        g2.forward_eval(&no_bindings()).unwrap();
        let duplicated = g2.backward().unwrap()["x"].clone();

        assert!(shared.max_abs_diff(&duplicated) <= 1e-14);
    }

    #[test]
    fn batch_standardize_columns_are_standard() {
        let mut rng = StdRng::seed_from_u64(4);
        let x_val = random_matrix(&mut rng, 16, 3).map(|v| v * 3.0 + 1.0);
        let mut g = Graph::new();
        let x = g.parameter("x", x_val);
        g.batch_standardize_plain(x);
        let out = g.forward_eval(&no_bindings()).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..16).map(|i| out[(i, j)]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 16.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-4, "eps-adjusted variance, got {var}");
        }
    }

    #[test]
    fn grad_check_linear_layer_is_exact() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w", random_matrix(&mut rng, 3, 2));
        let b = g.parameter("b", random_matrix(&mut rng, 1, 2));
        let y = g.matmul(x, w);
        let y = g.add_bias(y, b);
        let target = g.constant(random_matrix(&mut rng, 4, 2));
        g.mse_mean(y, target);
        let mut bindings = HashMap::new();
        bindings.insert("x".to_string(), random_matrix(&mut rng, 4, 3));
        let err = grad_check(&mut g, &bindings, 1e-5).unwrap();
        assert!(err <= 1e-6, "linear ops should be exact up to rounding: {err}");
    }

    #[test]
    fn grad_check_batch_standardize() {
        let mut rng = StdRng::seed_from_u64(6);
        let mut g = Graph::new();
        let x = g.parameter("x", random_matrix(&mut rng, 8, 3));
        let scale = g.parameter("scale", random_matrix(&mut rng, 1, 3).map(|v| v + 2.0));
        let shift = g.parameter("shift", random_matrix(&mut rng, 1, 3));
        let y = g.batch_standardize(x, Some(scale), Some(shift), 1e-5, 0.9, None, None);
        let target = g.constant(random_matrix(&mut rng, 8, 3));
        g.mse_mean(y, target);
        let err = grad_check(&mut g, &no_bindings(), 1e-5).unwrap();
        assert!(err <= 1e-4, "batch_standardize grad check failed: {err}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = StdRng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.parameter("x", random_matrix(&mut rng, 6, 4));
        g.softmax_cross_entropy(x, vec![0, 1, 2, 3, 0, 1]);
        let err = grad_check(&mut g, &no_bindings(), 1e-5).unwrap();
        assert!(err <= 1e-6, "softmax xent grad check failed: {err}");
    }

    #[test]
    fn grad_check_l2_normalize_and_gather() {
        let mut rng = StdRng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.parameter("x", random_matrix(&mut rng, 6, 3));
        let z = g.l2_normalize_rows(x);
        let left = g.slice_rows(z, vec![0, 2, 4, 0]);
        let right = g.slice_rows(z, vec![1, 3, 5, 5]);
        g.mse_mean(left, right);
        let err = grad_check(&mut g, &no_bindings(), 1e-5).unwrap();
        assert!(err <= 1e-6, "l2/gather grad check failed: {err}");
    }

    #[test]
    fn grad_check_concat_and_conv() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut g = Graph::new();
        // 2 images 4x4, 2 channels, conv 3x3 stride 2 pad 1 -> 2x2, 3 out channels.
        let x = g.parameter("x", random_matrix(&mut rng, 2 * 4 * 4, 2));
        let w = g.parameter("w", random_matrix(&mut rng, 2 * 9, 3));
        let b = g.parameter("b", random_matrix(&mut rng, 1, 3));
        let y = g.conv2d(x, w, (4, 4), 2, 3, 2, 1);
        let y = g.add_bias(y, b);
        let y = g.relu(y);
        let p = g.global_avg_pool(y, (2, 2));
        let target = g.constant(random_matrix(&mut rng, 2, 3));
        g.mse_mean(p, target);
        let err = grad_check(&mut g, &no_bindings(), 1e-5).unwrap();
        assert!(err <= 1e-4, "conv grad check failed: {err}");
    }

    #[test]
    fn whitening_backward_zero_cotangent() {
        let mut rng = StdRng::seed_from_u64(10);
        let v = random_matrix(&mut rng, 6, 2);
        let (_, stats) = whiten_batch(&v, 0.0).unwrap();
        let dz = Matrix::zeros(6, 2);
        let dv = whitening_backward(&dz, &v, &stats).unwrap();
        assert!(dv.max_abs() <= 1e-15);
    }

    #[test]
    fn grad_check_whitening_node() {
        let mut rng = StdRng::seed_from_u64(11);
        let plan = make_sliceplan(8, &SliceplanConfig { d: 2, sub_size: 8, iterations: 1 }, &mut rng)
            .unwrap();
        let mut g = Graph::new();
        let v = g.parameter("v", random_matrix(&mut rng, 16, 4));
        let z = g.whitening(v, plan, 0.0);
        let target = g.constant(random_matrix(&mut rng, 16, 4));
        g.mse_mean(z, target);
        let err = grad_check(&mut g, &no_bindings(), 1e-5).unwrap();
        assert!(err <= 1e-4, "whitening grad check failed: {err}");
    }

    /// Independent oracle: differentiate the whitening chain (covariance ->
    /// Cholesky -> triangular inverse -> apply) in forward mode along random
    /// directions and compare directional derivatives against the analytic
    /// gradient's inner product.
    fn whitening_directional_derivative(
        v: &Matrix<f64>,
        dv_dir: &Matrix<f64>,
        target: &Matrix<f64>,
    ) -> f64 {
        let (m, k) = v.shape();
        let (z, stats) = whiten_batch(v, 0.0).unwrap();
        let l = &stats.chol;
        let w = &stats.w;
        // d(mu), d(centered)
        let dmu = crate::linalg::mean_rows(dv_dir).unwrap();
        let mut dxc = dv_dir.clone();
        for i in 0..m {
            for j in 0..k {
                dxc[(i, j)] -= dmu[j];
            }
        }
        let mut xc = v.clone();
        for i in 0..m {
            for j in 0..k {
                xc[(i, j)] -= stats.mu[j];
            }
        }
        // dSigma = (Xc^T dXc + dXc^T Xc) / (m-1)
        let dsigma = xc
            .transpose()
            .matmul(&dxc)
            .add(&dxc.transpose().matmul(&xc))
            .scale(1.0 / (m as f64 - 1.0));
        // Cholesky differential: dL = L * phi(L^-1 dSigma L^-T),
        // phi = lower triangle with halved diagonal.
        let inner = w.matmul(&dsigma).matmul(&w.transpose());
        let mut phi = Matrix::<f64>::zeros(k, k);
        for i in 0..k {
            for j in 0..i {
                phi[(i, j)] = inner[(i, j)];
            }
            phi[(i, i)] = 0.5 * inner[(i, i)];
        }
        let dl = l.matmul(&phi);
        // dW = -W dL W
        let dw = w.matmul(&dl).matmul(w).scale(-1.0);
        // Z = Xc W^T (row-major)  =>  dZ = dXc W^T + Xc dW^T
        let dz = dxc.matmul_transpose_b(w).add(&xc.matmul_transpose_b(&dw));
        // loss = mse_mean(Z, target): dLoss = (2/m) sum (z - t) dz
        let mut dloss = 0.0;
        for i in 0..m {
            for j in 0..k {
                dloss += 2.0 / m as f64 * (z[(i, j)] - target[(i, j)]) * dz[(i, j)];
            }
        }
        dloss
    }

    #[test]
    fn whitening_backward_matches_factorization_chain_oracle() {
        let mut rng = StdRng::seed_from_u64(12);
        for trial in 0..10 {
            let (m, k) = [(6, 2), (16, 4), (12, 3)][trial % 3];
            let v = random_matrix(&mut rng, m, k);
            let target = random_matrix(&mut rng, m, k);
            let (z, stats) = whiten_batch(&v, 0.0).unwrap();
            let dl_dz = z.sub(&target).scale(2.0 / m as f64);
            let analytic = whitening_backward(&dl_dz, &v, &stats).unwrap();
            for _ in 0..5 {
                let dir = random_matrix(&mut rng, m, k);
                let chain = whitening_directional_derivative(&v, &dir, &target);
                let inner: f64 = analytic
                    .data()
                    .iter()
                    .zip(dir.data())
                    .map(|(&a, &b)| a * b)
                    .sum();
                let rel = (chain - inner).abs() / chain.abs().max(inner.abs()).max(1e-10);
                assert!(rel <= 1e-6, "chain oracle disagrees: rel={rel}");
            }
        }
    }

    #[test]
    fn whitening_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        for &(m, k) in &[(8usize, 2usize), (16, 4), (64, 8)] {
            let v = random_matrix(&mut rng, m, k);
            let target = random_matrix(&mut rng, m, k);
            let loss = |v: &Matrix<f64>| -> f64 {
                let (z, _) = whiten_batch(v, 0.0).unwrap();
                let mut acc = 0.0;
                for (a, b) in z.data().iter().zip(target.data()) {
                    acc += (a - b) * (a - b);
                }
                acc / m as f64
            };
            let (z, stats) = whiten_batch(&v, 0.0).unwrap();
            let dl_dz = z.sub(&target).scale(2.0 / m as f64);
            let analytic = whitening_backward(&dl_dz, &v, &stats).unwrap();
            let eps = 1e-5;
            for idx in 0..(m * k) {
                let mut vp = v.clone();
                vp.data_mut()[idx] += eps;
                let mut vm = v.clone();
                vm.data_mut()[idx] -= eps;
                let fd = (loss(&vp) - loss(&vm)) / (2.0 * eps);
                let an = analytic.data()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-4, "fd oracle disagrees at {idx}: rel={rel}");
            }
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_and_is_batch_independent() {
        let mut rng = StdRng::seed_from_u64(14);
        let running = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
        let x_a = random_matrix(&mut rng, 4, 2);
        let run = |x_val: Matrix<f64>| {
            let mut g = Graph::new();
            g.train_mode = false;
            let x = g.parameter("x", x_val);
            g.batch_standardize(x, None, None, 1e-5, 0.9, None, Some(running.clone()));
            g.forward_eval(&HashMap::new()).unwrap()
        };
        let single = run(Matrix::from_rows(&[x_a.row(0).to_vec()]));
        let full = run(x_a.clone());
        for j in 0..2 {
            assert!((single[(0, j)] - full[(0, j)]).abs() <= 1e-14);
        }
    }

    #[test]
    fn f32_graph_smoke() {
        let mut g = Graph::<f32>::new();
        let x = g.parameter("x", Matrix::from_rows(&[vec![3.0f32, 4.0]]));
        let z = g.l2_normalize_rows(x);
        g.sum_all(z);
        let out = g.forward_eval(&HashMap::new()).unwrap();
        assert!((out[(0, 0)] - 1.4).abs() <= 1e-6);
        g.backward().unwrap();
    }
}
