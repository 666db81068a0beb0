use super::kernels;
use super::{argsort_desc_stable, Indices, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// rhs is `rows × 1`, repeated across columns.
    Column,
    /// rhs is a single row, repeated down the rows.
    Row,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    ScalarMul(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    RowMax(usize, Vec<usize>),
    RowSum(usize),
    RowMean(usize),
    MeanAll(usize),
    SumAll(usize),
    Cumsum(usize),
    Flip(usize),
    Gather(usize, Indices),
    L2Normalize(usize, Vec<f64>),
    LogSumExpRow(usize),
    RevCumLogSumExp(usize),
    Clamp(usize, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul_elementwise",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::RowMax(..) => "row_max",
            Op::RowSum(_) => "row_sum",
            Op::RowMean(_) => "row_mean",
            Op::MeanAll(_) => "mean_all",
            Op::SumAll(_) => "sum_all",
            Op::Cumsum(_) => "cumsum_last_axis",
            Op::Flip(_) => "flip_last_axis",
            Op::Gather(..) => "gather_last_axis",
            Op::L2Normalize(..) => "l2_normalize_rows",
            Op::LogSumExpRow(_) => "logsumexp_row",
            Op::RevCumLogSumExp(_) => "reverse_cumulative_logsumexp",
            Op::Clamp(..) => "clamp",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => vec![a, b],
            Op::Transpose(a)
            | Op::ScalarMul(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::RowMax(a, _)
            | Op::RowSum(a)
            | Op::RowMean(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::Cumsum(a)
            | Op::Flip(a)
            | Op::Gather(a, _)
            | Op::L2Normalize(a, _)
            | Op::LogSumExpRow(a)
            | Op::RevCumLogSumExp(a)
            | Op::Clamp(a, _, _) => vec![a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// One entry of the computation record, in recording order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// A single-use computation record.
///
/// Values are appended in execution order, so the record is topologically sorted by
/// construction. [`Graph::backward`] may run once; afterwards gradients of every
/// `requires_grad` leaf are available through [`Graph::grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn row_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 => vec![1],
        n => {
            let mut s = shape[..n - 1].to_vec();
            s.push(1);
            s
        }
    }
}

fn bcast_kind(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Bcast> {
    if lhs.shape() == rhs.shape() {
        Ok(Bcast::Same)
    } else if rhs.numel() == 1 {
        Ok(Bcast::Scalar)
    } else if rhs.cols() == 1 && rhs.rows() == lhs.rows() && lhs.shape().len() >= 2 {
        Ok(Bcast::Column)
    } else if rhs.rows() == 1 && rhs.cols() == lhs.cols() {
        Ok(Bcast::Row)
    } else {
        Err(Error::shape(
            op,
            format!("cannot broadcast {:?} onto {:?}", rhs.shape(), lhs.shape()),
        ))
    }
}

/// Value of the broadcast rhs at flat position `i` of an lhs with `cols` columns.
#[inline]
fn bcast_at(rhs: &[f64], kind: Bcast, i: usize, cols: usize) -> f64 {
    match kind {
        Bcast::Same => rhs[i],
        Bcast::Scalar => rhs[0],
        Bcast::Column => rhs[i / cols],
        Bcast::Row => rhs[i % cols],
    }
}

/// Sums a full-size gradient back down to the rhs shape.
fn bcast_reduce(g: &[f64], kind: Bcast, cols: usize, rhs_len: usize) -> Vec<f64> {
    match kind {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Column => g.chunks(cols).map(|r| r.iter().sum()).collect(),
        Bcast::Row => {
            let mut out = vec![0.0; rhs_len];
            for row in g.chunks(cols) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        }
    }
}

fn map_rows(x: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let cols = x.cols();
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(cols.max(1)).zip(out.chunks_mut(cols.max(1))) {
        f(src, dst);
    }
    out
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + (-(a - b).abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A constant leaf; never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The recorded operations (leaves excluded), in topological order.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| RecordEntry {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: i,
            })
            .collect()
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::RecordConsumed)
        } else {
            Ok(())
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a.0)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var> {
        self.check_live()?;
        let (lhs, rhs) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, lhs, rhs)?;
        let cols = lhs.cols();
        let data = lhs
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bcast_at(rhs.data(), kind, i, cols)))
            .collect();
        let out = Tensor::new(lhs.shape().to_vec(), data)?;
        Ok(self.push(out, mk(a.0, b.0, kind)))
    }

    /// Elementwise `a + b`; `b` may be a scalar, a column (`rows×1`) or a single row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul_elementwise", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(out, Op::ScalarMul(a.0, c)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(out, op))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::invalid(format!("clamp bounds [{lo}, {hi}]")));
        }
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    /// Per-row maximum (`rows × 1`). Gradient goes to the first maximal entry.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::shape("row_max", "empty rows"));
        }
        let mut argmax = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(row_shape(x.shape()), data)?;
        Ok(self.push(out, Op::RowMax(a.0, argmax)))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        let out = Tensor::new(row_shape(x.shape()), data)?;
        Ok(self.push(out, Op::RowSum(a.0)))
    }

    pub fn row_mean(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::shape("row_mean", "empty rows"));
        }
        let c = x.cols() as f64;
        let data = (0..x.rows()).map(|r| x.row(r).iter().sum::<f64>() / c).collect();
        let out = Tensor::new(row_shape(x.shape()), data)?;
        Ok(self.push(out, Op::RowMean(a.0)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64);
        Ok(self.push(out, Op::MeanAll(a.0)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push(out, Op::SumAll(a.0)))
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum_last_axis(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let data = map_rows(x, |src, dst| {
            let mut acc = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                acc += s;
                *d = acc;
            }
        });
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Cumsum(a.0)))
    }

    pub fn flip_last_axis(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let data = map_rows(x, |src, dst| {
            for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *s;
            }
        });
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Flip(a.0)))
    }

    /// `out[r][k] = a[r][idx[r][k]]`. The indices are constants.
    pub fn gather_last_axis(&mut self, a: Var, idx: &Indices) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if idx.rows() != x.rows() {
            return Err(Error::shape(
                "gather_last_axis",
                format!("{} index rows for input {:?}", idx.rows(), x.shape()),
            ));
        }
        let cols = x.cols();
        if let Some(&bad) = idx.data().iter().find(|&&i| i >= cols) {
            return Err(Error::shape(
                "gather_last_axis",
                format!("index {bad} out of range for last axis of size {cols}"),
            ));
        }
        let mut data = Vec::with_capacity(idx.data().len());
        for r in 0..idx.rows() {
            let row = x.row(r);
            data.extend(idx.row(r).iter().map(|&i| row[i]));
        }
        let mut shape = row_shape(x.shape());
        *shape.last_mut().expect("nonempty") = idx.cols();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather(a.0, idx.clone())))
    }

    /// Stable descending sort of every row. Returns the sorted values (differentiable, as a
    /// gather of the input) and the gradient-free sort indices.
    pub fn sort_desc_stable(&mut self, a: Var) -> Result<(Var, Indices)> {
        self.check_live()?;
        let idx = argsort_desc_stable(self.value(a))?;
        let values = self.gather_last_axis(a, &idx)?;
        Ok((values, idx))
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNormRow { row: r });
            }
            norms.push(n);
        }
        let cols = x.cols();
        let data = x.data().iter().enumerate().map(|(i, v)| v / norms[i / cols]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::L2Normalize(a.0, norms)))
    }

    /// `log Σ_c exp(a[r][c])` per row, computed with max subtraction.
    pub fn logsumexp_row(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::shape("logsumexp_row", "empty rows"));
        }
        let data = (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let out = Tensor::new(row_shape(x.shape()), data)?;
        Ok(self.push(out, Op::LogSumExpRow(a.0)))
    }

    /// `out[r][k] = log Σ_{j ≥ k} exp(a[r][j])`.
    ///
    /// Equal to `log(flip(cumsum(flip(exp(a)))))` but evaluated as a running log-add-exp
    /// from the right, so suffixes far below the row maximum do not underflow to `log 0`.
    pub fn reverse_cumulative_logsumexp(&mut self, a: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(a);
        let data = map_rows(x, |src, dst| {
            let mut acc = f64::NEG_INFINITY;
            for (d, &s) in dst.iter_mut().zip(src).rev() {
                acc = logaddexp(s, acc);
                *d = acc;
            }
        });
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RevCumLogSumExp(a.0)))
    }

    /// Back-propagates from a scalar, seeding with 1.0. The record is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        self.consumed = true;
        let n = self.nodes.len();
        self.leaf_grads = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                self.leaf_grads[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            for (input, contrib) in self.backward_rule(id, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to each of its inputs given upstream `g`.
    fn backward_rule(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                vec![
                    (a, kernels::matmul_bt(g, bv.data(), m, nn, k)),
                    (b, kernels::matmul_at(av.data(), g, m, k, nn)),
                ]
            }
            &Op::Transpose(a) => {
                let s = val(a).shape();
                vec![(a, kernels::transpose(g, s[1], s[0]))]
            }
            &Op::Add(a, b, kind) => {
                let cols = val(a).cols();
                vec![(a, g.to_vec()), (b, bcast_reduce(g, kind, cols, val(b).numel()))]
            }
            &Op::Sub(a, b, kind) => {
                let cols = val(a).cols();
                let mut gb = bcast_reduce(g, kind, cols, val(b).numel());
                gb.iter_mut().for_each(|v| *v = -*v);
                vec![(a, g.to_vec()), (b, gb)]
            }
            &Op::Mul(a, b, kind) => {
                let (av, bv) = (val(a), val(b));
                let cols = av.cols();
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bcast_at(bv.data(), kind, i, cols))
                    .collect();
                let prod: Vec<f64> = g.iter().zip(av.data()).map(|(gi, x)| gi * x).collect();
                vec![(a, ga), (b, bcast_reduce(&prod, kind, cols, bv.numel()))]
            }
            &Op::ScalarMul(a, c) => vec![(a, g.iter().map(|v| v * c).collect())],
            &Op::Exp(a) => {
                #[cfg(feature = "fault-injection")]
                if fault::exp_rule_broken() {
                    return vec![(a, g.to_vec())];
                }
                vec![(a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect())]
            }
            &Op::Log(a) => vec![(a, g.iter().zip(val(a).data()).map(|(gi, x)| gi / x).collect())],
            &Op::Tanh(a) => vec![(a, g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect())],
            &Op::Relu(a) => vec![(
                a,
                g.iter()
                    .zip(val(a).data())
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )],
            &Op::Clamp(a, lo, hi) => vec![(
                a,
                g.iter()
                    .zip(val(a).data())
                    .map(|(gi, x)| if *x >= lo && *x <= hi { *gi } else { 0.0 })
                    .collect(),
            )],
            Op::RowMax(a, argmax) => {
                let x = val(*a);
                let cols = x.cols();
                let mut out = vec![0.0; x.numel()];
                for (r, &c) in argmax.iter().enumerate() {
                    out[r * cols + c] = g[r];
                }
                vec![(*a, out)]
            }
            &Op::RowSum(a) => {
                let cols = val(a).cols();
                vec![(a, (0..val(a).numel()).map(|i| g[i / cols]).collect())]
            }
            &Op::RowMean(a) => {
                let cols = val(a).cols();
                let c = cols as f64;
                vec![(a, (0..val(a).numel()).map(|i| g[i / cols] / c).collect())]
            }
            &Op::MeanAll(a) => {
                let n = val(a).numel();
                vec![(a, vec![g[0] / n as f64; n])]
            }
            &Op::SumAll(a) => vec![(a, vec![g[0]; val(a).numel()])],
            &Op::Cumsum(a) => {
                let cols = val(a).cols().max(1);
                let mut out = vec![0.0; g.len()];
                for (src, dst) in g.chunks(cols).zip(out.chunks_mut(cols)) {
                    let mut acc = 0.0;
                    for (d, s) in dst.iter_mut().zip(src).rev() {
                        acc += s;
                        *d = acc;
                    }
                }
                vec![(a, out)]
            }
            &Op::Flip(a) => {
                let cols = val(a).cols().max(1);
                let mut out = vec![0.0; g.len()];
                for (src, dst) in g.chunks(cols).zip(out.chunks_mut(cols)) {
                    for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
                        *d = *s;
                    }
                }
                vec![(a, out)]
            }
            Op::Gather(a, idx) => {
                let x = val(*a);
                let cols = x.cols();
                let mut out = vec![0.0; x.numel()];
                for r in 0..idx.rows() {
                    for (k, &c) in idx.row(r).iter().enumerate() {
                        out[r * cols + c] += g[r * idx.cols() + k];
                    }
                }
                vec![(*a, out)]
            }
            Op::L2Normalize(a, norms) => {
                let cols = val(*a).cols().max(1);
                let mut out = vec![0.0; g.len()];
                for (r, ((gr, yr), dst)) in g.chunks(cols).zip(y.chunks(cols)).zip(out.chunks_mut(cols)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for ((d, gi), yi) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = (gi - yi * dot) / norms[r];
                    }
                }
                vec![(*a, out)]
            }
            &Op::LogSumExpRow(a) => {
                let x = val(a);
                let cols = x.cols().max(1);
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| g[i / cols] * (v - y[i / cols]).exp())
                    .collect();
                vec![(a, data)]
            }
            &Op::RevCumLogSumExp(a) => {
                // d/dx_j = Σ_{k ≤ j} g_k exp(x_j - y_k). Carry t_j = Σ_{k ≤ j} g_k exp(y_j - y_k);
                // y is nonincreasing along the row so every exponent stays ≤ 0.
                let x = val(a);
                let cols = x.cols().max(1);
                let mut out = vec![0.0; g.len()];
                for r in 0..x.rows() {
                    let (xr, yr, gr) = (x.row(r), &y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dst = &mut out[r * cols..(r + 1) * cols];
                    let mut carry = 0.0;
                    for j in 0..cols {
                        carry = if j == 0 {
                            gr[0]
                        } else {
                            carry * (yr[j] - yr[j - 1]).exp() + gr[j]
                        };
                        dst[j] = (xr[j] - yr[j]).exp() * carry;
                    }
                }
                vec![(a, out)]
            }
        }
    }
}

#[cfg(feature = "fault-injection")]
pub mod fault {
    //! Test-only switch that replaces the `exp` backward rule with an incorrect one.
    use std::cell::Cell;

    thread_local! {
        static BROKEN_EXP: Cell<bool> = const { Cell::new(false) };
    }

    /// Enables or disables the corrupted rule on the current thread.
    pub fn break_exp_rule(on: bool) {
        BROKEN_EXP.with(|c| c.set(on));
    }

    pub(crate) fn exp_rule_broken() -> bool {
        BROKEN_EXP.with(Cell::get)
    }
}
