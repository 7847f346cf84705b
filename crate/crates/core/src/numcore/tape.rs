//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes. Nodes are
//! appended in evaluation order, so the list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep. Leaves created
//! with [`Tape::constant`] never receive gradients and every node that only
//! depends on constants is skipped during the sweep.

use crate::error::{Error, Result};
use crate::numcore::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[m,k] x [k,n]`
    MatMul(Var, Var),
    /// `[m,n] + [n]` broadcast over rows
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    /// contiguous column block of a matrix
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// H tensors of shape `[B,F]` into `[B,H,F]`
    Stack(Vec<Var>),
    /// flat inner product, scalar output
    Dot(Var, Var),
    /// single element as a scalar
    Pick(Var, usize),
    /// per-column masked mean of squared error over all leading axes
    MaskedMse {
        pred: Var,
        target: Tensor,
        mask: Tensor,
    },
    /// mean clamped binary log-loss
    LogLoss {
        probs: Var,
        labels: Vec<f64>,
        clamp: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::Stack(_) => "stack",
            Op::Dot(..) => "dot",
            Op::Pick(..) => "pick",
            Op::MaskedMse { .. } => "masked_mse",
            Op::LogLoss { .. } => "log_loss",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op, tracked });
        Var(id)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Fails if any node recorded so far holds a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((node, op)) => Err(Error::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = (va.rows(), va.cols());
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be a matrix");
        assert_eq!(vb.shape()[0], k, "matmul inner extent {:?} x {:?}", va.shape(), vb.shape());
        let n = vb.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), tracked)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        assert_eq!(vb.len(), n, "bias width");
        let mut out = vx.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        self.push(Tensor::from_parts(vx.shape().to_vec(), out), Op::AddBias(x, bias), tracked)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{} operand shapes", op.name());
        let value = va.zip_map(vb, f);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).scale(k);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, k), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let tracked = self.tracked(x);
        self.push(value, Op::Sigmoid(x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let tracked = self.tracked(x);
        self.push(value, Op::Tanh(x), tracked)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let tracked = self.tracked(x);
        self.push(value, Op::Square(x), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        assert!(start + len <= n, "column slice out of range");
        let mut out = Vec::with_capacity(m * len);
        for row in vx.data().chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let tracked = self.tracked(x);
        self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start, len },
            tracked,
        )
    }

    pub fn stack(&mut self, steps: Vec<Var>) -> Var {
        assert!(!steps.is_empty(), "stack of nothing");
        let first = self.value(steps[0]);
        let (b, f) = (first.rows(), first.cols());
        let h = steps.len();
        let mut out = vec![0.0; b * h * f];
        for (t, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            assert_eq!(v.shape(), [b, f], "stack step shape");
            for i in 0..b {
                out[(i * h + t) * f..(i * h + t + 1) * f].copy_from_slice(&v.data()[i * f..(i + 1) * f]);
            }
        }
        let tracked = steps.iter().any(|&s| self.tracked(s));
        self.push(Tensor::from_parts(vec![b, h, f], out), Op::Stack(steps), tracked)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "dot lengths");
        let value = Tensor::scalar(va.dot(vb));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Dot(a, b), tracked)
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Var {
        let value = Tensor::scalar(self.value(x).data()[index]);
        let tracked = self.tracked(x);
        self.push(value, Op::Pick(x, index), tracked)
    }

    /// Per-column masked mean squared error: for column `f`,
    /// `sum(mask * (pred - target)^2) / max(1, sum(mask))` over every leading
    /// index. A column with no observed cells yields 0.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor, mask: Tensor) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "masked_mse target shape");
        assert_eq!(vp.shape(), mask.shape(), "masked_mse mask shape");
        let f = *vp.shape().last().unwrap();
        let mut num = vec![0.0; f];
        let mut den = vec![0.0; f];
        for ((row_p, row_t), row_m) in vp
            .data()
            .chunks_exact(f)
            .zip(target.data().chunks_exact(f))
            .zip(mask.data().chunks_exact(f))
        {
            for j in 0..f {
                let e = row_p[j] - row_t[j];
                num[j] += row_m[j] * e * e;
                den[j] += row_m[j];
            }
        }
        let out: Vec<f64> = num.iter().zip(&den).map(|(n, d)| n / d.max(1.0)).collect();
        let tracked = self.tracked(pred);
        self.push(Tensor::from_parts(vec![f], out), Op::MaskedMse { pred, target, mask }, tracked)
    }

    /// Mean of `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[clamp, 1-clamp]`.
    pub fn log_loss(&mut self, probs: Var, labels: Vec<f64>, clamp: f64) -> Var {
        let vp = self.value(probs);
        assert_eq!(vp.len(), labels.len(), "log_loss label count");
        let n = labels.len() as f64;
        let total: f64 = vp
            .data()
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let tracked = self.tracked(probs);
        self.push(Tensor::scalar(total / n), Op::LogLoss { probs, labels, clamp }, tracked)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Leaves in `wrt` that do not influence `output` get zero tensors.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        self.check_finite()?;
        assert_eq!(self.value(output).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if !g.is_finite() {
                return Err(Error::NonFinite { node: id, op: node.op.name() });
            }
            grads[id] = Some(g);
        }
        Ok(wrt
            .iter()
            .map(|&v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.shape()[1]);
                if self.tracked(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g.data(), vb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(va.shape().to_vec(), da));
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(va.data(), g.data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::from_parts(shape, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.scale(*k)),
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let d = g.zip_map(self.value(*x), |gv, v| 2.0 * gv * v);
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let n = vx.cols();
                let mut d = vec![0.0; vx.len()];
                for (drow, grow) in d.chunks_exact_mut(n).zip(g.data().chunks_exact(*len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vx.shape().to_vec(), d));
            }
            Op::Stack(steps) => {
                let (b, h, f) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                for (t, &s) in steps.iter().enumerate() {
                    if !self.tracked(s) {
                        continue;
                    }
                    let mut d = vec![0.0; b * f];
                    for i in 0..b {
                        d[i * f..(i + 1) * f].copy_from_slice(&g.data()[(i * h + t) * f..(i * h + t + 1) * f]);
                    }
                    self.accumulate(grads, s, Tensor::from_parts(vec![b, f], d));
                }
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                if self.tracked(*a) {
                    self.accumulate(grads, *a, self.value(*b).scale(gv));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, self.value(*a).scale(gv));
                }
            }
            Op::Pick(x, index) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.data_mut()[*index] = g.item();
                self.accumulate(grads, *x, d);
            }
            Op::MaskedMse { pred, target, mask } => {
                let vp = self.value(*pred);
                let f = *vp.shape().last().unwrap();
                let mut den = vec![0.0; f];
                for row in mask.data().chunks_exact(f) {
                    for (d, &m) in den.iter_mut().zip(row) {
                        *d += m;
                    }
                }
                let coef: Vec<f64> = den
                    .iter()
                    .zip(g.data())
                    .map(|(d, gv)| 2.0 * gv / d.max(1.0))
                    .collect();
                let mut d = vec![0.0; vp.len()];
                for (idx, out) in d.iter_mut().enumerate() {
                    let j = idx % f;
                    *out = coef[j] * mask.data()[idx] * (vp.data()[idx] - target.data()[idx]);
                }
                self.accumulate(grads, *pred, Tensor::from_parts(vp.shape().to_vec(), d));
            }
            Op::LogLoss { probs, labels, clamp } => {
                let vp = self.value(*probs);
                let n = labels.len() as f64;
                let gv = g.item();
                let d: Vec<f64> = vp
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p < *clamp || p > 1.0 - clamp {
                            0.0
                        } else {
                            gv * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *probs, Tensor::from_parts(vp.shape().to_vec(), d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.square(x);
        let y = t.sum(sq);
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = t.sum(c);
        let g = t.backward(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn nonfinite_node_is_named() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![f64::MAX]));
        let y = t.square(x);
        let s = t.sum(y);
        match t.backward(s, &[x]) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "square");
            }
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn reused_node_accumulates() {
        // y = x * x via mul of the same node
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![3.0]));
        let y = t.mul(x, x);
        let s = t.sum(y);
        assert_eq!(t.backward(s, &[x]).unwrap()[0].data(), &[6.0]);
    }

    #[test]
    fn masked_mse_all_masked_is_zero() {
        let mut t = Tape::new();
        let p = t.param(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = t.masked_mse(p, Tensor::zeros(&[1, 2, 2]), Tensor::zeros(&[1, 2, 2]));
        assert_eq!(t.value(out).data(), &[0.0, 0.0]);
    }
}
