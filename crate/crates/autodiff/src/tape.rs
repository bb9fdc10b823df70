//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in exact
//! reverse execution order and adds the resulting gradients into the
//! accumulators of leaves created with `requires_grad`. Accumulators are only
//! cleared by [`Tape::zero_grad`], so two backward calls sum.

use crate::error::{shape_mismatch, AutodiffError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Mse(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentSum { x: Var, seg: Vec<usize> },
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Mse(..) => "mse",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentSum { .. } => "segment_sum",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LayerNorm { .. } => "layer_norm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// Records a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: a constant copy of `x`'s current value.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    pub fn value(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, x: Var) -> Option<&Tensor> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {}", op.name());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape =
            broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| shape_mismatch(name, ta.shape(), tb.shape()))?;
        let ma = Bcast::new(&out_shape, ta.shape());
        let mb = Bcast::new(&out_shape, tb.shape());
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|k| f(da[ma.idx(k)], db[mb.idx(k)])).collect();
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(AutodiffError::Shape(format!(
                "transpose: expected rank 2, found {:?}",
                ta.shape()
            )));
        }
        let t = transpose2(ta);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.nodes[a.0].value.map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.data().iter().any(|&v| v <= 0.0) {
            return Err(AutodiffError::Numerical("log of a non-positive value".into()));
        }
        let t = ta.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Log(a), rg))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = axis_apply(&self.nodes[x.0].value, axis, "softmax", softmax_lane)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = axis_apply(&self.nodes[x.0].value, axis, "log_softmax", log_softmax_lane)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.is_empty() {
            return Err(AutodiffError::Shape("mean of an empty tensor".into()));
        }
        let t = Tensor::scalar(tx.sum() / tx.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Mean(x), rg))
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (outer, len, inner) = lanes(tx.shape(), axis, "sum_axis")?;
        let mut out = vec![0.0; outer * inner];
        let d = tx.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SumAxis { x, axis }, rg))
    }

    /// Mean squared error over all elements; shapes must match exactly.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch("mse", ta.shape(), tb.shape()));
        }
        if ta.is_empty() {
            return Err(AutodiffError::Shape("mse of empty tensors".into()));
        }
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / ta.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mse(a, b), rg))
    }

    /// Selects rows (leading-axis slices) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() == 0 {
            return Err(AutodiffError::Shape("gather_rows on a scalar".into()));
        }
        let rows = tx.shape()[0];
        let w = tx.cols();
        let mut out = Vec::with_capacity(idx.len() * w);
        for &r in idx {
            if r >= rows {
                return Err(AutodiffError::Shape(format!(
                    "gather_rows: index {r} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&tx.data()[r * w..(r + 1) * w]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Sums rows of `x` into `n_segments` buckets given by `seg`.
    pub fn segment_sum(&mut self, x: Var, seg: &[usize], n_segments: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() == 0 || tx.shape()[0] != seg.len() {
            return Err(AutodiffError::Shape(format!(
                "segment_sum: {} segment ids for shape {:?}",
                seg.len(),
                tx.shape()
            )));
        }
        let w = tx.cols();
        let mut out = vec![0.0; n_segments * w];
        for (r, &s) in seg.iter().enumerate() {
            if s >= n_segments {
                return Err(AutodiffError::Shape(format!(
                    "segment_sum: segment {s} out of range for {n_segments} segments"
                )));
            }
            let src = &tx.data()[r * w..(r + 1) * w];
            for (o, v) in out[s * w..(s + 1) * w].iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = n_segments;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentSum { x, seg: seg.to_vec() }, rg))
    }

    /// Scales every lane along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (outer, len, inner) = lanes(tx.shape(), axis, "l2_normalize")?;
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let n = (0..len).map(|l| d[at(l)] * d[at(l)]).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(AutodiffError::Numerical("l2_normalize of a zero-norm lane".into()));
                }
                for l in 0..len {
                    out[at(l)] = d[at(l)] / n;
                }
                norms.push(n);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() == 0 {
            return Err(AutodiffError::Shape("layer_norm on a scalar".into()));
        }
        let w = *tx.shape().last().unwrap();
        let rows = tx.len() / w.max(1);
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let lane = &d[r * w..(r + 1) * w];
            let mu = lane.iter().sum::<f64>() / w as f64;
            let var = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(lane) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Propagates d`loss`/d(leaf) into every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar loss, found shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.nodes[a.0].requires_grad {
                    send(*a, reduce_to(g, y.shape(), val(*a).shape(), |_| 1.0));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, reduce_to(g, y.shape(), val(*b).shape(), |_| sign));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let mb = Bcast::new(y.shape(), tb.shape());
                    let t = reduce_to(g, y.shape(), ta.shape(), |k| tb.data()[mb.idx(k)]);
                    send(*a, t);
                }
                if self.nodes[b.0].requires_grad {
                    let ma = Bcast::new(y.shape(), ta.shape());
                    let t = reduce_to(g, y.shape(), tb.shape(), |k| ta.data()[ma.idx(k)]);
                    send(*b, t);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    send(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    send(*b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => send(*a, transpose2(g)),
            Op::Relu(a) => {
                let x = val(*a).data();
                let d = g.data().iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
                send(*a, Tensor::new(g.shape().to_vec(), d.collect())?);
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Log(a) => {
                let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                send(*a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = lanes(y.shape(), *axis, "softmax")?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            out[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = lanes(y.shape(), *axis, "log_softmax")?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: f64 = (0..len).map(|l| gd[at(l)]).sum();
                        for l in 0..len {
                            out[at(l)] = gd[at(l)] - yd[at(l)].exp() * gs;
                        }
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.data()[0])),
            Op::Mean(a) => {
                let ta = val(*a);
                send(*a, Tensor::full(ta.shape(), g.data()[0] / ta.len() as f64));
            }
            Op::SumAxis { x, axis } => {
                let tx = val(*x);
                let (outer, len, inner) = lanes(tx.shape(), *axis, "sum_axis")?;
                let mut out = vec![0.0; tx.len()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                send(*x, Tensor::new(tx.shape().to_vec(), out)?);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = 2.0 * g.data()[0] / ta.len() as f64;
                let d: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| c * (x - y)).collect();
                if self.nodes[b.0].requires_grad {
                    let nd = d.iter().map(|v| -v).collect();
                    send(*b, Tensor::new(tb.shape().to_vec(), nd)?);
                }
                send(*a, Tensor::new(ta.shape().to_vec(), d)?);
            }
            Op::GatherRows { x, idx } => {
                let tx = val(*x);
                let w = tx.cols();
                let mut out = vec![0.0; tx.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let gr = &g.data()[r * w..(r + 1) * w];
                    for (o, v) in out[src * w..(src + 1) * w].iter_mut().zip(gr) {
                        *o += v;
                    }
                }
                send(*x, Tensor::new(tx.shape().to_vec(), out)?);
            }
            Op::SegmentSum { x, seg } => {
                let tx = val(*x);
                let w = tx.cols();
                let mut out = Vec::with_capacity(tx.len());
                for &s in seg {
                    out.extend_from_slice(&g.data()[s * w..(s + 1) * w]);
                }
                send(*x, Tensor::new(tx.shape().to_vec(), out)?);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, len, inner) = lanes(y.shape(), *axis, "l2_normalize")?;
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let n = norms[o * inner + i];
                        let dot: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            out[at(l)] = (gd[at(l)] - yd[at(l)] * dot) / n;
                        }
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let w = *y.shape().last().unwrap();
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let yl = &yd[r * w..(r + 1) * w];
                    let gl = &gd[r * w..(r + 1) * w];
                    let gm = gl.iter().sum::<f64>() / w as f64;
                    let gym = gl.iter().zip(yl).map(|(g, y)| g * y).sum::<f64>() / w as f64;
                    for k in 0..w {
                        out[r * w + k] = is * (gl[k] - gm - yl[k] * gym);
                    }
                }
                send(*x, Tensor::new(y.shape().to_vec(), out)?);
            }
        }
        Ok(())
    }
}

fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose preserves element count")
}

/// (outer, axis length, inner) strides for lane-wise ops.
fn lanes(shape: &[usize], axis: usize, op: &str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(AutodiffError::Shape(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn axis_apply(t: &Tensor, axis: usize, op: &str, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let (outer, len, inner) = lanes(t.shape(), axis, op)?;
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    let mut lane = vec![0.0; len];
    let mut res = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for l in 0..len {
                lane[l] = d[(o * len + l) * inner + i];
            }
            f(&lane, &mut res);
            for l in 0..len {
                out[(o * len + l) * inner + i] = res[l];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn softmax_lane(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn log_softmax_lane(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Numpy broadcasting of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k < n - a.len() { 1 } else { a[k - (n - a.len())] };
        let db = if k < n - b.len() { 1 } else { b[k - (n - b.len())] };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps flat output indices to flat input indices under broadcasting.
enum Bcast {
    Same,
    Scalar,
    Suffix(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        let n_in: usize = inp.iter().product();
        if out == inp {
            return Bcast::Same;
        }
        if n_in == 1 {
            return Bcast::Scalar;
        }
        let trimmed: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&trimmed) {
            return Bcast::Suffix(n_in);
        }
        let rank = out.len();
        let pad = rank - inp.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for k in (0..inp.len()).rev() {
            strides[k + pad] = if inp[k] == 1 { 0 } else { s };
            s *= inp[k];
        }
        let n_out: usize = out.iter().product();
        let mut map = Vec::with_capacity(n_out);
        let mut counter = vec![0usize; rank];
        for _ in 0..n_out {
            map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for k in (0..rank).rev() {
                counter[k] += 1;
                if counter[k] < out[k] {
                    break;
                }
                counter[k] = 0;
            }
        }
        Bcast::General(map)
    }

    #[inline]
    fn idx(&self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Scalar => 0,
            Bcast::Suffix(n) => k % n,
            Bcast::General(m) => m[k],
        }
    }
}

/// Sums `g · factor(k)` over broadcast dimensions back to `in_shape`.
fn reduce_to(g: &Tensor, out_shape: &[usize], in_shape: &[usize], factor: impl Fn(usize) -> f64) -> Tensor {
    let map = Bcast::new(out_shape, in_shape);
    let mut acc = Tensor::zeros(in_shape);
    let a = acc.data_mut();
    for (k, gv) in g.data().iter().enumerate() {
        a[map.idx(k)] += gv * factor(k);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[3, 4], &[3]), None);
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn column_broadcast_maps_rows() {
        let m = Bcast::new(&[2, 3], &[2, 1]);
        let got: Vec<usize> = (0..6).map(|k| m.idx(k)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.0; 4]));
        let y = t.softmax(x, 0).unwrap();
        for v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let i = t.constant(Tensor::eye(2));
        let av = t.constant(a.clone());
        let y = t.matmul(i, av).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let l = t.sum(w);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_scalar_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::scalar(1.7));
        let z = t.constant(Tensor::scalar(0.0));
        let l = t.mse(w, z).unwrap();
        t.backward(l).unwrap();
        assert!((t.grad(w).unwrap().data()[0] - 3.4).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let l = t.sum(w);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(AutodiffError::Shape(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0, 2.0]));
        let d = t.detach(w);
        let p = t.mul(w, d).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        // d(w·sg[w])/dw = sg[w]
        assert_eq!(t.grad(w).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn l2_normalize_rejects_zero_lane() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.l2_normalize(x, 1), Err(AutodiffError::Numerical(_))));
    }
}
