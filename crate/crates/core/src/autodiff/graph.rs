use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Neg(Var),
    Sigmoid(Var),
    Relu(Var),
    Powf(Var, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    SetMeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    Diag(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    StopGradient,
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    stop_gradient: bool,
}

/// Reduction kinds accepted by [`Graph::reduce`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Pointwise nonlinearities accepted by [`Graph::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

/// A reverse-mode computation graph. Nodes are appended in topological order,
/// so a reverse sweep over the node list is a valid backward schedule.
///
/// Leaf gradients accumulate across calls to [`Graph::backward`] until
/// [`Graph::zero_grad`]; gradients of interior nodes live only for one sweep.
///
/// Values produced by [`Graph::stop_gradient`] are recorded in creation order.
/// A graph built with [`Graph::with_detached`] replays those values instead of
/// recomputing them, which is how finite-difference checks hold detached
/// quantities constant while perturbing inputs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_detached(values: Vec<Tensor>) -> Self {
        Graph {
            replay: Some(values),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_stop_gradient(&self, v: Var) -> bool {
        self.nodes[v.0].stop_gradient
    }

    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn into_detached_values(self) -> Vec<Tensor> {
        self.detached
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            stop_gradient: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(pos) = self.value(b).data().iter().position(|&x| x == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("zero denominator at flat index {pos}"),
            });
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Div(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| -x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Neg(a), rg)
    }

    pub fn activation(&mut self, act: Activation, a: Var) -> Var {
        match act {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Relu => self.relu(a),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p < 0.0 && self.value(a).data().contains(&0.0) {
            return Err(Error::Domain {
                op: "powf",
                detail: format!("zero base with exponent {p}"),
            });
        }
        let value = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Powf(a, p), rg))
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let value = match axis {
            None => {
                let s = t.sum();
                Tensor::scalar(match kind {
                    Reduce::Sum => s,
                    Reduce::Mean => s / t.len() as f64,
                })
            }
            Some(ax) => {
                let (outer, len, inner) = split_axis(t.shape(), ax)?;
                let mut out = vec![0.0; outer * inner];
                let d = t.data();
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                if kind == Reduce::Mean {
                    out.iter_mut().for_each(|x| *x /= len as f64);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, out)?
            }
        };
        let rg = self.rg(&[a]);
        let op = match kind {
            Reduce::Sum => Op::Sum(a, axis),
            Reduce::Mean => Op::Mean(a, axis),
        };
        Ok(self.push(value, op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(Reduce::Mean, a, None).expect("full reduction")
    }

    /// Column means of an `n×d` matrix as a `1×d` row, invariant to row order
    /// down to the last bit: each column is summed in sorted order.
    pub fn set_mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "set_mean_rows",
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        let (n, d) = (t.rows(), t.cols());
        let mut col = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(d);
        for j in 0..d {
            col.clear();
            col.extend((0..n).map(|i| t.at(i, j)));
            col.sort_by(f64::total_cmp);
            out.push(col.iter().sum::<f64>() / n as f64);
        }
        let value = Tensor::new(vec![1, d], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SetMeanRows(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: self.shape(a).to_vec(),
                right: vec![],
            });
        }
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `n×n` matrix with the `n` values of `a` on its diagonal.
    pub fn diag(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let n = v.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &x) in v.iter().enumerate() {
            t.data_mut()[i * n + i] = x;
        }
        let rg = self.rg(&[a]);
        self.push(t, Op::Diag(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Shape {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?;
        let cols = self.shape(*first).get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(*first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows of `a` at `indices` (repeats allowed), as a `len(indices)×d` matrix.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || indices.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                left: t.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::Domain {
                    op: "gather_rows",
                    detail: format!("row {i} out of range for {} rows", t.rows()),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), t.cols()], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Forward identity whose backward contributes nothing to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let idx = self.detached.len();
        let value = match self.replay.as_ref().and_then(|r| r.get(idx)) {
            Some(frozen) if frozen.shape() == self.shape(a) => frozen.clone(),
            _ => self.value(a).clone(),
        };
        self.detached.push(value.clone());
        let v = self.push(value, Op::StopGradient, false);
        self.nodes[v.0].stop_gradient = true;
        v
    }

    /// Multiplies `a` by a constant tensor.
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Inverted dropout. Identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Domain {
                op: "dropout",
                detail: format!("rate {rate} must be below 1"),
            });
        }
        let keep = 1.0 - rate;
        let shape = self.shape(a).to_vec();
        let mut mask = Tensor::zeros(&shape);
        for m in mask.data_mut() {
            if rng.gen::<f64>() >= rate {
                *m = 1.0 / keep;
            }
        }
        self.mask(a, mask)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let (n, c) = (t.rows(), t.cols());
        let mut probs = Tensor::zeros(&[n, c]);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Label { label: y, classes: c });
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for (j, &z) in row.iter().enumerate() {
                probs.data_mut()[i * c + j] = (z - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Accumulates d(loss)/d(leaf) into every trainable leaf reachable from
    /// `loss` without crossing a stop-gradient node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad || node.stop_gradient {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                op => self.propagate(op, &node.value, g, &mut local)?,
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, local: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    send(*a, g.matmul(&bv.transpose())?);
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, av.transpose().matmul(&g)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|x| -x));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.zip_map(bv, |x, y| x / y));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                send(*b, Tensor::new(g.shape().to_vec(), gb)?);
            }
            Op::AddScalar(a) => send(*a, g),
            Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
            Op::Neg(a) => send(*a, g.map(|x| -x)),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |gi, y| gi * y * (1.0 - y))),
            Op::Relu(a) => send(*a, g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 })),
            Op::Powf(a, p) => send(*a, g.zip_map(self.value(*a), |gi, x| gi * p * x.powf(p - 1.0))),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let is_mean = matches!(op, Op::Mean(..));
                let t = match axis {
                    None => {
                        let n = shape.iter().product::<usize>() as f64;
                        let v = if is_mean { g.item() / n } else { g.item() };
                        Tensor::full(&shape, v)
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(&shape, *ax)?;
                        let div = if is_mean { len as f64 } else { 1.0 };
                        let mut data = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    data[(o * len + l) * inner + i] = g.data()[o * inner + i] / div;
                                }
                            }
                        }
                        Tensor::new(shape, data)?
                    }
                };
                send(*a, t);
            }
            Op::SetMeanRows(a) => {
                let shape = self.shape(*a).to_vec();
                let n = shape[0] as f64;
                let mut t = Tensor::zeros(&shape);
                let d = shape[1];
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    *x = g.data()[i % d] / n;
                }
                send(*a, t);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                send(*a, g.reshaped(&shape)?);
            }
            Op::Diag(a) => {
                let shape = self.shape(*a).to_vec();
                let n = g.rows();
                let d: Vec<f64> = (0..n).map(|i| g.at(i, i)).collect();
                send(*a, Tensor::new(shape, d)?);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let n = shape[0] * cols;
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    send(p, Tensor::new(shape, slice)?);
                }
            }
            Op::GatherRows(a, indices) => {
                let shape = self.shape(*a).to_vec();
                let cols = shape[1];
                let mut t = Tensor::zeros(&shape);
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut t.data_mut()[i * cols..(i + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                send(*a, t);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let n = labels.len() as f64;
                let c = probs.cols();
                let scale = g.item() / n;
                let mut t = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    t.data_mut()[i * c + y] -= 1.0;
                }
                send(*logits, t.map(|x| x * scale));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}
