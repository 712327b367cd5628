//! Eager reverse-mode differentiation over whole tensors.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. Node indices are therefore already a topological order, and
//! [`Tape::backward`] walks them from the loss down to index 0. A node used by
//! several consumers receives the sum of their contributions.

use std::collections::HashMap;

use super::kernels::{self, gemm, gemm_nt, gemm_tn};
use super::norm::{self, BatchStats, RunningStats};
use super::optim::{ParamId, ParameterStore};
use super::{sigmoid, Tensor, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    ClampedLog(Var),
    Softmax { x: Var, axis: usize },
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Pick(Var, usize),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Sum(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Whether the statistics came from the batch itself (train mode).
        batch_stats: bool,
    },
    Bce { pred: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input. No gradient is reported back for it beyond
    /// [`Gradients::get`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a trainable parameter. Repeated reads of the same parameter on
    /// one tape share a node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let key = (store.id(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(
            store.value(id).clone(),
            Op::Param {
                store: store.id(),
                id,
            },
        );
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = super::matmul(ta, tb)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `[r,c] x [c] -> [r]`
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        if tm.rank() != 2 || tv.rank() != 1 || tm.shape()[1] != tv.len() {
            return Err(shape_err("matvec", tm, tv));
        }
        let (r, c) = (tm.shape()[0], tm.shape()[1]);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                tm.data()[i * c..(i + 1) * c]
                    .iter()
                    .zip(tv.data())
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::MatVec(m, v)))
    }

    /// `[r] x [r,c] -> [c]`, i.e. a weighted sum of rows.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (tv, tm) = (self.value(v), self.value(m));
        if tm.rank() != 2 || tv.rank() != 1 || tm.shape()[0] != tv.len() {
            return Err(shape_err("vecmat", tv, tm));
        }
        let c = tm.shape()[1];
        let mut out = vec![0.0; c];
        gemm(tv.data(), tm.data(), &mut out, 1, tv.len(), c);
        Ok(self.push(Tensor::vector(out), Op::VecMat(v, m)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[c]` row vector to every row of a `[r,c]` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        if tm.rank() != 2 || tr.rank() != 1 || tm.shape()[1] != tr.len() {
            return Err(shape_err("add_row", tm, tr));
        }
        let c = tr.len();
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % c])
            .collect();
        let out = Tensor::new(tm.shape(), data)?;
        Ok(self.push(out, Op::AddRow(m, row)))
    }

    /// Sum of several same-shaped values.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms.first().ok_or(Error::Empty("add_n terms"))?;
        let mut out = self.value(*first).clone();
        for t in &terms[1..] {
            let tv = self.value(*t);
            if tv.shape() != out.shape() {
                return Err(shape_err("add_n", &out, tv));
            }
            for (o, x) in out.data_mut().iter_mut().zip(tv.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddN(terms.to_vec())))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        self.push(out, Op::Scale(a, k))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Natural log of a probability clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn clamped_log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln());
        self.push(out, Op::ClampedLog(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = super::softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax { x: a, axis }))
    }

    /// Softmax over the entries of a vector whose mask is `true`; masked
    /// entries get probability exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 || ta.len() != mask.len() {
            return Err(Error::DimMismatch {
                what: "attention mask length".into(),
                expected: ta.len(),
                found: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::AllMasked);
        }
        let max = ta
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = ta
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
            .collect();
        let sum: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= sum);
        Ok(self.push(Tensor::vector(out), Op::MaskedSoftmax(a)))
    }

    /// Log-softmax of a vector.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 1 {
            return Err(shape_err("log_softmax", ta, ta));
        }
        let max = ta.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ta.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let out = ta.map(|x| x - lse);
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    /// Element `index` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let ta = self.value(a);
        if index >= ta.len() {
            return Err(Error::InvalidArgument(format!(
                "pick index {index} out of range for length {}",
                ta.len()
            )));
        }
        let v = ta.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index)))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(shape_err("concat", t, t));
            }
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(out), Op::Concat(parts.to_vec())))
    }

    /// Stacks equally long vectors into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::Empty("stack_rows input"))?;
        let d = self.value(*first).len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != d {
                return Err(shape_err("stack_rows", self.value(*first), t));
            }
            out.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[rows.len(), d], out)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    /// Row `index` of a matrix (embedding lookup).
    pub fn row(&mut self, m: Var, index: usize) -> Result<Var> {
        let tm = self.value(m);
        if tm.rank() != 2 || index >= tm.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "row {index} out of range for shape {:?}",
                tm.shape()
            )));
        }
        let out = Tensor::vector(tm.row(index).to_vec());
        Ok(self.push(out, Op::Row(m, index)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Same-padded 3x3 convolution without activation,
    /// `[N,C,H,W] x [F,C,3,3] + [F] -> [N,F,H,W]`.
    pub fn conv2d_3x3_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv2d_3x3_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv2d { x, w, b }))
    }

    /// Convolution layer `sigmoid(W * z + b)` over every 3x3 window.
    pub fn conv2d_3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let lin = self.conv2d_3x3_linear(x, w, b)?;
        Ok(self.sigmoid(lin))
    }

    pub fn maxpool_2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_2x2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    /// Train-mode batch normalization over all axes but axis 1. Returns the
    /// output and the batch statistics so the caller can fold them into its
    /// running estimates.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, shift: Var) -> Result<(Var, BatchStats)> {
        let tx = self.value(x);
        let layout = norm::channel_layout(tx.shape())?;
        if layout.0 < 2 {
            return Err(Error::BatchTooSmall(layout.0));
        }
        self.check_affine(layout.1, scale, shift)?;
        let tx = self.value(x);
        let stats = norm::compute_stats(tx.data(), layout.0, layout.1, layout.2);
        let (out, xhat) = norm::normalize(
            tx.data(),
            layout,
            &stats.mean,
            &stats.var,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let inv_std = stats.var.iter().map(|v| 1.0 / (v + norm::BN_EPS).sqrt()).collect();
        let out = Tensor::new(tx.shape(), out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((v, stats))
    }

    /// Eval-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: &RunningStats,
    ) -> Result<Var> {
        let tx = self.value(x);
        let layout = norm::channel_layout(tx.shape())?;
        self.check_affine(layout.1, scale, shift)?;
        if running.channels() != layout.1 {
            return Err(Error::DimMismatch {
                what: "batch_norm running stats".into(),
                expected: layout.1,
                found: running.channels(),
            });
        }
        let tx = self.value(x);
        let (out, xhat) = norm::normalize(
            tx.data(),
            layout,
            &running.mean,
            &running.var,
            self.value(scale).data(),
            self.value(shift).data(),
        );
        let inv_std = running.var.iter().map(|v| 1.0 / (v + norm::BN_EPS).sqrt()).collect();
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    fn check_affine(&self, channels: usize, scale: Var, shift: Var) -> Result<()> {
        for (what, v) in [("batch_norm scale", scale), ("batch_norm shift", shift)] {
            if self.value(v).len() != channels {
                return Err(Error::DimMismatch {
                    what: what.into(),
                    expected: channels,
                    found: self.value(v).len(),
                });
            }
        }
        Ok(())
    }

    /// Mean binary cross-entropy of probabilities `pred` against `labels`,
    /// with probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_mean(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != labels.len() {
            return Err(Error::DimMismatch {
                what: "bce labels".into(),
                expected: tp.len(),
                found: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("bce batch"));
        }
        let loss = tp
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &l)| super::bce_loss(p, l))
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } => Some((store, id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, &self.nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                gemm_nt(g, tb.data(), slot!(*a), m, k, n);
                gemm_tn(ta.data(), g, slot!(*b), m, k, n);
            }
            Op::MatVec(m, v) => {
                let (tm, tv) = (val(*m), val(*v));
                let c = tv.len();
                let gm = slot!(*m);
                for (r, &gr) in g.iter().enumerate() {
                    for (j, &vj) in tv.data().iter().enumerate() {
                        gm[r * c + j] += gr * vj;
                    }
                }
                let gv = slot!(*v);
                for (r, &gr) in g.iter().enumerate() {
                    for j in 0..c {
                        gv[j] += tm.data()[r * c + j] * gr;
                    }
                }
            }
            Op::VecMat(v, m) => {
                let (tv, tm) = (val(*v), val(*m));
                let c = g.len();
                let gv = slot!(*v);
                for (r, gvr) in gv.iter_mut().enumerate() {
                    *gvr += tm.data()[r * c..(r + 1) * c]
                        .iter()
                        .zip(g)
                        .map(|(x, y)| x * y)
                        .sum::<f64>();
                }
                let gm = slot!(*m);
                for (r, &vr) in tv.data().iter().enumerate() {
                    for (j, &gj) in g.iter().enumerate() {
                        gm[r * c + j] += vr * gj;
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot!(*a), g);
                add_into(slot!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(slot!(*a), g);
                slot!(*b).iter_mut().zip(g).for_each(|(s, &x)| *s -= x);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                slot!(*a).iter_mut().zip(g.iter().zip(tb)).for_each(|(s, (x, y))| *s += x * y);
                slot!(*b).iter_mut().zip(g.iter().zip(ta)).for_each(|(s, (x, y))| *s += x * y);
            }
            Op::AddRow(m, row) => {
                add_into(slot!(*m), g);
                let gr = slot!(*row);
                let c = gr.len();
                for (k, &x) in g.iter().enumerate() {
                    gr[k % c] += x;
                }
            }
            Op::AddN(terms) => {
                for t in terms {
                    add_into(slot!(*t), g);
                }
            }
            Op::Scale(a, k) => {
                slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s += k * x);
            }
            Op::OneMinus(a) => {
                slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s -= x);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                slot!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (gx, y))| *s += gx * y * (1.0 - y));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                slot!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (gx, y))| *s += gx * (1.0 - y * y));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                slot!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (gx, y))| *s += gx * y);
            }
            Op::ClampedLog(a) => {
                let x = val(*a).data();
                slot!(*a).iter_mut().zip(g.iter().zip(x)).for_each(|(s, (gx, &p))| {
                    if p > PROB_EPS && p < 1.0 - PROB_EPS {
                        *s += gx / p;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = node.value.data();
                let gx = slot!(*x);
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| o * n * inner + j + k * inner;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                slot!(*x).iter_mut().zip(g.iter().zip(y)).for_each(|(s, (gk, yk))| *s += yk * (gk - dot));
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let total: f64 = g.iter().sum();
                slot!(*x)
                    .iter_mut()
                    .zip(g.iter().zip(y))
                    .for_each(|(s, (gk, yk))| *s += gk - yk.exp() * total);
            }
            Op::Pick(x, index) => {
                slot!(*x)[*index] += g[0];
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    add_into(slot!(*p), &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::StackRows(rows) => {
                let d = node.value.shape()[1];
                for (r, v) in rows.iter().enumerate() {
                    add_into(slot!(*v), &g[r * d..(r + 1) * d]);
                }
            }
            Op::Row(m, index) => {
                let c = g.len();
                add_into(&mut slot!(*m)[index * c..(index + 1) * c], g);
            }
            Op::Sum(a) => {
                slot!(*a).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Reshape(a) => add_into(slot!(*a), g),
            Op::Conv2d { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let mut gx = grads[x.0].take().unwrap_or_else(|| vec![0.0; tx.len()]);
                let mut gw = grads[w.0].take().unwrap_or_else(|| vec![0.0; tw.len()]);
                let mut gb = grads[b.0].take().unwrap_or_else(|| vec![0.0; val(*b).len()]);
                kernels::conv2d_3x3_backward(tx, tw, g, Some(&mut gx), Some(&mut gw), Some(&mut gb));
                grads[x.0] = Some(gx);
                grads[w.0] = Some(gw);
                grads[b.0] = Some(gb);
            }
            Op::MaxPool { x, argmax } => {
                let gx = slot!(*x);
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, inner) = norm::channel_layout(node.value.shape()).expect("validated on forward");
                let gamma = val(*scale).data().to_vec();
                let m = (n * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            sum_g[ch] += g[k];
                            sum_gx[ch] += g[k] * xhat[k];
                        }
                    }
                }
                add_into(slot!(*scale), &sum_gx);
                add_into(slot!(*shift), &sum_g);
                let gx = slot!(*x);
                for b in 0..n {
                    for ch in 0..c {
                        let inv = inv_std[ch];
                        for k in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            gx[k] += if *batch_stats {
                                // d/dx through the batch mean and variance
                                gamma[ch] * inv / m * (m * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch])
                            } else {
                                gamma[ch] * inv * g[k]
                            };
                        }
                    }
                }
            }
            Op::Bce { pred, labels } => {
                let p = val(*pred).data();
                let n = labels.len() as f64;
                slot!(*pred).iter_mut().zip(p.iter().zip(labels)).for_each(|(s, (&p, &l))| {
                    if p > PROB_EPS && p < 1.0 - PROB_EPS {
                        *s += g[0] * (-l / p + (1.0 - l) / (1.0 - p)) / n;
                    }
                });
            }
        }
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut Vec<f64> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(u64, ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter read from `store` into its
    /// gradient slots. Parameters of other stores are ignored.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(sid, id, node) in &self.params {
            if sid != store.id() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                add_into(&mut store.get_mut(id).grad, g);
            }
        }
    }

    /// Gradients for `store` flattened in parameter order, zero where a
    /// parameter was not read. Same layout as `ParameterStore::flat_grad`.
    pub fn flat_for(&self, store: &ParameterStore) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(store.len());
        let mut total = 0;
        for (_, p) in store.iter() {
            offsets.push(total);
            total += p.value.len();
        }
        let mut flat = vec![0.0; total];
        for &(sid, id, node) in &self.params {
            if sid != store.id() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                let o = offsets[id.index()];
                add_into(&mut flat[o..o + g.len()], g);
            }
        }
        flat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` at `x` (independent of the tape).
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let fp = f(&p);
                p[i] -= 2.0 * h;
                let fm = f(&p);
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < tol, "coordinate {i}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Checks d(loss)/d(input) for a unary tape function against finite
    /// differences.
    fn check_unary(shape: &[usize], seed: u64, f: impl Fn(&mut Tape, Var) -> Var) {
        let x0 = pseudo(shape.iter().product(), seed);
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::new(shape, x.to_vec()).unwrap());
            let out = f(&mut t, v);
            t.value(out).item()
        };
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(shape, x0.clone()).unwrap());
        let out = f(&mut t, v);
        let grads = t.backward(out).unwrap();
        assert_close(grads.get(v).unwrap(), &numeric_grad(&x0, eval), 1e-6);
    }

    // Weighted sum so that every output coordinate gets a distinct upstream gradient.
    fn weighted_sum(t: &mut Tape, v: Var) -> Var {
        let n = t.value(v).len();
        let shape = t.value(v).shape().to_vec();
        let w = t.constant(Tensor::new(&shape, pseudo(n, 99)).unwrap());
        let p = t.mul(v, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = Tensor::new(&[3, 2], pseudo(6, 5)).unwrap();
        check_unary(&[2, 3], 1, |t, a| {
            let bv = t.constant(b.clone());
            let m = t.matmul(a, bv).unwrap();
            t.sum(m)
        });
        let a = Tensor::new(&[2, 3], pseudo(6, 6)).unwrap();
        check_unary(&[3, 2], 2, |t, b| {
            let av = t.constant(a.clone());
            let m = t.matmul(av, b).unwrap();
            weighted_sum(t, m)
        });
    }

    #[test]
    fn matvec_and_vecmat_gradients() {
        let m = Tensor::new(&[3, 4], pseudo(12, 7)).unwrap();
        check_unary(&[4], 3, |t, v| {
            let mv = t.constant(m.clone());
            let o = t.matvec(mv, v).unwrap();
            weighted_sum(t, o)
        });
        check_unary(&[3, 4], 4, |t, mv| {
            let v = t.constant(Tensor::vector(pseudo(4, 8)));
            let o = t.matvec(mv, v).unwrap();
            weighted_sum(t, o)
        });
        check_unary(&[3], 5, |t, v| {
            let mv = t.constant(m.clone());
            let o = t.vecmat(v, mv).unwrap();
            weighted_sum(t, o)
        });
        check_unary(&[3, 4], 6, |t, mv| {
            let v = t.constant(Tensor::vector(pseudo(3, 9)));
            let o = t.vecmat(v, mv).unwrap();
            weighted_sum(t, o)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(&[5], 10, |t, x| {
            let s = t.sigmoid(x);
            weighted_sum(t, s)
        });
        check_unary(&[5], 11, |t, x| {
            let s = t.tanh(x);
            weighted_sum(t, s)
        });
        check_unary(&[5], 12, |t, x| {
            let s = t.exp(x);
            let o = t.one_minus(s);
            let o = t.scale(o, -1.7);
            weighted_sum(t, o)
        });
        check_unary(&[5], 13, |t, x| {
            let s = t.sigmoid(x);
            let l = t.clamped_log(s);
            weighted_sum(t, l)
        });
        check_unary(&[2, 3], 14, |t, x| {
            let y = t.constant(Tensor::new(&[2, 3], pseudo(6, 15)).unwrap());
            let a = t.mul(x, y).unwrap();
            let b = t.sub(a, x).unwrap();
            let c = t.add(b, y).unwrap();
            let r = t.constant(Tensor::vector(pseudo(3, 16)));
            let d = t.add_row(c, r).unwrap();
            weighted_sum(t, d)
        });
    }

    #[test]
    fn add_row_gradient_reaches_row() {
        check_unary(&[3], 17, |t, r| {
            let m = t.constant(Tensor::new(&[2, 3], pseudo(6, 18)).unwrap());
            let d = t.add_row(m, r).unwrap();
            let d = t.tanh(d);
            weighted_sum(t, d)
        });
    }

    #[test]
    fn softmax_family_gradients() {
        check_unary(&[6], 20, |t, x| {
            let s = t.softmax(x, 0).unwrap();
            weighted_sum(t, s)
        });
        check_unary(&[2, 3, 2], 21, |t, x| {
            let s = t.softmax(x, 1).unwrap();
            weighted_sum(t, s)
        });
        check_unary(&[5], 22, |t, x| {
            let s = t.masked_softmax(x, &[true, false, true, true, false]).unwrap();
            weighted_sum(t, s)
        });
        check_unary(&[5], 23, |t, x| {
            let s = t.log_softmax(x).unwrap();
            let p = t.pick(s, 2).unwrap();
            let q = t.pick(s, 4).unwrap();
            let r = t.add(p, q).unwrap();
            let w = weighted_sum(t, s);
            t.add(r, w).unwrap()
        });
    }

    #[test]
    fn structural_op_gradients() {
        check_unary(&[4], 30, |t, x| {
            let y = t.constant(Tensor::vector(pseudo(3, 31)));
            let c = t.concat(&[y, x, y]).unwrap();
            let c = t.tanh(c);
            weighted_sum(t, c)
        });
        check_unary(&[3], 32, |t, x| {
            let s = t.sigmoid(x);
            let m = t.stack_rows(&[x, s, x]).unwrap();
            let r = t.reshape(m, &[9]).unwrap();
            weighted_sum(t, r)
        });
        check_unary(&[4, 3], 33, |t, m| {
            let a = t.row(m, 1).unwrap();
            let b = t.row(m, 3).unwrap();
            let c = t.row(m, 1).unwrap();
            let s = t.add_n(&[a, b, c]).unwrap();
            weighted_sum(t, s)
        });
    }

    #[test]
    fn conv_and_pool_gradients() {
        let w = Tensor::new(&[3, 2, 3, 3], pseudo(54, 41)).unwrap();
        let b = Tensor::vector(pseudo(3, 42));
        check_unary(&[2, 2, 5, 4], 40, |t, x| {
            let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
            let c = t.conv2d_3x3(x, wv, bv).unwrap();
            let p = t.maxpool_2x2(c).unwrap();
            weighted_sum(t, p)
        });
        let x = Tensor::new(&[2, 2, 4, 3], pseudo(48, 43)).unwrap();
        check_unary(&[3, 2, 3, 3], 44, |t, wv| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            let c = t.conv2d_3x3(xv, wv, bv).unwrap();
            weighted_sum(t, c)
        });
        check_unary(&[3], 45, |t, bv| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let c = t.conv2d_3x3(xv, wv, bv).unwrap();
            weighted_sum(t, c)
        });
    }

    #[test]
    fn batch_norm_gradients_train_and_eval() {
        let scale = Tensor::vector(vec![1.3, 0.7]);
        let shift = Tensor::vector(vec![0.1, -0.4]);
        check_unary(&[3, 2, 2], 50, |t, x| {
            let (s, h) = (t.constant(scale.clone()), t.constant(shift.clone()));
            let (y, _) = t.batch_norm_train(x, s, h).unwrap();
            let y = t.sigmoid(y);
            weighted_sum(t, y)
        });
        let x0 = Tensor::new(&[3, 2, 2], pseudo(12, 51)).unwrap();
        check_unary(&[2], 52, |t, s| {
            let (xv, h) = (t.constant(x0.clone()), t.constant(shift.clone()));
            let (y, _) = t.batch_norm_train(xv, s, h).unwrap();
            let y = t.sigmoid(y);
            weighted_sum(t, y)
        });
        let rs = RunningStats {
            mean: vec![0.2, -0.1],
            var: vec![0.5, 2.0],
            momentum: 0.1,
        };
        check_unary(&[1, 2, 3], 53, |t, x| {
            let (s, h) = (t.constant(scale.clone()), t.constant(shift.clone()));
            let y = t.batch_norm_eval(x, s, h, &rs).unwrap();
            weighted_sum(t, y)
        });
    }

    #[test]
    fn bce_gradient() {
        check_unary(&[4], 60, |t, x| {
            let p = t.sigmoid(x);
            t.bce_mean(p, &[1.0, 0.0, 1.0, 0.0]).unwrap()
        });
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f(x) = g(x) + g(x) must have gradient 2 * grad g
        let g = |t: &mut Tape, x: Var| {
            let s = t.sigmoid(x);
            let m = t.mul(s, x).unwrap();
            t.sum(m)
        };
        let x0 = Tensor::vector(pseudo(4, 70));
        let mut t1 = Tape::new();
        let x1 = t1.constant(x0.clone());
        let g1 = g(&mut t1, x1);
        let single = t1.backward(g1).unwrap().get(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.constant(x0);
        let shared = g(&mut t2, x2);
        let doubled = t2.add(shared, shared).unwrap();
        let grads = t2.backward(doubled).unwrap();
        for (a, b) in grads.get(x2).unwrap().iter().zip(&single) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn params_accumulate_only_into_their_store() {
        let mut a = ParameterStore::new();
        let mut b = ParameterStore::new();
        let pa = a.add("w", Tensor::vector(vec![2.0]));
        let pb = b.add("w", Tensor::vector(vec![3.0]));
        let mut t = Tape::new();
        let va = t.param(&a, pa);
        let va2 = t.param(&a, pa);
        assert_eq!(va, va2);
        let vb = t.param(&b, pb);
        let prod = t.mul(va, vb).unwrap();
        let loss = t.sum(prod);
        let grads = t.backward(loss).unwrap();
        grads.accumulate_into(&mut a);
        assert_eq!(a.get(pa).grad, vec![3.0]);
        assert_eq!(b.get(pb).grad, vec![0.0]);
        grads.accumulate_into(&mut b);
        assert_eq!(b.get(pb).grad, vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(v).is_err());
    }

    #[test]
    fn masked_softmax_rejects_fully_masked() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.masked_softmax(v, &[false, false]), Err(Error::AllMasked)));
    }
}
