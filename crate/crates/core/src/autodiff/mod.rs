//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation executed through a [`Var`]. Leaves are
//! created either as trainable parameters ([`Tape::param`]) or as constants
//! ([`Tape::constant`]); constants never receive gradients, which is how
//! teacher outputs and memory-bank entries are kept out of backpropagation.
//!
//! Only the operations needed by the training objective are provided.
//! Every operation checks shapes eagerly and returns [`Error::ShapeMismatch`]
//! instead of panicking.

mod gradcheck;

use std::cell::RefCell;
use std::collections::BTreeMap;

pub use gradcheck::{gradcheck, gradcheck_many, GradcheckReport};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_FLOOR};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    MeanRows(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Dot(usize, usize),
    L2Normalize(usize, f64),
    RowCosine(usize, usize),
    ScaleRows(usize, usize),
    Softmax(usize, f64),
    LogSoftmax(usize, f64),
    LogSumExp(usize),
    Pick(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar with respect to the trainable leaves of a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no gradient reached it (constants,
    /// unreachable parameters).
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&var.id)
    }

    /// Gradient for `var`, zero-filled when absent.
    pub fn wrt_or_zero(&self, var: Var<'_>) -> Tensor {
        self.wrt(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn derived(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let requires_grad = self.requires(parents);
        self.push(value, op, requires_grad)
    }

    /// Backpropagates from a scalar `loss`.
    ///
    /// Nodes are visited once each, in reverse recording order, which is a
    /// valid reverse topological order because parents are always recorded
    /// before their children.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            let mut send = |target: usize, delta: Vec<f64>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(y.shape().to_vec(), g).expect("gradient shape");
                    out.by_leaf.insert(id, t);
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = as_matrix_left(av);
                    let n = bv.numel() / k;
                    let ad = av.data();
                    let bd = bv.data();
                    if nodes[*a].requires_grad {
                        // dA = G Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bd[p * n + j];
                                }
                                da[i * k + p] = s;
                            }
                        }
                        send(*a, da);
                    }
                    if nodes[*b].requires_grad {
                        // dB = Aᵀ G
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    send(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                    send(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
                Op::AddRow(a, b) => {
                    let n = nodes[*b].value.numel();
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    send(*b, db);
                    send(*a, g);
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect()),
                Op::Tanh(a) => send(*a, g.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
                Op::Relu(a) => send(*a, g.iter().zip(y.data()).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect()),
                Op::Sum(a) => send(*a, vec![g[0]; nodes[*a].value.numel()]),
                Op::MeanRows(a) => {
                    let av = &nodes[*a].value;
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j] / m as f64;
                        }
                    }
                    send(*a, da);
                }
                Op::Reshape(a) => send(*a, g),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p].value.numel();
                        send(p, g[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::Dot(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    send(*a, bv.iter().map(|b| g[0] * b).collect());
                    send(*b, av.iter().map(|a| g[0] * a).collect());
                }
                Op::L2Normalize(a, n) => {
                    // (I - u uᵀ) g / ‖v‖
                    let u = y.data();
                    let ug: f64 = u.iter().zip(&g).map(|(u, g)| u * g).sum();
                    send(*a, g.iter().zip(u).map(|(g, u)| (g - u * ug) / n).collect());
                }
                Op::RowCosine(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = vec![0.0; m * n];
                    let mut db = vec![0.0; m * n];
                    for i in 0..m {
                        let ar = av.row(i);
                        let br = bv.row(i);
                        let na = crate::tensor::norm(ar);
                        let nb = crate::tensor::norm(br);
                        let c = y.data()[i];
                        for j in 0..n {
                            let ua = ar[j] / na;
                            let ub = br[j] / nb;
                            da[i * n + j] = g[i] * (ub - c * ua) / na;
                            db[i * n + j] = g[i] * (ua - c * ub) / nb;
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::ScaleRows(a, s) => {
                    let av = &nodes[*a].value;
                    let sv = nodes[*s].value.data();
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = vec![0.0; m * n];
                    let mut ds = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i * n + j] * sv[i];
                            ds[i] += g[i * n + j] * av.data()[i * n + j];
                        }
                    }
                    send(*a, da);
                    send(*s, ds);
                }
                Op::Softmax(a, tau) => {
                    let p = y.data();
                    let pg: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
                    send(*a, p.iter().zip(&g).map(|(p, g)| p * (g - pg) / tau).collect());
                }
                Op::LogSoftmax(a, tau) => {
                    let gsum: f64 = g.iter().sum();
                    send(*a, y.data().iter().zip(&g).map(|(ly, g)| (g - ly.exp() * gsum) / tau).collect());
                }
                Op::LogSumExp(a) => {
                    let s = y.item();
                    send(*a, nodes[*a].value.data().iter().map(|v| g[0] * (v - s).exp()).collect());
                }
                Op::Pick(a, idx) => {
                    let mut da = vec![0.0; nodes[*a].value.numel()];
                    da[*idx] = g[0];
                    send(*a, da);
                }
            }
        }
        Ok(out)
    }
}

/// Interprets a rank-1 tensor as a single row.
fn as_matrix_left(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [k] => (1, *k),
        [m, k] => (*m, *k),
        _ => (1, t.numel()),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copies the current value onto the tape as a constant.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).expect("elementwise shape")
    }

    /// Matrix product. A rank-1 left operand is treated as a row and a
    /// rank-1 right operand as a column; the unit axis is dropped again.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (m, k) = as_matrix_left(a);
            let (kb, n) = match b.shape() {
                [k] => (*k, 1),
                [k, n] => (*k, *n),
                s => return Err(shape_err("matmul", a.shape(), s)),
            };
            if a.shape().len() > 2 || a.is_scalar() || k != kb {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let ad = a.data();
            let bd = b.data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    for j in 0..n {
                        out[i * n + j] += aip * bd[p * n + j];
                    }
                }
            }
            let shape = match (a.shape().len(), b.shape().len()) {
                (1, 1) => vec![],
                (1, _) => vec![n],
                (_, 1) => vec![m],
                _ => vec![m, n],
            };
            Tensor::new(shape, out).expect("matmul output")
        };
        Ok(self.tape.derived(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_with(&self, other: Var<'t>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_tape(&other);
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id].value;
        let b = &nodes[other.id].value;
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(a.shape().to_vec(), data).expect("elementwise shape"))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "add", |a, b| a + b)?;
        Ok(self.tape.derived(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "sub", |a, b| a - b)?;
        Ok(self.tape.derived(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.zip_with(other, "mul", |a, b| a * b)?;
        Ok(self.tape.derived(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix (or to a
    /// length-`n` vector).
    pub fn add_row(&self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[bias.id].value;
            if b.shape().len() != 1 || a.is_scalar() || a.cols() != b.numel() {
                return Err(shape_err("add_row", a.shape(), b.shape()));
            }
            let n = b.numel();
            let data = a.data().iter().enumerate().map(|(i, x)| x + b.data()[i % n]).collect();
            Tensor::new(a.shape().to_vec(), data).expect("add_row output")
        };
        Ok(self.tape.derived(value, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.map(|x| x * c);
        self.tape.derived(v, Op::Scale(self.id, c), &[self.id])
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.map(f64::tanh);
        self.tape.derived(v, Op::Tanh(self.id), &[self.id])
    }

    /// `max(x, 0)`; the subgradient at 0 is taken as 0.
    pub fn relu(&self) -> Var<'t> {
        let v = self.map(|x| x.max(0.0));
        self.tape.derived(v, Op::Relu(self.id), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let s: f64 = self.tape.nodes.borrow()[self.id].value.data().iter().sum();
        self.tape.derived(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Column mean of an `m×n` matrix, giving a length-`n` vector.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            if a.shape().len() != 2 {
                return Err(Error::ShapeMismatch(format!("mean_rows of {:?}", a.shape())));
            }
            let (m, n) = (a.rows(), a.cols());
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, x) in out.iter_mut().zip(a.row(i)) {
                    *o += x;
                }
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
            Tensor::vector(out)
        };
        Ok(self.tape.derived(value, Op::MeanRows(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.derived(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let tape = first.tape;
        let mut data = Vec::new();
        {
            let nodes = tape.nodes.borrow();
            for p in parts {
                first.same_tape(p);
                let v = &nodes[p.id].value;
                if v.shape().len() > 1 {
                    return Err(Error::ShapeMismatch(format!("concat of {:?}", v.shape())));
                }
                data.extend_from_slice(v.data());
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.derived(Tensor::vector(data), Op::Concat(ids.clone()), &ids))
    }

    pub fn dot(&self, other: Var<'t>) -> Result<Var<'t>> {
        let prod = self.zip_with(other, "dot", |a, b| a * b)?;
        if prod.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!("dot of {:?}", prod.shape())));
        }
        let s: f64 = prod.data().iter().sum();
        Ok(self.tape.derived(Tensor::scalar(s), Op::Dot(self.id, other.id), &[self.id, other.id]))
    }

    /// Unit-norm rescaling of a vector.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let (value, n) = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.shape().len() != 1 {
                return Err(Error::ShapeMismatch(format!("l2_normalize of {:?}", v.shape())));
            }
            let n = crate::tensor::norm(v.data());
            if n < NORM_FLOOR || !n.is_finite() {
                return Err(Error::DegenerateVector { norm: n });
            }
            (Tensor::vector(v.data().iter().map(|x| x / n).collect()), n)
        };
        Ok(self.tape.derived(value, Op::L2Normalize(self.id, n), &[self.id]))
    }

    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.l2_normalize()?.dot(other.l2_normalize()?)
    }

    /// Row-wise cosine similarity of two `m×n` matrices, giving a length-`m`
    /// vector.
    pub fn row_cosine(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape().len() != 2 || a.shape() != b.shape() {
                return Err(shape_err("row_cosine", a.shape(), b.shape()));
            }
            let mut out = Vec::with_capacity(a.rows());
            for i in 0..a.rows() {
                out.push(crate::tensor::cosine(a.row(i), b.row(i))?);
            }
            Tensor::vector(out)
        };
        Ok(self.tape.derived(value, Op::RowCosine(self.id, other.id), &[self.id, other.id]))
    }

    /// Multiplies row `i` of an `m×n` matrix by `weights[i]`.
    pub fn scale_rows(&self, weights: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weights);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let s = &nodes[weights.id].value;
            if a.shape().len() != 2 || s.shape() != [a.rows()] {
                return Err(shape_err("scale_rows", a.shape(), s.shape()));
            }
            let n = a.cols();
            let data = a.data().iter().enumerate().map(|(i, x)| x * s.data()[i / n]).collect();
            Tensor::new(a.shape().to_vec(), data).expect("scale_rows output")
        };
        Ok(self.tape.derived(value, Op::ScaleRows(self.id, weights.id), &[self.id, weights.id]))
    }

    fn check_vector(&self, name: &str) -> Result<()> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch(format!("{name} of {shape:?}")));
        }
        Ok(())
    }

    /// Softmax of `self / tau`.
    pub fn softmax(&self, tau: f64) -> Result<Var<'t>> {
        assert!(tau > 0.0, "temperature must be positive");
        self.check_vector("softmax")?;
        let v = Tensor::vector(crate::tensor::softmax(self.value().data(), tau));
        Ok(self.tape.derived(v, Op::Softmax(self.id, tau), &[self.id]))
    }

    /// Log-softmax of `self / tau`.
    pub fn log_softmax(&self, tau: f64) -> Result<Var<'t>> {
        assert!(tau > 0.0, "temperature must be positive");
        self.check_vector("log_softmax")?;
        let x = self.value();
        let scaled: Vec<f64> = x.data().iter().map(|z| z / tau).collect();
        let lse = crate::tensor::log_sum_exp(&scaled);
        let v = Tensor::vector(scaled.iter().map(|z| z - lse).collect());
        Ok(self.tape.derived(v, Op::LogSoftmax(self.id, tau), &[self.id]))
    }

    pub fn log_sum_exp(&self) -> Result<Var<'t>> {
        self.check_vector("log_sum_exp")?;
        let s = crate::tensor::log_sum_exp(self.value().data());
        Ok(self.tape.derived(Tensor::scalar(s), Op::LogSumExp(self.id), &[self.id]))
    }

    /// Single element of a vector as a scalar.
    pub fn pick(&self, index: usize) -> Result<Var<'t>> {
        self.check_vector("pick")?;
        let v = self.value();
        let x = *v.data().get(index).ok_or(Error::IndexOutOfRange { index, len: v.numel() })?;
        Ok(self.tape.derived(Tensor::scalar(x), Op::Pick(self.id, index), &[self.id]))
    }

    /// `-log softmax(self)[target]` for a logit vector.
    pub fn cross_entropy_with_logits(&self, target: usize) -> Result<Var<'t>> {
        Ok(self.log_softmax(1.0)?.pick(target)?.neg())
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}

/// Sum of scalar variables; `None` for an empty slice.
pub fn sum_scalars<'t>(terms: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    let mut iter = terms.iter();
    let Some(first) = iter.next() else { return Ok(None) };
    let mut acc = *first;
    for t in iter {
        acc = acc.add(*t)?;
    }
    Ok(Some(acc))
}
