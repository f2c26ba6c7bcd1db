//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in insertion order, so insertion order
//! is a topological order and [`Graph::backward`] can walk the tape in reverse.
//! Graphs are single use: one backward pass consumes them.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Gather { table: usize, ids: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    Reshape(usize),
    MeanAxis1 { input: usize, len: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by one backward pass, indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&var.shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op: Op, value: Tensor, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents(&op).iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar loss. Visits nodes in strictly reverse
    /// insertion order and consumes the graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                for (parent, contrib) in local_grads(&nodes, node, &g)? {
                    if !nodes[parent].requires_grad {
                        continue;
                    }
                    accumulate(&mut grads[parent], contrib);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::BatchMatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Log(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Square(a)
        | Op::Clamp(a, _, _)
        | Op::Reshape(a) => vec![a],
        Op::Gather { table, .. } => vec![table],
        Op::MeanAxis1 { input, .. } => vec![input],
    }
}

fn local_grads(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |id: usize| &nodes[id].value;
    let zip_map = |t: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        let data = t.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    };
    let out = match node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let ga = matmul_raw(g, &transpose_raw(vb));
            let gb = matmul_raw(&transpose_raw(va), g);
            vec![(a, ga), (b, gb)]
        }
        Op::BatchMatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let ga = bmm_raw(g, &transpose_raw(vb));
            let gb = bmm_raw(&transpose_raw(va), g);
            vec![(a, ga), (b, gb)]
        }
        Op::Transpose(a) => vec![(a, transpose_raw(g))],
        Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let ga = zip_map(val(b), &|y, gy| y * gy);
            let gb = zip_map(val(a), &|x, gy| x * gy);
            vec![(a, ga), (b, gb)]
        }
        Op::AddRow(a, b) => {
            let m = val(b).len();
            let mut gb = vec![0.0; m];
            for row in g.data().chunks(m) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![(a, g.clone()), (b, Tensor::new(val(b).shape().to_vec(), gb)?)]
        }
        Op::Scale(a, c) => vec![(a, g.map(|v| v * c))],
        Op::Relu(a) => vec![(a, zip_map(val(a), &|x, gy| if x > 0.0 { gy } else { 0.0 }))],
        Op::Tanh(a) => vec![(a, zip_map(&node.value, &|t, gy| (1.0 - t * t) * gy))],
        Op::Gather { table, ref ids } => {
            let vt = val(table);
            let d = vt.shape()[1];
            let mut gt = Tensor::zeros(vt.shape());
            let buf = gt.data_mut();
            for (row, &id) in ids.iter().enumerate() {
                for k in 0..d {
                    buf[id * d + k] += g.data()[row * d + k];
                }
            }
            vec![(table, gt)]
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let cols = *y.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), out) in y
                .data()
                .chunks(cols)
                .zip(g.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let s: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, p), q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = p * (q - s);
                }
            }
            vec![(a, Tensor::new(y.shape().to_vec(), ga)?)]
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let cols = *y.shape().last().unwrap_or(&1);
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), out) in y
                .data()
                .chunks(cols)
                .zip(g.data().chunks(cols))
                .zip(ga.chunks_mut(cols))
            {
                let s: f64 = gr.iter().sum();
                for ((o, ly), q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = q - ly.exp() * s;
                }
            }
            vec![(a, Tensor::new(y.shape().to_vec(), ga)?)]
        }
        Op::Log(a) => vec![(a, zip_map(val(a), &|x, gy| gy / x))],
        Op::Sum(a) => {
            let gv = g.data()[0];
            vec![(a, Tensor::full(val(a).shape(), gv))]
        }
        Op::Mean(a) => {
            let n = val(a).len() as f64;
            let gv = g.data()[0] / n;
            vec![(a, Tensor::full(val(a).shape(), gv))]
        }
        Op::Square(a) => vec![(a, zip_map(val(a), &|x, gy| 2.0 * x * gy))],
        Op::Clamp(a, lo, hi) => vec![(
            a,
            zip_map(val(a), &|x, gy| if x >= lo && x <= hi { gy } else { 0.0 }),
        )],
        Op::Reshape(a) => vec![(a, g.clone().reshaped(val(a).shape().to_vec())?)],
        Op::MeanAxis1 { input, len } => {
            let shape = val(input).shape().to_vec();
            let (b, d) = (shape[0], shape[2]);
            let mut gi = vec![0.0; val(input).len()];
            let inv = 1.0 / len as f64;
            for bi in 0..b {
                for l in 0..len {
                    for k in 0..d {
                        gi[(bi * len + l) * d + k] = g.data()[bi * d + k] * inv;
                    }
                }
            }
            vec![(input, Tensor::new(shape, gi)?)]
        }
    };
    Ok(out)
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out).expect("matmul shape")
}

fn bmm_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let m = b.shape()[2];
    let mut out = Vec::with_capacity(bs * n * m);
    for i in 0..bs {
        let ai = Tensor::new(vec![n, k], a.data()[i * n * k..(i + 1) * n * k].to_vec()).unwrap();
        let bi = Tensor::new(vec![k, m], b.data()[i * k * m..(i + 1) * k * m].to_vec()).unwrap();
        out.extend(matmul_raw(&ai, &bi).into_data());
    }
    Tensor::new(vec![bs, n, m], out).expect("bmm shape")
}

/// Swaps the last two axes of a 2-D or 3-D tensor.
fn transpose_raw(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let (r, c) = (shape[nd - 2], shape[nd - 1]);
    let batch: usize = shape[..nd - 2].iter().product();
    let mut out = vec![0.0; t.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = t.data()[base + i * c + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(nd - 2, nd - 1);
    Tensor::new(new_shape, out).expect("transpose shape")
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = *t.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; t.len()];
    for (row, o) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (x - m).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("softmax shape")
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let cols = *t.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; t.len()];
    for (row, o) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = x - lse;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("log_softmax shape")
}

/// Row-wise softmax over the last axis, outside any graph.
pub fn softmax(t: &Tensor) -> Tensor {
    softmax_rows(t)
}

/// Row-wise log-softmax over the last axis, outside any graph.
pub fn log_softmax(t: &Tensor) -> Tensor {
    log_softmax_rows(t)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_ref(self.id).shape().to_vec()
    }

    /// Scalar value, if this node holds exactly one element.
    pub fn item(&self) -> Option<f64> {
        self.graph.value_ref(self.id).item()
    }

    fn same_graph(&self, other: &Var<'g>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands belong to different graphs"))
        }
    }

    fn unary(&self, op: Op, name: &'static str, f: impl Fn(&Tensor) -> Tensor) -> Result<Var<'g>> {
        let out = f(&self.graph.value_ref(self.id));
        self.graph.push(op, out, name)
    }

    fn elementwise(
        &self,
        other: &Var<'g>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other, name)?;
        let out = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.graph.push(op, out, name)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other, "matmul")?;
        let out = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            matmul_raw(&a, &b)
        };
        self.graph.push(Op::MatMul(self.id, other.id), out, "matmul")
    }

    /// `[b, n, k] x [b, k, m] -> [b, n, m]`.
    pub fn batch_matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other, "batch_matmul")?;
        let out = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(other.id);
            if a.ndim() != 3
                || b.ndim() != 3
                || a.shape()[0] != b.shape()[0]
                || a.shape()[2] != b.shape()[1]
            {
                return Err(Error::shape(
                    "batch_matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            bmm_raw(&a, &b)
        };
        self.graph
            .push(Op::BatchMatMul(self.id, other.id), out, "batch_matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        if self.shape().len() < 2 {
            return Err(Error::shape("transpose", "needs at least 2 dims"));
        }
        self.unary(Op::Transpose(self.id), "transpose", transpose_raw)
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, Op::Add(self.id, other.id), "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, Op::Sub(self.id, other.id), "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, Op::Mul(self.id, other.id), "mul", |x, y| x * y)
    }

    /// Adds a vector to every row (bias add).
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(bias, "add_row")?;
        let out = {
            let a = self.graph.value_ref(self.id);
            let b = self.graph.value_ref(bias.id);
            let m = b.len();
            if b.ndim() != 1 || a.shape().last() != Some(&m) {
                return Err(Error::shape(
                    "add_row",
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(m) {
                for (x, y) in row.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.graph.push(Op::AddRow(self.id, bias.id), out, "add_row")
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(self.id, c), "scale", |t| t.map(|v| v * c))
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(Op::Relu(self.id), "relu", |t| t.map(|v| v.max(0.0)))
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary(Op::Tanh(self.id), "tanh", |t| t.map(f64::tanh))
    }

    /// Gathers rows of a `[rows, d]` table: output `[ids.len(), d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        let out = {
            let t = self.graph.value_ref(self.id);
            if t.ndim() != 2 {
                return Err(Error::shape("gather_rows", "table must be 2-D"));
            }
            let (rows, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "embedding table",
                        index: id,
                        size: rows,
                    });
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        let op = Op::Gather {
            table: self.id,
            ids: ids.to_vec(),
        };
        self.graph.push(op, out, "gather_rows")
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        self.unary(Op::Softmax(self.id), "softmax", softmax_rows)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'g>> {
        self.unary(Op::LogSoftmax(self.id), "log_softmax", log_softmax_rows)
    }

    pub fn ln(&self) -> Result<Var<'g>> {
        self.unary(Op::Log(self.id), "log", |t| t.map(f64::ln))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        self.unary(Op::Sum(self.id), "sum", |t| {
            Tensor::scalar(t.data().iter().sum())
        })
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        self.unary(Op::Mean(self.id), "mean", |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        })
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary(Op::Square(self.id), "square", |t| t.map(|v| v * v))
    }

    /// Clamps every entry into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'g>> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(Op::Clamp(self.id, lo, hi), "clamp", |t| {
            t.map(|v| v.clamp(lo, hi))
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.graph.value_ref(self.id).clone().reshaped(shape.to_vec())?;
        self.graph.push(Op::Reshape(self.id), out, "reshape")
    }

    /// `[b, l, d] -> [b, d]`, averaging over the middle axis.
    pub fn mean_axis1(&self) -> Result<Var<'g>> {
        let (out, len) = {
            let t = self.graph.value_ref(self.id);
            if t.ndim() != 3 {
                return Err(Error::shape("mean_axis1", format!("{:?}", t.shape())));
            }
            let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = vec![0.0; b * d];
            for bi in 0..b {
                for li in 0..l {
                    for k in 0..d {
                        out[bi * d + k] += t.data()[(bi * l + li) * d + k];
                    }
                }
            }
            let inv = 1.0 / l as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            (Tensor::new(vec![b, d], out)?, l)
        };
        let op = Op::MeanAxis1 {
            input: self.id,
            len,
        };
        self.graph.push(op, out, "mean_axis1")
    }
}

/// Default finite-difference step for [`hvp`]: `1e-4 * (1 + |x|_inf)`.
pub fn default_hvp_eps(x: &[f64]) -> f64 {
    1e-4 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Central-difference Hessian-vector product
/// `(grad(x + eps v) - grad(x - eps v)) / (2 eps)`.
pub fn hvp<F>(mut grad: F, x: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != x.len() {
        return Err(Error::shape("hvp", format!("x has {} entries, v has {}", x.len(), v.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("hvp eps must be positive, got {eps}")));
    }
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + eps * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - eps * b).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    let out: Vec<f64> = gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * eps))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hvp" });
    }
    Ok(out)
}
