//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Graph`]. Nodes are stored in execution order, so walking the tape
//! backwards from the loss is a valid reverse topological order and visits
//! each node once.

use std::cell::RefCell;

use super::tensor::{gemm, gemm_into, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Powf(usize, f64),
    Ln(usize),
    Exp(usize),
    Sum(usize),
    Mean(usize),
    SumAxis0(usize),
    MeanAxis0(usize),
    SumAxis1(usize),
    VarAxis0(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Concat(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Matmul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            Transpose(a) | Scale(a, _) | AddScalar(a) | Relu(a) | Abs(a) | Square(a)
            | Powf(a, _) | Ln(a) | Exp(a) | Sum(a) | Mean(a) | SumAxis0(a) | MeanAxis0(a)
            | SumAxis1(a) | VarAxis0(a) | Softmax(a) | LogSoftmax(a) | GatherRows(a, _)
            | Reshape(a) => vec![*a],
            Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// Records executed operations for a later [`Graph::backward`] pass.
pub struct Graph {
    inner: RefCell<Inner>,
    consume_once: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that may be differentiated repeatedly; leaf gradients accumulate.
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner::default()),
            consume_once: false,
        }
    }

    /// A graph whose second `backward` call is an error.
    pub fn consume_once() -> Self {
        Graph {
            inner: RefCell::new(Inner::default()),
            consume_once: true,
        }
    }

    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>> {
        self.param(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.param(value, false)
    }

    pub fn param(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        value.ensure_finite("leaf")?;
        let mut g = self.inner.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        g.leaf_grads.push(None);
        Ok(Var { graph: self, id })
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.inner.borrow();
        let node = &g.nodes[var.id];
        g.leaf_grads[var.id]
            .as_ref()
            .map(|d| Tensor::new(node.value.shape().to_vec(), d.clone()).unwrap())
    }

    pub fn zero_grad(&self) {
        let mut g = self.inner.borrow_mut();
        for slot in g.leaf_grads.iter_mut() {
            *slot = None;
        }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        value.ensure_finite(name)?;
        let mut g = self.inner.borrow_mut();
        let requires_grad = op.parents().iter().any(|&p| g.nodes[p].requires_grad);
        let id = g.nodes.len();
        g.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        g.leaf_grads.push(None);
        Ok(Var { graph: self, id })
    }

    /// Propagates d`loss`/d`leaf` into every leaf created with `requires_grad`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut g = self.inner.borrow_mut();
        if !g.nodes[loss.id].value.is_scalar() {
            return Err(Error::NotScalar(g.nodes[loss.id].value.shape().to_vec()));
        }
        if self.consume_once && g.consumed {
            return Err(Error::GraphConsumed);
        }
        g.consumed = true;
        if !g.nodes[loss.id].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &g.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut g.leaf_grads[id];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, d)| *a += d),
                    None => *slot = Some(gout),
                }
                continue;
            }
            propagate(&g.nodes, id, &gout, &mut grads);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut grads[id];
    let buf = slot.get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(buf);
}

fn dims(t: &Tensor) -> (usize, usize) {
    if t.shape().len() == 1 {
        (1, t.shape()[0])
    } else {
        (t.rows(), t.len() / t.rows())
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = dims(&nodes[*a].value);
            let n = nodes[*b].value.cols();
            accumulate(grads, nodes, *a, |d| gemm_into(g, false, val(*b), true, d, m, n, k, 1.0));
            accumulate(grads, nodes, *b, |d| gemm_into(val(*a), true, g, false, d, k, m, n, 1.0));
        }
        Op::Transpose(a) => {
            let (m, n) = dims(&nodes[*a].value);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * vb[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * va[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            let (_, n) = dims(&nodes[*a].value);
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::MulRow(a, b) => {
            let (_, n) = dims(&nodes[*a].value);
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i] * vb[i % n];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for (i, (gi, ai)) in g.iter().zip(va).enumerate() {
                    d[i % n] += gi * ai;
                }
            });
        }
        Op::MulCol(a, b) => {
            let (_, n) = dims(&nodes[*a].value);
            let (va, vb) = (val(*a), val(*b));
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i] * vb[i / n];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for (i, (gi, ai)) in g.iter().zip(va).enumerate() {
                    d[i / n] += gi * ai;
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, |d| add_into(d, g)),
        Op::Relu(a) => {
            let va = val(*a);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    if va[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Abs(a) => {
            let va = val(*a);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    if va[i] > 0.0 {
                        d[i] += g[i];
                    } else if va[i] < 0.0 {
                        d[i] -= g[i];
                    }
                }
            });
        }
        Op::Square(a) => {
            let va = val(*a);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += 2.0 * va[i] * g[i];
                }
            });
        }
        Op::Powf(a, p) => {
            let va = val(*a);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += p * va[i].powf(p - 1.0) * g[i];
                }
            });
        }
        Op::Ln(a) => {
            let va = val(*a);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / va[i];
                }
            });
        }
        Op::Exp(a) => {
            let vo = out.data();
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * vo[i];
                }
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.len() as f64;
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::SumAxis0(a) | Op::MeanAxis0(a) => {
            let (m, n) = dims(&nodes[*a].value);
            let s = if matches!(nodes[id].op, Op::MeanAxis0(_)) {
                1.0 / m as f64
            } else {
                1.0
            };
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += s * g[i % n];
                }
            });
        }
        Op::SumAxis1(a) => {
            let (_, n) = dims(&nodes[*a].value);
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i / n];
                }
            });
        }
        Op::VarAxis0(a) => {
            let (m, n) = dims(&nodes[*a].value);
            let va = val(*a);
            let mean = column_means(va, m, n);
            accumulate(grads, nodes, *a, |d| {
                for (i, x) in d.iter_mut().enumerate() {
                    let j = i % n;
                    *x += g[j] * 2.0 * (va[i] - mean[j]) / m as f64;
                }
            });
        }
        Op::Softmax(a) => {
            let (_, n) = dims(out);
            let y = out.data();
            accumulate(grads, nodes, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let (_, n) = dims(out);
            let y = out.data();
            accumulate(grads, nodes, *a, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..n {
                        drow[j] += grow[j] - yrow[j].exp() * total;
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let (m, n) = dims(out);
            let mut offset = 0;
            for &p in parts {
                let w = dims(&nodes[p].value).1;
                accumulate(grads, nodes, p, |d| {
                    for i in 0..m {
                        add_into(&mut d[i * w..(i + 1) * w], &g[i * n + offset..i * n + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::GatherRows(a, idx) => {
            let (_, n) = dims(&nodes[*a].value);
            accumulate(grads, nodes, *a, |d| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                }
            });
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn column_means(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut mean = vec![0.0; n];
    for row in data.chunks(n) {
        add_into(&mut mean, row);
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    mean
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Result<Var<'g>> {
        self.graph.constant(self.value())
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn map(&self, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let value = {
            let g = self.graph.inner.borrow();
            let a = &g.nodes[self.id].value;
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())?
        };
        self.graph.push(value, op, name)
    }

    fn zip(
        &self,
        other: Var<'g>,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let g = self.graph.inner.borrow();
            let (a, b) = (&g.nodes[self.id].value, &g.nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.graph.push(value, op, name)
    }

    /// Applies `f(x, b[j])` across each row of a matrix against a vector,
    /// or `f(x, b[i])` down columns when `per_row` is false.
    fn broadcast(
        &self,
        other: Var<'g>,
        per_row: bool,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let g = self.graph.inner.borrow();
            let (a, b) = (&g.nodes[self.id].value, &g.nodes[other.id].value);
            let (m, n) = dims(a);
            let expected = if per_row { n } else { m };
            if b.len() != expected || a.shape().len() != 2 {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let bv = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, if per_row { bv[i % n] } else { bv[i / n] }))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.graph.push(value, op, name)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let value = {
            let g = self.graph.inner.borrow();
            let (a, b) = (&g.nodes[self.id].value, &g.nodes[other.id].value);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::new(vec![m, n], gemm(a.data(), b.data(), m, k, n))?
        };
        self.graph.push(value, Op::Matmul(self.id, other.id), "matmul")
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let value = {
            let g = self.graph.inner.borrow();
            let a = &g.nodes[self.id].value;
            if a.shape().len() != 2 {
                return Err(Error::InvalidShape {
                    shape: a.shape().to_vec(),
                    reason: "transpose needs a matrix".into(),
                });
            }
            a.transpose()
        };
        self.graph.push(value, Op::Transpose(self.id), "transpose")
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip(other, Op::Add(self.id, other.id), "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip(other, Op::Sub(self.id, other.id), "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip(other, Op::Mul(self.id, other.id), "mul", |a, b| a * b)
    }

    /// `self[m,n] + bias[n]` on every row.
    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.broadcast(bias, true, Op::AddRow(self.id, bias.id), "add_row", |a, b| a + b)
    }

    /// `self[m,n] * scale[n]` on every row.
    pub fn mul_row(&self, scale: Var<'g>) -> Result<Var<'g>> {
        self.broadcast(scale, true, Op::MulRow(self.id, scale.id), "mul_row", |a, b| a * b)
    }

    /// `self[m,n] * scale[m]`, one factor per row.
    pub fn mul_col(&self, scale: Var<'g>) -> Result<Var<'g>> {
        self.broadcast(scale, false, Op::MulCol(self.id, scale.id), "mul_col", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        self.map(Op::Scale(self.id, s), "scale", |x| s * x)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var<'g>> {
        self.map(Op::AddScalar(self.id), "add_scalar", |x| x + s)
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.map(Op::Relu(self.id), "relu", |x| x.max(0.0))
    }

    pub fn abs(&self) -> Result<Var<'g>> {
        self.map(Op::Abs(self.id), "abs", f64::abs)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.map(Op::Square(self.id), "square", |x| x * x)
    }

    pub fn powf(&self, p: f64) -> Result<Var<'g>> {
        self.map(Op::Powf(self.id, p), "powf", |x| x.powf(p))
    }

    pub fn ln(&self) -> Result<Var<'g>> {
        self.map(Op::Ln(self.id), "ln", f64::ln)
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.map(Op::Exp(self.id), "exp", f64::exp)
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Result<Var<'g>> {
        let s: f64 = self.value().data().iter().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let t = self.value();
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Column sums of a matrix: `[m,n] -> [n]`.
    pub fn sum_axis0(&self) -> Result<Var<'g>> {
        let t = self.value();
        let (_, n) = dims(&t);
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            add_into(&mut out, row);
        }
        self.graph.push(Tensor::vector(out), Op::SumAxis0(self.id), "sum_axis0")
    }

    /// Column means of a matrix: `[m,n] -> [n]`.
    pub fn mean_axis0(&self) -> Result<Var<'g>> {
        let t = self.value();
        let (m, n) = dims(&t);
        let out = column_means(t.data(), m, n);
        self.graph.push(Tensor::vector(out), Op::MeanAxis0(self.id), "mean_axis0")
    }

    /// Row sums of a matrix: `[m,n] -> [m]`.
    pub fn sum_axis1(&self) -> Result<Var<'g>> {
        let t = self.value();
        let (_, n) = dims(&t);
        let out = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.graph.push(Tensor::vector(out), Op::SumAxis1(self.id), "sum_axis1")
    }

    /// Population variance of each column: `[m,n] -> [n]`.
    pub fn variance_axis0(&self) -> Result<Var<'g>> {
        let t = self.value();
        let (m, n) = dims(&t);
        let mean = column_means(t.data(), m, n);
        let mut out = vec![0.0; n];
        for row in t.data().chunks(n) {
            for j in 0..n {
                let d = row[j] - mean[j];
                out[j] += d * d;
            }
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        self.graph.push(Tensor::vector(out), Op::VarAxis0(self.id), "variance_axis0")
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let t = self.value();
        let (_, n) = dims(&t);
        let data = t.data().chunks(n).flat_map(super::tensor::softmax_row).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.graph.push(value, Op::Softmax(self.id), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Var<'g>> {
        let t = self.value();
        let (_, n) = dims(&t);
        let data = t
            .data()
            .chunks(n)
            .flat_map(super::tensor::log_softmax_row)
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.graph.push(value, Op::LogSoftmax(self.id), "log_softmax")
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "concat of zero tensors".into(),
        })?;
        let graph = first.graph;
        let value = {
            let g = graph.inner.borrow();
            let m = g.nodes[first.id].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                first.same_graph(p);
                let t = &g.nodes[p.id].value;
                if t.shape().len() != 2 || t.rows() != m {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: g.nodes[first.id].value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                widths.push(t.cols());
            }
            let n: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for p in parts {
                    data.extend_from_slice(g.nodes[p.id].value.row(i));
                }
            }
            Tensor::new(vec![m, n], data)?
        };
        graph.push(value, Op::Concat(parts.iter().map(|p| p.id).collect()), "concat")
    }

    /// Selects rows of a matrix, repeats allowed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g>> {
        let value = {
            let g = self.graph.inner.borrow();
            let a = &g.nodes[self.id].value;
            let (m, n) = dims(a);
            let mut data = Vec::with_capacity(index.len() * n);
            for &i in index {
                if i >= m {
                    return Err(Error::IndexOutOfRange {
                        what: "gather_rows",
                        index: i,
                        bound: m,
                    });
                }
                data.extend_from_slice(&a.data()[i * n..(i + 1) * n]);
            }
            Tensor::new(vec![index.len(), n], data)?
        };
        self.graph
            .push(value, Op::GatherRows(self.id, index.to_vec()), "gather_rows")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshaped(shape)?;
        self.graph.push(value, Op::Reshape(self.id), "reshape")
    }
}
