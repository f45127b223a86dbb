//! Tape of recorded tensor operations and the reverse sweep over it.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so inputs always precede outputs and the reverse sweep is
//! a single backwards walk over the node list.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Var, Var, usize),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var),
    RepeatCols(Var, usize),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable input; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value with no path back into the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`Graph::backward`]; `None` if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::from_parts_unchecked(self.nodes[v.0].value.shape().to_vec(), g.clone())
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.value(a).dims2()?;
        let (q2, r) = self.value(b).dims2()?;
        if q != q2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::from_parts_unchecked(vec![p, r], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), value, rg))
    }

    /// Reinterprets the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Joins two matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let value = match axis {
            0 if ca == cb => {
                let mut out = Vec::with_capacity((ra + rb) * ca);
                out.extend_from_slice(da);
                out.extend_from_slice(db);
                Tensor::from_parts_unchecked(vec![ra + rb, ca], out)
            }
            1 if ra == rb => {
                let mut out = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
                    out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
                }
                Tensor::from_parts_unchecked(vec![ra, ca + cb], out)
            }
            _ => {
                return Err(Error::Dimension(format!(
                    "concat of {:?} and {:?} along axis {axis}",
                    self.value(a).shape(),
                    self.value(b).shape()
                )))
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Concat(a, b, axis), value, rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!(
                "rows {start}..{} of a {r}×{c} matrix",
                start + len
            )));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::from_parts_unchecked(vec![len, c], data);
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows(a, start), value, rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Dimension("stack_rows of nothing".into()))?;
        rest.iter()
            .try_fold(first, |acc, &p| self.concat(acc, p, 0))
    }

    /// Tiles a `1×c` row vector into `n×c`.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let (r, c) = self.value(v).dims2()?;
        if r != 1 || n == 0 {
            return Err(Error::Dimension(format!(
                "repeat_rows needs a 1×c row and n > 0, got {:?}",
                self.value(v).shape()
            )));
        }
        let row = self.value(v).data();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(row);
        }
        let value = Tensor::from_parts_unchecked(vec![n, c], out);
        let rg = self.rg(&[v]);
        Ok(self.push(Op::RepeatRows(v), value, rg))
    }

    /// Tiles an `r×1` column vector into `r×n`.
    pub fn repeat_cols(&mut self, v: Var, n: usize) -> Result<Var> {
        let (r, c) = self.value(v).dims2()?;
        if c != 1 || n == 0 {
            return Err(Error::Dimension(format!(
                "repeat_cols needs an r×1 column and n > 0, got {:?}",
                self.value(v).shape()
            )));
        }
        let col = self.value(v).data();
        let mut out = Vec::with_capacity(r * n);
        for &x in col {
            out.extend(std::iter::repeat(x).take(n));
        }
        let value = Tensor::from_parts_unchecked(vec![r, n], out);
        let rg = self.rg(&[v]);
        Ok(self.push(Op::RepeatCols(v, n), value, rg))
    }

    // ----- elementwise binary --------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_parts_unchecked(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ----- elementwise unary ---------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::ScalarMul(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scalar_mul(a, -1.0)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0 || x.is_nan()) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    /// Clamps into `[lo, hi]`; gradient passes through inside the closed interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Sums a matrix along `axis`: 0 gives a `1×c` row, 1 gives an `r×1` column.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let d = t.data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in d.chunks_exact(c) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                Tensor::from_parts_unchecked(vec![1, c], out)
            }
            1 => {
                let out = d.chunks_exact(c).map(|row| row.iter().sum()).collect();
                Tensor::from_parts_unchecked(vec![r, 1], out)
            }
            _ => return Err(Error::Dimension(format!("no axis {axis} on a matrix"))),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumAxis(a, axis), value, rg))
    }

    // ----- reverse sweep -------------------------------------------------

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    ///
    /// Previous gradients are discarded first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let node = &self.nodes[root.0];
        if !node.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any parameter".into(),
            ));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        match nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = nodes[a.0].value.dims2().unwrap();
                let r = out.shape()[1];
                if nodes[a.0].requires_grad {
                    let da = slot(grads, nodes, a);
                    gemm(p, r, q, g, false, nodes[b.0].value.data(), true, da, true);
                }
                if nodes[b.0].requires_grad {
                    let db = slot(grads, nodes, b);
                    gemm(q, p, r, nodes[a.0].value.data(), true, g, false, db, true);
                }
            }
            Op::Add(a, b) => {
                accumulate_broadcast(grads, nodes, a, g, |_, gi| gi);
                accumulate_broadcast(grads, nodes, b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(grads, nodes, a, g, |_, gi| gi);
                accumulate_broadcast(grads, nodes, b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate_broadcast(grads, nodes, a, g, |k, gi| gi * bcast(vb, k));
                accumulate_broadcast(grads, nodes, b, g, |k, gi| gi * bcast(va, k));
            }
            Op::Div(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                accumulate_broadcast(grads, nodes, a, g, |k, gi| gi / bcast(vb, k));
                accumulate_broadcast(grads, nodes, b, g, |k, gi| {
                    let y = bcast(vb, k);
                    -gi * bcast(va, k) / (y * y)
                });
            }
            Op::ScalarMul(a, c) => pointwise(grads, nodes, a, g, |_, _| c),
            Op::AddScalar(a) => pointwise(grads, nodes, a, g, |_, _| 1.0),
            Op::Abs(a) => pointwise(grads, nodes, a, g, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Log(a) => pointwise(grads, nodes, a, g, |x, _| 1.0 / x),
            Op::Exp(a) => {
                let y = out.data();
                pointwise(grads, nodes, a, g, |_, k| y[k])
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                pointwise(grads, nodes, a, g, |_, k| y[k] * (1.0 - y[k]))
            }
            Op::Tanh(a) => {
                let y = out.data();
                pointwise(grads, nodes, a, g, |_, k| 1.0 - y[k] * y[k])
            }
            Op::LeakyRelu(a, slope) => {
                pointwise(grads, nodes, a, g, |x, _| if x > 0.0 { 1.0 } else { slope })
            }
            Op::Sqrt(a) => {
                let y = out.data();
                pointwise(grads, nodes, a, g, |_, k| 0.5 / y[k])
            }
            Op::Clamp(a, lo, hi) => pointwise(grads, nodes, a, g, |x, _| {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }),
            Op::Sum(a) => {
                let da = slot(grads, nodes, a);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let da = slot(grads, nodes, a);
                let s = g[0] / da.len() as f64;
                da.iter_mut().for_each(|d| *d += s);
            }
            Op::SumAxis(a, axis) => {
                let (_, c) = nodes[a.0].value.dims2().unwrap();
                let da = slot(grads, nodes, a);
                for (r, row) in da.chunks_exact_mut(c).enumerate() {
                    for (j, d) in row.iter_mut().enumerate() {
                        *d += if axis == 0 { g[j] } else { g[r] };
                    }
                }
            }
            Op::Concat(a, b, axis) => {
                let (ra, ca) = nodes[a.0].value.dims2().unwrap();
                let cb = nodes[b.0].value.shape()[1];
                if nodes[a.0].requires_grad {
                    let da = slot(grads, nodes, a);
                    if axis == 0 {
                        add_into(da, &g[..ra * ca]);
                    } else {
                        for r in 0..ra {
                            let w = ca + cb;
                            add_into(&mut da[r * ca..(r + 1) * ca], &g[r * w..r * w + ca]);
                        }
                    }
                }
                if nodes[b.0].requires_grad {
                    let db = slot(grads, nodes, b);
                    if axis == 0 {
                        add_into(db, &g[ra * ca..]);
                    } else {
                        for r in 0..ra {
                            let w = ca + cb;
                            add_into(&mut db[r * cb..(r + 1) * cb], &g[r * w + ca..(r + 1) * w]);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().unwrap();
                let da = slot(grads, nodes, a);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, nodes, a), g),
            Op::RepeatRows(a) => {
                let c = nodes[a.0].value.len();
                let da = slot(grads, nodes, a);
                for row in g.chunks_exact(c) {
                    add_into(da, row);
                }
            }
            Op::RepeatCols(a, n) => {
                let da = slot(grads, nodes, a);
                for (d, row) in da.iter_mut().zip(g.chunks_exact(n)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            Op::SliceRows(a, start) => {
                let c = out.shape()[1];
                let da = slot(grads, nodes, a);
                add_into(&mut da[start * c..start * c + g.len()], g);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn bcast(t: &Tensor, k: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[k]
    }
}

/// Unary chain rule: `dx[k] += g[k] * local(x[k], k)`.
fn pointwise(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: Var,
    g: &[f64],
    local: impl Fn(f64, usize) -> f64,
) {
    let x = nodes[a.0].value.data();
    let da = slot(grads, nodes, a);
    for k in 0..g.len() {
        da[k] += g[k] * local(x[k], k);
    }
}

/// Binary chain rule with scalar broadcasting folded back by summation.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: Var,
    g: &[f64],
    contrib: impl Fn(usize, f64) -> f64,
) {
    if !nodes[a.0].requires_grad {
        return;
    }
    let da = slot(grads, nodes, a);
    if da.len() == g.len() {
        for k in 0..g.len() {
            da[k] += contrib(k, g[k]);
        }
    } else {
        da[0] += (0..g.len()).map(|k| contrib(k, g[k])).sum::<f64>();
    }
}
