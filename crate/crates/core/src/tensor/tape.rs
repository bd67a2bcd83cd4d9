use std::cell::{Cell, RefCell};
use std::fmt;

use super::kernels::{
    axis_split, layer_norm_rows, matmul_into, sigmoid, softmax_in_place, softplus,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Recorded primitive. Parent references are node ids, always smaller than
/// the id of the node holding the op.
#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Matmul(usize, usize),
    /// `x W + b` with `b` added to every row.
    Affine(usize, usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    MeanRows(usize),
    MeanRowBlocks(usize, usize),
    SumCols(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    RepeatRows(usize),
    Softmax(usize, usize),
    LayerNorm(usize, Vec<f64>),
    PairwiseDiff(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
///
/// A tape is single-use: after [`Tape::backward`] it refuses a second call.
/// A tape built with [`Tape::no_grad`] computes values only.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("recording", &self.recording)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape whose leaves never require gradients; used for evaluation.
    pub fn no_grad() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf (a gradient target when recording).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, self.recording)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar loss. Every leaf that the loss depends on
    /// gets `d loss / d leaf`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::DetachedTape);
        }
        if self.consumed.replace(true) {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                out[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backprop(&nodes, id, g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }
}

/// Adds into the gradient buffer of `id` (allocating zeros on first touch),
/// provided that node participates in differentiation.
fn acc<F: FnOnce(&mut [f64])>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: F) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

/// Accumulates an owned contribution, moving it in on first touch.
fn give(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, v: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => add_assign(buf, &v),
        slot => *slot = Some(v),
    }
}

/// Accumulates `f(i)` into every entry of the gradient of `id`.
fn acc_map<F: Fn(usize) -> f64>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: F) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().enumerate().for_each(|(i, x)| *x += f(i)),
        slot => *slot = Some((0..nodes[id].value.numel()).map(f).collect()),
    }
}

fn backprop(nodes: &[Node], id: usize, mut g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
    let y = nodes[id].value.data();
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *b, |gb| add_assign(gb, &g));
            give(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(&g).for_each(|(x, d)| *x -= d)
            });
            give(nodes, grads, *a, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, |i| g[i] * bv[i]);
            acc_map(nodes, grads, *b, |i| g[i] * av[i]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc_map(nodes, grads, *a, |i| g[i] / bv[i]);
            acc_map(nodes, grads, *b, |i| -g[i] * av[i] / (bv[i] * bv[i]));
        }
        Op::Scale(a, c) => {
            g.iter_mut().for_each(|d| *d *= c);
            give(nodes, grads, *a, g);
        }
        Op::AddScalar(a) | Op::Reshape(a) => give(nodes, grads, *a, g),
        Op::Relu(a) => {
            let av = val(*a);
            g.iter_mut().zip(av).for_each(|(d, x)| {
                if *x <= 0.0 {
                    *d = 0.0;
                }
            });
            give(nodes, grads, *a, g);
        }
        Op::Softplus(a) => {
            let av = val(*a);
            g.iter_mut().zip(av).for_each(|(d, x)| *d *= sigmoid(*x));
            give(nodes, grads, *a, g);
        }
        Op::Exp(a) => {
            g.iter_mut().zip(y).for_each(|(d, v)| *d *= v);
            give(nodes, grads, *a, g);
        }
        Op::Ln(a) => {
            let av = val(*a);
            g.iter_mut().zip(av).for_each(|(d, x)| *d /= x);
            give(nodes, grads, *a, g);
        }
        Op::Square(a) => {
            let av = val(*a);
            g.iter_mut().zip(av).for_each(|(d, x)| *d *= 2.0 * x);
            give(nodes, grads, *a, g);
        }
        Op::Matmul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |ga| {
                matmul_into(m, n, k, &g, false, bv, true, ga, 1.0)
            });
            acc(nodes, grads, *b, |gb| {
                matmul_into(k, m, n, av, true, &g, false, gb, 1.0)
            });
        }
        Op::Affine(x, w, b) => {
            let (sx, sw) = (nodes[*x].value.shape(), nodes[*w].value.shape());
            let (m, k, n) = (sx[0], sx[1], sw[1]);
            let (xv, wv) = (val(*x), val(*w));
            acc(nodes, grads, *x, |gx| {
                matmul_into(m, n, k, &g, false, wv, true, gx, 1.0)
            });
            acc(nodes, grads, *w, |gw| {
                matmul_into(k, m, n, xv, true, &g, false, gw, 1.0)
            });
            acc(nodes, grads, *b, |gb| {
                for row in g.chunks(n) {
                    add_assign(gb, row);
                }
            });
        }
        Op::Transpose(a) => {
            let s = nodes[*a].value.shape();
            let (r, c) = (s[0], s[1]);
            acc(nodes, grads, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            })
        }
        Op::Sum(a) => acc(nodes, grads, *a, |ga| {
            ga.iter_mut().for_each(|x| *x += g[0])
        }),
        Op::MeanRows(a) => {
            let s = nodes[*a].value.shape();
            let (r, c) = (s[0], s[1]);
            acc(nodes, grads, *a, |ga| {
                for row in ga.chunks_mut(c) {
                    for j in 0..c {
                        row[j] += g[j] / r as f64;
                    }
                }
            })
        }
        Op::MeanRowBlocks(a, k) => {
            let c = nodes[*a].value.cols();
            let k = *k;
            acc(nodes, grads, *a, |ga| {
                for (i, row) in ga.chunks_mut(c).enumerate() {
                    let gi = &g[(i / k) * c..(i / k + 1) * c];
                    for j in 0..c {
                        row[j] += gi[j] / k as f64;
                    }
                }
            })
        }
        Op::SumCols(a) => {
            let c = nodes[*a].value.cols();
            acc(nodes, grads, *a, |ga| {
                for (i, row) in ga.chunks_mut(c).enumerate() {
                    row.iter_mut().for_each(|x| *x += g[i]);
                }
            })
        }
        Op::AddRow(a, b) => {
            let c = nodes[*b].value.numel();
            acc(nodes, grads, *b, |gb| {
                for row in g.chunks(c) {
                    add_assign(gb, row);
                }
            });
            give(nodes, grads, *a, g);
        }
        Op::MulRow(a, b) => {
            let c = nodes[*b].value.numel();
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * bv[i % c];
                }
            });
            acc(nodes, grads, *b, |gb| {
                for (i, d) in g.iter().enumerate() {
                    gb[i % c] += d * av[i];
                }
            });
        }
        Op::MulCol(a, s) => {
            let c = nodes[*a].value.cols();
            let (av, sv) = (val(*a), val(*s));
            acc(nodes, grads, *a, |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += g[i] * sv[i / c];
                }
            });
            acc(nodes, grads, *s, |gs| {
                for (i, d) in g.iter().enumerate() {
                    gs[i / c] += d * av[i];
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = nodes[id].value.cols();
            let rows = nodes[id].value.rows();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                acc(nodes, grads, p, |gp| {
                    for r in 0..rows {
                        add_assign(
                            &mut gp[r * c..(r + 1) * c],
                            &g[r * total + offset..r * total + offset + c],
                        );
                    }
                });
                offset += c;
            }
        }
        Op::SliceCols(a, start) => {
            let total = nodes[*a].value.cols();
            let c = nodes[id].value.cols();
            let rows = nodes[id].value.rows();
            acc(nodes, grads, *a, |ga| {
                for r in 0..rows {
                    add_assign(
                        &mut ga[r * total + start..r * total + start + c],
                        &g[r * c..(r + 1) * c],
                    );
                }
            })
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                acc(nodes, grads, p, |gp| add_assign(gp, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::SliceRows(a, start) => {
            let c = nodes[*a].value.cols();
            acc(nodes, grads, *a, |ga| {
                add_assign(&mut ga[start * c..start * c + g.len()], &g)
            })
        }
        Op::RepeatRows(a) => {
            let c = nodes[*a].value.numel();
            acc(nodes, grads, *a, |ga| {
                for row in g.chunks(c) {
                    add_assign(ga, row);
                }
            })
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_split(nodes[id].value.shape(), *axis);
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += y[base + j * inner] * g[base + j * inner];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            ga[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            })
        }
        Op::LayerNorm(a, inv_std) => {
            let d = nodes[id].value.cols();
            acc(nodes, grads, *a, |ga| {
                for (r, inv) in inv_std.iter().enumerate() {
                    let rs = r * d..(r + 1) * d;
                    let (gr, yr) = (&g[rs.clone()], &y[rs.clone()]);
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (j, x) in ga[rs].iter_mut().enumerate() {
                        *x += inv * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
            })
        }
        Op::PairwiseDiff(q, k) => {
            let (n, d) = (nodes[*q].value.rows(), nodes[*q].value.cols());
            let m = nodes[*k].value.rows();
            acc(nodes, grads, *q, |gq| {
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * d..(i * m + j + 1) * d];
                        add_assign(&mut gq[i * d..(i + 1) * d], row);
                    }
                }
            });
            acc(nodes, grads, *k, |gk| {
                for i in 0..n {
                    for j in 0..m {
                        let row = &g[(i * m + j) * d..(i * m + j + 1) * d];
                        gk[j * d..(j + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(x, v)| *x -= v);
                    }
                }
            });
        }
    }
}

#[inline]
fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::DetachedTape)
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Tensor::from_parts(a.shape().to_vec(), data), op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| c * v)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Matmul(self.id, other.id),
            rg,
        ))
    }

    /// `x W + b`: `[m, k] x [k, n]` plus a length-`n` bias on every row.
    pub fn affine(&self, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(w)?;
        self.same_tape(b)?;
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        if x.ndim() != 2 || wv.ndim() != 2 || x.shape()[1] != wv.shape()[0] {
            return Err(Error::shape("affine", x.shape(), wv.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], wv.shape()[1]);
        if bv.numel() != n {
            return Err(Error::shape("affine bias", bv.shape(), &[n]));
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        matmul_into(m, k, n, x.data(), false, wv.data(), false, &mut out, 1.0);
        let rg = self.tape.requires(&[self.id, w.id, b.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, n], out),
            Op::Affine(self.id, w.id, b.id),
            rg,
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::shape("transpose", a.shape(), &[2]));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![c, r], out),
            Op::Transpose(self.id),
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self
            .tape
            .push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    /// `[m, n] -> [1, n]` column means.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || a.rows() == 0 {
            return Err(Error::shape("mean_rows", a.shape(), &[]));
        }
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; c];
        for row in a.data().chunks(c) {
            add_assign(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.tape.push(
            Tensor::from_parts(vec![1, c], out),
            Op::MeanRows(self.id),
            self.requires_grad(),
        ))
    }

    /// `[n * k, c] -> [n, c]`: mean of each run of `k` consecutive rows.
    pub fn mean_row_blocks(&self, k: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || k == 0 || a.rows() % k != 0 {
            return Err(Error::shape("mean_row_blocks", a.shape(), &[k]));
        }
        let (n, c) = (a.rows() / k, a.cols());
        let mut out = vec![0.0; n * c];
        for (i, row) in a.data().chunks(c.max(1)).enumerate().take(a.rows()) {
            add_assign(&mut out[(i / k) * c..(i / k + 1) * c], row);
        }
        out.iter_mut().for_each(|v| *v /= k as f64);
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, c], out),
            Op::MeanRowBlocks(self.id, k),
            self.requires_grad(),
        ))
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn sum_cols(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::shape("sum_cols", a.shape(), &[]));
        }
        let c = a.cols();
        let out: Vec<f64> = if c == 0 {
            vec![0.0; a.rows()]
        } else {
            a.data().chunks(c).map(|r| r.iter().sum()).collect()
        };
        Ok(self.tape.push(
            Tensor::from_parts(vec![a.rows(), 1], out),
            Op::SumCols(self.id),
            self.requires_grad(),
        ))
    }

    fn row_broadcast_check(&self, b: &Var<'t>, name: &'static str) -> Result<(Tensor, Tensor)> {
        self.same_tape(b)?;
        let (a, bv) = (self.value(), b.value());
        let ok = a.ndim() >= 1
            && bv.numel() == a.cols()
            && (bv.ndim() == 1 || (bv.ndim() == 2 && bv.rows() == 1));
        if !ok {
            return Err(Error::shape(name, a.shape(), bv.shape()));
        }
        Ok((a, bv))
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row.
    pub fn add_row(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let (a, bv) = self.row_broadcast_check(b, "add_row")?;
        let c = bv.numel();
        let data = a
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bv.data()).map(|(v, b)| v + b))
            .collect();
        let rg = self.tape.requires(&[self.id, b.id]);
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::AddRow(self.id, b.id),
            rg,
        ))
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(&self, b: &Var<'t>) -> Result<Var<'t>> {
        let (a, bv) = self.row_broadcast_check(b, "mul_row")?;
        let c = bv.numel();
        let data = a
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bv.data()).map(|(v, b)| v * b))
            .collect();
        let rg = self.tape.requires(&[self.id, b.id]);
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::MulRow(self.id, b.id),
            rg,
        ))
    }

    /// Scales row `i` of an `[m, n]` matrix by `s[i]`, where `s` is `[m, 1]`.
    pub fn mul_col(&self, s: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(s)?;
        let (a, sv) = (self.value(), s.value());
        if a.ndim() != 2 || sv.shape() != [a.rows(), 1] {
            return Err(Error::shape("mul_col", a.shape(), sv.shape()));
        }
        let c = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[i / c])
            .collect();
        let rg = self.tape.requires(&[self.id, s.id]);
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), data),
            Op::MulCol(self.id, s.id),
            rg,
        ))
    }

    /// Horizontal concatenation of 2-D blocks sharing a row count.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if v.ndim() != 2 || v.rows() != rows {
                return Err(Error::shape("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.tape.requires(&ids);
        Ok(first.tape.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::ConcatCols(ids),
            rg,
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || start > end || end > a.cols() {
            return Err(Error::shape("slice_cols", a.shape(), &[start, end]));
        }
        let c = end - start;
        let mut out = Vec::with_capacity(a.rows() * c);
        for r in 0..a.rows() {
            out.extend_from_slice(&a.row(r)[start..end]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![a.rows(), c], out),
            Op::SliceCols(self.id, start),
            self.requires_grad(),
        ))
    }

    /// Vertical concatenation of 2-D blocks sharing a column count.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        for p in parts {
            first.same_tape(p)?;
        }
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = Tensor::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = first.tape.requires(&ids);
        Ok(first.tape.push(out, Op::ConcatRows(ids), rg))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.ndim() != 2 || start > end || end > a.rows() {
            return Err(Error::shape("slice_rows", a.shape(), &[start, end]));
        }
        let c = a.cols();
        let out = a.data()[start * c..end * c].to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(vec![end - start, c], out),
            Op::SliceRows(self.id, start),
            self.requires_grad(),
        ))
    }

    /// `[1, n]` (or `[n]`) tiled into `[m, n]`.
    pub fn repeat_rows(&self, m: usize) -> Result<Var<'t>> {
        let a = self.value();
        if !(a.ndim() == 1 || (a.ndim() == 2 && a.rows() == 1)) {
            return Err(Error::shape("repeat_rows", a.shape(), &[1, a.cols()]));
        }
        let c = a.numel();
        let mut out = Vec::with_capacity(m * c);
        for _ in 0..m {
            out.extend_from_slice(a.data());
        }
        Ok(self.tape.push(
            Tensor::from_parts(vec![m, c], out),
            Op::RepeatRows(self.id),
            self.requires_grad(),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(Error::shape("softmax", a.shape(), &[axis]));
        }
        let mut out = a.to_vec();
        softmax_in_place(&mut out, a.shape(), axis);
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Softmax(self.id, axis),
            self.requires_grad(),
        ))
    }

    /// Zero-mean, unit-variance normalization over the trailing axis.
    pub fn normalize_rows(&self, eps: f64) -> Result<Var<'t>> {
        let a = self.value();
        let d = a.cols();
        if a.ndim() == 0 || d == 0 {
            return Err(Error::shape("layer_norm", a.shape(), &[]));
        }
        let mut out = a.to_vec();
        let inv = layer_norm_rows(&mut out, d, eps);
        Ok(self.tape.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::LayerNorm(self.id, inv),
            self.requires_grad(),
        ))
    }

    /// All pairwise differences `q[n] - k[m]`, laid out as `[n * m, d]`
    /// with row index `n * m_count + m`.
    pub fn pairwise_diff(&self, k: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(k)?;
        let (qv, kv) = (self.value(), k.value());
        if qv.ndim() != 2 || kv.ndim() != 2 || qv.cols() != kv.cols() {
            return Err(Error::shape("pairwise_diff", qv.shape(), kv.shape()));
        }
        let (n, m, d) = (qv.rows(), kv.rows(), qv.cols());
        let mut out = Vec::with_capacity(n * m * d);
        for i in 0..n {
            for j in 0..m {
                out.extend(qv.row(i).iter().zip(kv.row(j)).map(|(a, b)| a - b));
            }
        }
        let rg = self.tape.requires(&[self.id, k.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![n * m, d], out),
            Op::PairwiseDiff(self.id, k.id),
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.square();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn product_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.leaf(Tensor::scalar(5.0));
        let g = tape.backward(x.mul(&y).unwrap()).unwrap();
        assert_eq!(g.wrt(x).item(), 5.0);
        assert_eq!(g.wrt(y).item(), 2.0);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let l = x.square();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_loss_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.backward(x.square()), Err(Error::DetachedTape)));
        let y = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(x.add(&y), Err(Error::DetachedTape)));
    }

    #[test]
    fn constants_never_get_gradients() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let x = tape.leaf(Tensor::scalar(1.5));
        let g = tape.backward(x.mul(&c).unwrap()).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item(), 4.0);
    }

    #[test]
    fn no_grad_tape_records_nothing_differentiable() {
        let tape = Tape::no_grad();
        let x = tape.leaf(Tensor::scalar(2.0));
        let l = x.square();
        assert!(!l.requires_grad());
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn gradient_shapes_match_leaves() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::full([3, 2], 0.5));
        let b = tape.leaf(Tensor::full([2, 4], -0.25));
        let loss = a.matmul(&b).unwrap().relu().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).shape(), &[3, 2]);
        assert_eq!(g.wrt(b).shape(), &[2, 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let b = tape.leaf(Tensor::zeros([2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_patterns_are_explicit() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2, 3]));
        let wrong = tape.leaf(Tensor::zeros([2]));
        assert!(a.add_row(&wrong).is_err());
        assert!(a.add(&wrong).is_err());
        let col = tape.leaf(Tensor::zeros([3, 1]));
        assert!(a.mul_col(&col).is_err());
    }
}
