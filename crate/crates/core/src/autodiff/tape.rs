use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Sin,
    Cos,
    Tanh,
    Elu,
    EluPlusOne,
    Relu,
    Recip,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    MatMul(usize, usize),
    /// Row-wise matrix-vector product; see [`Var::bmv`].
    Bmv {
        mats: usize,
        vecs: usize,
        out_cols: usize,
    },
    Softmax(usize),
    Sum(usize),
    Concat(Vec<usize>),
    Slice {
        src: usize,
        start: usize,
    },
    Select {
        mask: Vec<bool>,
        on: usize,
        off: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run record of tensor operations.
///
/// A tape is built fresh for every forward pass. Nodes are appended in
/// evaluation order, so parents always precede children and a reverse sweep
/// is a valid topological order for the chain rule.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of a scalar loss with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match &self.grads[v.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn broadcast_rows(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ra, ca) = (a.rows(), a.cols());
    let (rb, cb) = (b.rows(), b.cols());
    if ca != cb || !(ra == rb || ra == 1 || rb == 1) {
        return Err(Error::ShapeMismatch(format!(
            "cannot combine {:?} with {:?} (only a leading batch axis broadcasts)",
            a.shape(),
            b.shape()
        )));
    }
    Ok((ra.max(rb), ca))
}

fn out_shape(a: &Tensor, b: &Tensor, rows: usize) -> Vec<usize> {
    if a.rows() == rows {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    }
}

fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sin => x.sin(),
        Unary::Cos => x.cos(),
        Unary::Tanh => x.tanh(),
        Unary::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Unary::EluPlusOne => {
            if x > 0.0 {
                x + 1.0
            } else {
                x.exp()
            }
        }
        Unary::Relu => x.max(0.0),
        Unary::Recip => 1.0 / x,
        Unary::Sqrt => x.sqrt(),
        Unary::Square => x * x,
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
    }
}

/// d out / d x given input `x` and output `y`.
fn unary_slope(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Sin => x.cos(),
        Unary::Cos => -x.sin(),
        Unary::Tanh => 1.0 - y * y,
        Unary::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Unary::EluPlusOne => {
            if x > 0.0 {
                1.0
            } else {
                y
            }
        }
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Recip => -y * y,
        Unary::Sqrt => 0.5 / y,
        Unary::Square => 2.0 * x,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
    }
}

fn apply_binary(kind: Binary, a: f64, b: f64) -> f64 {
    match kind {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
        Binary::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
        Binary::Min => {
            if a <= b {
                a
            } else {
                b
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        // untracked results are recorded as constants so no edge is kept
        let op = if tracked { op } else { Op::Leaf };
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn try_concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        }
        let (value, tracked) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rows() != rows {
                    return Err(Error::ShapeMismatch(format!(
                        "concat rows differ: {} vs {}",
                        v.rows(),
                        rows
                    )));
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row_slice(r));
                }
            }
            let tracked = parts.iter().any(|p| nodes[p.id].tracked);
            (Tensor::matrix(rows, cols, data), tracked)
        };
        Ok(self.push(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            tracked,
        ))
    }

    /// Column-wise concatenation.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        self.try_concat(parts).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(Error::NotScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
            grads[id].get_or_insert_with(|| vec![0.0; len])
        }

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                grads[id] = Some(g);
                continue;
            }
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Unary(x, kind) => {
                    if nodes[*x].tracked {
                        let xv = nodes[*x].value.data();
                        let gx = acc(&mut grads, *x, xv.len());
                        for i in 0..xv.len() {
                            gx[i] += g[i] * unary_slope(*kind, xv[i], out.data()[i]);
                        }
                    }
                }
                Op::Binary(a, b, kind) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (rows, cols) = (out.rows(), out.cols());
                    let a_bcast = av.rows() != rows;
                    let b_bcast = bv.rows() != rows;
                    let (ta, tb) = (nodes[*a].tracked, nodes[*b].tracked);
                    let mut ga = if ta { Some(vec![0.0; av.len()]) } else { None };
                    let mut gb = if tb { Some(vec![0.0; bv.len()]) } else { None };
                    for r in 0..rows {
                        for c in 0..cols {
                            let ia = if a_bcast { c } else { r * cols + c };
                            let ib = if b_bcast { c } else { r * cols + c };
                            let x = av.data()[ia];
                            let y = bv.data()[ib];
                            let gi = g[r * cols + c];
                            let (da, db) = match kind {
                                Binary::Add => (gi, gi),
                                Binary::Sub => (gi, -gi),
                                Binary::Mul => (gi * y, gi * x),
                                Binary::Div => (gi / y, -gi * x / (y * y)),
                                Binary::Max => {
                                    if x >= y {
                                        (gi, 0.0)
                                    } else {
                                        (0.0, gi)
                                    }
                                }
                                Binary::Min => {
                                    if x <= y {
                                        (gi, 0.0)
                                    } else {
                                        (0.0, gi)
                                    }
                                }
                            };
                            if let Some(ga) = ga.as_mut() {
                                ga[ia] += da;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib] += db;
                            }
                        }
                    }
                    for (id, part) in [(*a, ga), (*b, gb)] {
                        if let Some(part) = part {
                            let dst = acc(&mut grads, id, part.len());
                            for (d, p) in dst.iter_mut().zip(part) {
                                *d += p;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (n_, k_) = (av.rows(), av.cols());
                    let m_ = bv.cols();
                    if nodes[*a].tracked {
                        let ga = acc(&mut grads, *a, av.len());
                        for i in 0..n_ {
                            for p in 0..k_ {
                                let mut s = 0.0;
                                for j in 0..m_ {
                                    s += g[i * m_ + j] * bv.data()[p * m_ + j];
                                }
                                ga[i * k_ + p] += s;
                            }
                        }
                    }
                    if nodes[*b].tracked {
                        let gb = acc(&mut grads, *b, bv.len());
                        for i in 0..n_ {
                            for p in 0..k_ {
                                let x = av.data()[i * k_ + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..m_ {
                                    gb[p * m_ + j] += x * g[i * m_ + j];
                                }
                            }
                        }
                    }
                }
                Op::Bmv {
                    mats,
                    vecs,
                    out_cols,
                } => {
                    let mv = &nodes[*mats].value;
                    let vv = &nodes[*vecs].value;
                    let rows = out.rows();
                    let n_ = *out_cols;
                    let m_ = vv.cols();
                    let shared = mv.rows() == 1 && rows != 1;
                    if nodes[*mats].tracked {
                        let gm = acc(&mut grads, *mats, mv.len());
                        for r in 0..rows {
                            let base = if shared { 0 } else { r * n_ * m_ };
                            for i in 0..n_ {
                                let gi = g[r * n_ + i];
                                for j in 0..m_ {
                                    gm[base + i * m_ + j] += gi * vv.data()[r * m_ + j];
                                }
                            }
                        }
                    }
                    if nodes[*vecs].tracked {
                        let gv = acc(&mut grads, *vecs, vv.len());
                        for r in 0..rows {
                            let base = if shared { 0 } else { r * n_ * m_ };
                            for i in 0..n_ {
                                let gi = g[r * n_ + i];
                                for j in 0..m_ {
                                    gv[r * m_ + j] += gi * mv.data()[base + i * m_ + j];
                                }
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    if nodes[*x].tracked {
                        let cols = out.cols();
                        let gx = acc(&mut grads, *x, out.len());
                        for r in 0..out.rows() {
                            let y = out.row_slice(r);
                            let gr = &g[r * cols..(r + 1) * cols];
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                gx[r * cols + c] += y[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if nodes[*x].tracked {
                        let len = nodes[*x].value.len();
                        let gx = acc(&mut grads, *x, len);
                        for v in gx.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = out.rows();
                    let cols = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols();
                        if nodes[p].tracked {
                            let gp = acc(&mut grads, p, rows * pc);
                            for r in 0..rows {
                                for c in 0..pc {
                                    gp[r * pc + c] += g[r * cols + offset + c];
                                }
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Slice { src, start } => {
                    if nodes[*src].tracked {
                        let sv = &nodes[*src].value;
                        let sc = sv.cols();
                        let len = out.cols();
                        let gs = acc(&mut grads, *src, sv.len());
                        for r in 0..out.rows() {
                            for c in 0..len {
                                gs[r * sc + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
                Op::Select { mask, on, off } => {
                    let cols = out.cols();
                    for (src, want) in [(*on, true), (*off, false)] {
                        if !nodes[src].tracked {
                            continue;
                        }
                        let gs = acc(&mut grads, src, out.len());
                        for (r, &m) in mask.iter().enumerate() {
                            if m == want {
                                for c in 0..cols {
                                    gs[r * cols + c] += g[r * cols + c];
                                }
                            }
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

macro_rules! unary_methods {
    ($($name:ident => $kind:expr),* $(,)?) => {
        $(pub fn $name(self) -> Var<'t> { self.unary($kind) })*
    };
}

macro_rules! binary_methods {
    ($($try_name:ident, $name:ident => $kind:expr),* $(,)?) => {
        $(
            pub fn $try_name(self, other: Var<'t>) -> Result<Var<'t>> {
                self.binary(other, $kind)
            }
            pub fn $name(self, other: Var<'t>) -> Var<'t> {
                self.binary(other, $kind).unwrap_or_else(|e| panic!("{e}"))
            }
        )*
    };
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn id(self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    /// Value of a one-element node.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    pub fn to_tensor(self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.value().rows()
    }

    pub fn cols(self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value, no edge back to `self`.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.to_tensor();
        self.tape.constant(v)
    }

    fn unary(self, kind: Unary) -> Var<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.map(|x| apply_unary(kind, x)), n.tracked)
        };
        self.tape.push(value, Op::Unary(self.id, kind), tracked)
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (rows, cols) = broadcast_rows(a, b)?;
            let (ad, bd) = (a.data(), b.data());
            let a_b = a.rows() != rows;
            let b_b = b.rows() != rows;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    let x = ad[if a_b { c } else { r * cols + c }];
                    let y = bd[if b_b { c } else { r * cols + c }];
                    data.push(apply_binary(kind, x, y));
                }
            }
            let shape = out_shape(a, b, rows);
            (
                Tensor::new(shape, data).expect("broadcast shape"),
                nodes[self.id].tracked || nodes[other.id].tracked,
            )
        };
        Ok(self
            .tape
            .push(value, Op::Binary(self.id, other.id, kind), tracked))
    }

    unary_methods! {
        neg => Unary::Neg,
        exp => Unary::Exp,
        ln => Unary::Log,
        sin => Unary::Sin,
        cos => Unary::Cos,
        tanh => Unary::Tanh,
        elu => Unary::Elu,
        relu => Unary::Relu,
        recip => Unary::Recip,
        sqrt => Unary::Sqrt,
        square => Unary::Square,
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Unary::AddScalar(c))
    }

    /// `elu(x) + 1`, strictly positive for every finite `x`.
    pub fn elu_plus_one(self) -> Var<'t> {
        self.unary(Unary::EluPlusOne)
    }

    binary_methods! {
        try_add, add => Binary::Add,
        try_sub, sub => Binary::Sub,
        try_mul, mul => Binary::Mul,
        try_div, div => Binary::Div,
        try_maximum, maximum => Binary::Max,
        try_minimum, minimum => Binary::Min,
    }

    pub fn try_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (n, k) = (a.rows(), a.cols());
            let (k2, m) = (b.rows(), b.cols());
            if k != k2 {
                return Err(Error::ShapeMismatch(format!(
                    "matmul {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                let out = &mut data[i * m..(i + 1) * m];
                for p in 0..k {
                    let x = a.data()[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &b.data()[p * m..(p + 1) * m];
                    for (o, y) in out.iter_mut().zip(brow) {
                        *o += x * y;
                    }
                }
            }
            (
                Tensor::matrix(n, m, data),
                nodes[self.id].tracked || nodes[other.id].tracked,
            )
        };
        Ok(self
            .tape
            .push(value, Op::MatMul(self.id, other.id), tracked))
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.try_matmul(other).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Row-wise matrix-vector product.
    ///
    /// `self` holds one row-major `out_cols x m` matrix per row (shape
    /// `[B, out_cols * m]`, or `[1, out_cols * m]` shared across the batch);
    /// `vecs` has shape `[B, m]`. Row `r` of the result is `M_r v_r`.
    pub fn try_bmv(self, vecs: Var<'t>, out_cols: usize) -> Result<Var<'t>> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let mv = &nodes[self.id].value;
            let vv = &nodes[vecs.id].value;
            let rows = vv.rows();
            let m = vv.cols();
            if mv.cols() != out_cols * m || !(mv.rows() == rows || mv.rows() == 1) {
                return Err(Error::ShapeMismatch(format!(
                    "bmv: matrices {:?} cannot map vectors {:?} to {out_cols} columns",
                    mv.shape(),
                    vv.shape()
                )));
            }
            let shared = mv.rows() == 1;
            let mut data = vec![0.0; rows * out_cols];
            for r in 0..rows {
                let base = if shared { 0 } else { r * out_cols * m };
                let v = vv.row_slice(r);
                for i in 0..out_cols {
                    let row = &mv.data()[base + i * m..base + (i + 1) * m];
                    data[r * out_cols + i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
            (
                Tensor::matrix(rows, out_cols, data),
                nodes[self.id].tracked || nodes[vecs.id].tracked,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Bmv {
                mats: self.id,
                vecs: vecs.id,
                out_cols,
            },
            tracked,
        ))
    }

    pub fn bmv(self, vecs: Var<'t>, out_cols: usize) -> Var<'t> {
        self.try_bmv(vecs, out_cols)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    /// Softmax over the last axis of every row.
    pub fn softmax(self) -> Var<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut data = Vec::with_capacity(x.len());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                data.extend(e.iter().map(|v| v / s));
            }
            (
                Tensor::new(x.shape().to_vec(), data).expect("softmax shape"),
                nodes[self.id].tracked,
            )
        };
        debug_assert!(value.cols() > 0);
        self.tape.push(value, Op::Softmax(self.id), tracked)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(self) -> Var<'t> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            (
                Tensor::scalar(nodes[self.id].value.sum()),
                nodes[self.id].tracked,
            )
        };
        self.tape.push(value, Op::Sum(self.id), tracked)
    }

    /// Columns `start..start + len` of every row.
    pub fn try_slice(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            if start + len > x.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "slice {start}..{} of {:?}",
                    start + len,
                    x.shape()
                )));
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row_slice(r)[start..start + len]);
            }
            (Tensor::matrix(x.rows(), len, data), nodes[self.id].tracked)
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                src: self.id,
                start,
            },
            tracked,
        ))
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        self.try_slice(start, len).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Row `r` from `self` where `mask[r]`, else from `other`.
    pub fn try_select(self, mask: &[bool], other: Var<'t>) -> Result<Var<'t>> {
        let (value, tracked) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape() != b.shape() || a.rows() != mask.len() {
                return Err(Error::ShapeMismatch(format!(
                    "select {:?} / {:?} with {} mask rows",
                    a.shape(),
                    b.shape(),
                    mask.len()
                )));
            }
            let mut data = Vec::with_capacity(a.len());
            for (r, &m) in mask.iter().enumerate() {
                data.extend_from_slice(if m { a.row_slice(r) } else { b.row_slice(r) });
            }
            (
                Tensor::new(a.shape().to_vec(), data).expect("select shape"),
                nodes[self.id].tracked || nodes[other.id].tracked,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Select {
                mask: mask.to_vec(),
                on: self.id,
                off: other.id,
            },
            tracked,
        ))
    }

    pub fn select(self, mask: &[bool], other: Var<'t>) -> Var<'t> {
        self.try_select(mask, other)
            .unwrap_or_else(|e| panic!("{e}"))
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().data())
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        Var::div(self, rhs)
    }
}

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

impl<'t> ops::Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}
