//! Reverse-mode differentiation over small dense matrices.
//!
//! Every value on the tape is a row-major `rows x cols` [`Tensor`]; scalars
//! are `1 x 1`. A forward pass records operations in creation order, so node
//! inputs always precede the node itself and the tape is acyclic by
//! construction. [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products.
//!
//! Elementwise binary ops broadcast a `1 x 1`, `1 x c` or `r x 1` operand
//! against the other operand; the gradient is reduced back to the operand's
//! own shape.
//!
//! Operations that are awkward to express with the built-in primitives
//! (perspective division, soft rasterization, Chamfer matching) are recorded
//! as [`CustomOp`] nodes: the caller computes the forward value and supplies
//! the backward rule.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn row(v: &[f64]) -> Self {
        Tensor::new(1, v.len(), v.to_vec())
    }

    pub fn column(v: &[f64]) -> Self {
        Tensor::new(v.len(), 1, v.to_vec())
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Tensor::new(rows.len(), N, rows.iter().flatten().copied().collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation whose forward value is computed by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    SoftMin(Var, f64),
    Clamp(Var, f64, f64),
    NormRows(Var),
    GatherRows(Var, Vec<usize>),
    Col(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Powf(..) => "powf",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SoftMin(..) => "soft_min",
            Op::Clamp(..) => "clamp",
            Op::NormRows(..) => "norm_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::Col(..) => "col",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::Custom(_, op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    /// Some trainable leaf is reachable through the inputs.
    needs_grad: bool,
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Transpose(a)
            | Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Powf(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SoftMin(a, _)
            | Op::Clamp(a, _, _)
            | Op::NormRows(a)
            | Op::GatherRows(a, _)
            | Op::Col(a, _)
            | Op::Reshape(a) => f(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::Custom(vs, _) => vs.iter().copied().for_each(f),
        }
    }
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    (if t.rows == 1 { 0 } else { r }) * t.cols + if t.cols == 1 { 0 } else { c }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return Tensor::new(
            a.rows,
            a.cols,
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(a.data[bidx(a, r, c)], b.data[bidx(b, r, c)]));
        }
    }
    Tensor::new(rows, cols, data)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Tensor, shape: (usize, usize)) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..grad.rows {
        for c in 0..grad.cols {
            let i = bidx(&out, r, c);
            out.data[i] += grad.data[r * grad.cols + c];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let mut needs_grad = false;
        op.for_each_input(|v| needs_grad |= self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = true;
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binary(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.powf(a, 2.0)
    }

    /// Sum of all elements, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for c in 0..t.cols {
                out.data[c] += t.at(r, c);
            }
        }
        self.push(out, Op::SumRows(a))
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::new(t.rows, 1, data);
        self.push(out, Op::SumCols(a))
    }

    /// Smooth minimum over all elements: `-tau * ln(sum(exp(-x / tau)))`.
    pub fn soft_min(&mut self, a: Var, tau: f64) -> Var {
        let t = self.value(a);
        let m = t.data.iter().copied().fold(f64::INFINITY, f64::min);
        let s: f64 = t.data.iter().map(|&x| (-(x - m) / tau).exp()).sum();
        let v = Tensor::scalar(m - tau * s.ln());
        self.push(v, Op::SoftMin(a, tau))
    }

    /// Clamp with subgradient 1 inside `[lo, hi]` and 0 outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Euclidean norm of each row: `r x c -> r x 1`.
    pub fn norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows)
            .map(|r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(t.rows, 1, data);
        self.push(out, Op::NormRows(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(idx.len(), t.cols, data);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn col(&mut self, a: Var, c: usize) -> Var {
        let t = self.value(a);
        let data = (0..t.rows).map(|r| t.at(r, c)).collect();
        let out = Tensor::new(t.rows, 1, data);
        self.push(out, Op::Col(a, c))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                for c in 0..t.cols {
                    out.data[r * cols + offset + c] = t.at(r, c);
                }
            }
            offset += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::new(data.len() / cols.max(1), cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape changes element count");
        let out = Tensor::new(rows, cols, t.data.clone());
        self.push(out, Op::Reshape(a))
    }

    /// Records a node whose forward `value` was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), op))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::NonScalarOutput(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let out = &node.value;
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, contrib: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, self.shape(*a)));
                    acc(*b, reduce_to(&g, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, self.shape(*a)));
                    acc(*b, reduce_to(&g.map(|x| -x), self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_binary(&g, vb, |gi, y| gi * y);
                    let gb = broadcast_binary(&g, va, |gi, x| gi * x);
                    acc(*a, reduce_to(&ga, va.shape()));
                    acc(*b, reduce_to(&gb, vb.shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = broadcast_binary(&g, vb, |gi, y| gi / y);
                    // d(a/b)/db = -out / b
                    let q = broadcast_binary(out, vb, |o, y| -o / y);
                    let gb = broadcast_binary(&g, &q, |gi, y| gi * y);
                    acc(*a, reduce_to(&ga, va.shape()));
                    acc(*b, reduce_to(&gb, vb.shape()));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if nodes[a.0].needs_grad {
                        acc(*a, g.matmul(&vb.transpose()));
                    }
                    if nodes[b.0].needs_grad {
                        acc(*b, va.transpose().matmul(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| x * c))
                }
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Sin(a) => {
                    let d = zip_map(&g, self.value(*a), |gi, x| gi * x.cos());
                    acc(*a, d)
                }
                Op::Cos(a) => {
                    let d = zip_map(&g, self.value(*a), |gi, x| -gi * x.sin());
                    acc(*a, d)
                }
                Op::Exp(a) => acc(*a, zip_map(&g, out, |gi, o| gi * o)),
                Op::Ln(a) => acc(*a, zip_map(&g, self.value(*a), |gi, x| gi / x)),
                Op::Tanh(a) => acc(*a, zip_map(&g, out, |gi, o| gi * (1.0 - o * o))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, out, |gi, o| gi * o * (1.0 - o))),
                Op::Powf(a, p) => {
                    let p = *p;
                    let d = zip_map(&g, self.value(*a), |gi, x| {
                        if p == 2.0 {
                            gi * 2.0 * x
                        } else if p == 1.0 {
                            gi
                        } else {
                            gi * p * x.powf(p - 1.0)
                        }
                    });
                    acc(*a, d)
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Tensor::filled(r, c, g.item()))
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Tensor::filled(r, c, g.item() / (r * c) as f64))
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.data[i * c..(i + 1) * c].copy_from_slice(&g.data);
                    }
                    acc(*a, d)
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            d.data[i * c + j] = g.data[i];
                        }
                    }
                    acc(*a, d)
                }
                Op::SoftMin(a, tau) => {
                    let va = self.value(*a);
                    let m = out.item();
                    let gi = g.item();
                    // weights are softmax(-x / tau), written relative to the output
                    let d = va.map(|x| gi * (-(x - m) / tau).exp());
                    acc(*a, d)
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = zip_map(&g, self.value(*a), |gi, x| {
                        if x >= lo && x <= hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                    acc(*a, d)
                }
                Op::NormRows(a) => {
                    let va = self.value(*a);
                    let mut d = Tensor::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        let n = out.data[r];
                        if n > 0.0 {
                            for c in 0..va.cols {
                                d.data[r * va.cols + c] = g.data[r] * va.at(r, c) / n;
                            }
                        }
                    }
                    acc(*a, d)
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            d.data[i * c + j] += g.data[k * c + j];
                        }
                    }
                    acc(*a, d)
                }
                Op::Col(a, col) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        d.data[i * c + col] = g.data[i];
                    }
                    acc(*a, d)
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut d = Tensor::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                d.data[i * c + j] = g.data[i * g.cols + offset + j];
                            }
                        }
                        offset += c;
                        acc(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let (r, c) = self.shape(p);
                        acc(p, Tensor::new(r, c, g.data[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Tensor::new(r, c, g.data.clone()))
                }
                Op::Custom(inputs, op) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let ds = op.backward(&vals, out, &g);
                    assert_eq!(ds.len(), inputs.len(), "custom op `{}` gradient count", op.name());
                    for (&v, d) in inputs.iter().zip(ds) {
                        assert_eq!(
                            d.shape(),
                            self.shape(v),
                            "custom op `{}` gradient shape",
                            op.name()
                        );
                        acc(v, d);
                    }
                }
            }
            if node.trainable {
                // leaves keep their gradient for the caller
                grads[id] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        g.rows,
        g.cols,
        g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    )
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`]; only trainable leaves retain gradients.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, zero-filled when `v` did not participate.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Per-parameter comparison of reverse-mode and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Relative error per parameter element.
    pub errors: Vec<Vec<f64>>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// `(parameter, element)` where a non-finite value was first seen.
    pub non_finite: Option<(usize, usize)>,
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so gradients that are
    /// zero in both routes do not divide by zero.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `point`.
///
/// `f` builds the function on a fresh tape from one trainable leaf per
/// entry of `point` and returns the scalar output node.
pub fn check_gradients<F>(f: F, point: &[Tensor], opts: GradCheck) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut non_finite = None;
    if !tape.value(out).item().is_finite() {
        non_finite = Some((0, 0));
    }
    let mut numeric = Vec::with_capacity(point.len());
    let mut errors = Vec::with_capacity(point.len());
    let mut max_error: f64 = 0.0;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (pi, p) in point.iter().enumerate() {
        let mut num = Tensor::zeros(p.rows, p.cols);
        let mut errs = Vec::with_capacity(p.len());
        for k in 0..p.len() {
            let orig = p.data[k];
            probe[pi].data[k] = orig + opts.step;
            let fp = eval(&probe)?;
            probe[pi].data[k] = orig - opts.step;
            let fm = eval(&probe)?;
            probe[pi].data[k] = orig;
            let d = (fp - fm) / (2.0 * opts.step);
            let a = analytic[pi].data[k];
            if !(d.is_finite() && a.is_finite()) {
                non_finite.get_or_insert((pi, k));
            }
            num.data[k] = d;
            let err = (a - d).abs() / a.abs().max(d.abs()).max(opts.floor);
            max_error = max_error.max(err);
            errs.push(err);
        }
        numeric.push(num);
        errors.push(errs);
    }
    let passed = non_finite.is_none() && max_error < opts.tol;
    Ok(GradCheckReport {
        errors,
        analytic,
        numeric,
        max_error,
        tolerance: opts.tol,
        passed,
        non_finite,
    })
}

/// Adam with bias correction; moment buffers are created lazily on the
/// first step and matched to parameters by position.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.rows, g.cols)).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
