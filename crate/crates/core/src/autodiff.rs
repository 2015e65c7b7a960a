//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores its primitive,
//! the indices of its inputs (always smaller than its own index) and its
//! primal value. [`Tape::backward`] walks the list once in reverse, so a
//! gradient costs a small constant multiple of the forward pass.
//!
//! Values are scalars, vectors or matrices of `f64`. Matrix primitives such as
//! [`Var::cholesky`] and the triangular solves carry their own adjoint rules
//! instead of being unrolled into scalar nodes.
//!
//! ```
//! use bayesfit::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.var(0.0);
//! let y = tape.var(2.0);
//! let f = x.mul(y).unwrap().add(x.exp().unwrap()).unwrap();
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(x).as_scalar(), 3.0);
//! assert_eq!(grads.wrt(y).as_scalar(), 0.0);
//! ```

use std::cell::RefCell;
use std::fmt;

use thiserror::Error;

use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector({n})"),
            Shape::Matrix(r, c) => write!(f, "matrix({r}x{c})"),
        }
    }
}

/// A scalar, vector or row-major matrix value.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    shape: Shape,
    data: Vec<f64>,
}

impl Value {
    pub fn scalar(x: f64) -> Self {
        Self {
            shape: Shape::Scalar,
            data: vec![x],
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self {
            shape: Shape::Vector(v.len()),
            data: v,
        }
    }

    pub fn matrix(m: Matrix) -> Self {
        Self {
            shape: Shape::Matrix(m.rows(), m.cols()),
            data: m.into_vec(),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    fn with_data(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Panics unless the value is a scalar.
    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.shape, Shape::Scalar, "value is a {}", self.shape);
        self.data[0]
    }

    /// Panics unless the value is a matrix.
    pub fn to_matrix(&self) -> Matrix {
        match self.shape {
            Shape::Matrix(r, c) => Matrix::from_row_major(r, c, self.data.clone()),
            s => panic!("value is a {s}"),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Value {
        Value::with_data(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, other: &Value, f: impl Fn(f64, f64) -> f64) -> Value {
        debug_assert_eq!(self.shape, other.shape);
        Value::with_data(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    fn accumulate(&mut self, other: &Value) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::scalar(x)
    }
}

impl From<Vec<f64>> for Value {
    fn from(v: Vec<f64>) -> Self {
        Value::vector(v)
    }
}

impl From<&[f64]> for Value {
    fn from(v: &[f64]) -> Self {
        Value::vector(v.to_vec())
    }
}

impl From<Matrix> for Value {
    fn from(m: Matrix) -> Self {
        Value::matrix(m)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("variables from different tapes cannot be combined")]
    TapeMismatch,
    #[error("backward requires a scalar output, got {0}")]
    NonScalarOutput(Shape),
    #[error("cholesky: matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

/// The primitives a tape can record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Elementwise, with scalar broadcasting on either side.
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    /// `ln(1 + exp(x))`, elementwise.
    Softplus,
    /// `x^c` for a constant exponent, elementwise.
    Power(f64),
    /// `c * x` for a constant `c`.
    Scale(f64),
    /// `x + c` for a constant `c`.
    Shift(f64),
    /// Sum of all elements.
    Sum,
    Dot,
    MatVec,
    MatMul,
    Cholesky,
    /// `L⁻¹ b` for lower-triangular `L`.
    SolveLower,
    /// `L⁻ᵀ b` for lower-triangular `L`.
    SolveLowerTransposed,
    /// `Σ ln A_ii`.
    LogDiagSum,
    /// Element `i` of a vector.
    Index(usize),
    /// `len` elements of a vector starting at `start`.
    Slice { start: usize, len: usize },
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Softplus => "softplus",
            Primitive::Power(_) => "power",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Sum => "sum",
            Primitive::Dot => "dot",
            Primitive::MatVec => "matvec",
            Primitive::MatMul => "matmul",
            Primitive::Cholesky => "cholesky",
            Primitive::SolveLower => "triangular_solve",
            Primitive::SolveLowerTransposed => "triangular_solve_transposed",
            Primitive::LogDiagSum => "log_diag_sum",
            Primitive::Index(_) => "index",
            Primitive::Slice { .. } => "slice",
        }
    }

    fn arity(self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::Dot
            | Primitive::MatVec
            | Primitive::MatMul
            | Primitive::SolveLower
            | Primitive::SolveLowerTransposed => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Leaf,
    Constant,
    Apply(Primitive),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: [usize; 2],
    value: Value,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    shape: Shape,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("index", &self.index)
            .field("shape", &self.shape)
            .finish()
    }
}

type AdResult<T> = Result<T, AdError>;

fn shape_err(p: Primitive, detail: String) -> AdError {
    AdError::Shape {
        op: p.name(),
        detail,
    }
}

fn broadcast_shape(p: Primitive, a: Shape, b: Shape) -> AdResult<Shape> {
    match (a, b) {
        _ if a == b => Ok(a),
        (Shape::Scalar, s) | (s, Shape::Scalar) => Ok(s),
        _ => Err(shape_err(p, format!("cannot combine {a} with {b}"))),
    }
}

fn broadcast(a: &Value, b: &Value, f: impl Fn(f64, f64) -> f64) -> Value {
    match (a.shape, b.shape) {
        (Shape::Scalar, s) if s != Shape::Scalar => {
            let x = a.data[0];
            Value::with_data(s, b.data.iter().map(|&y| f(x, y)).collect())
        }
        (s, Shape::Scalar) if s != Shape::Scalar => {
            let y = b.data[0];
            Value::with_data(s, a.data.iter().map(|&x| f(x, y)).collect())
        }
        _ => a.zip(b, f),
    }
}

/// Reduces an adjoint of the broadcast output back onto an input's shape.
fn unbroadcast(g: Value, target: Shape) -> Value {
    if g.shape == target {
        g
    } else {
        Value::scalar(g.data.iter().sum())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn lower_part(m: &mut Matrix) {
    let n = m.rows();
    for i in 0..n {
        for j in i + 1..n {
            m[(i, j)] = 0.0;
        }
    }
}

fn forward(p: Primitive, a: &Value, b: Option<&Value>) -> AdResult<Value> {
    let bin = || b.expect("binary primitive without second input");
    Ok(match p {
        Primitive::Add => {
            broadcast_shape(p, a.shape, bin().shape)?;
            broadcast(a, bin(), |x, y| x + y)
        }
        Primitive::Sub => {
            broadcast_shape(p, a.shape, bin().shape)?;
            broadcast(a, bin(), |x, y| x - y)
        }
        Primitive::Mul => {
            broadcast_shape(p, a.shape, bin().shape)?;
            broadcast(a, bin(), |x, y| x * y)
        }
        Primitive::Div => {
            broadcast_shape(p, a.shape, bin().shape)?;
            broadcast(a, bin(), |x, y| x / y)
        }
        Primitive::Neg => a.map(|x| -x),
        Primitive::Exp => a.map(f64::exp),
        Primitive::Log => a.map(f64::ln),
        Primitive::Softplus => a.map(softplus),
        Primitive::Power(c) => {
            if c == 2.0 {
                a.map(|x| x * x)
            } else {
                a.map(|x| x.powf(c))
            }
        }
        Primitive::Scale(c) => a.map(|x| c * x),
        Primitive::Shift(c) => a.map(|x| x + c),
        Primitive::Sum => Value::scalar(a.data.iter().sum()),
        Primitive::Dot => {
            let b = bin();
            match (a.shape, b.shape) {
                (Shape::Vector(n), Shape::Vector(m)) if n == m => {
                    Value::scalar(linalg::dot(&a.data, &b.data))
                }
                (sa, sb) => return Err(shape_err(p, format!("needs equal vectors, got {sa} and {sb}"))),
            }
        }
        Primitive::MatVec => {
            let b = bin();
            match (a.shape, b.shape) {
                (Shape::Matrix(_, c), Shape::Vector(n)) if c == n => {
                    Value::vector(a.to_matrix().matvec(&b.data))
                }
                (sa, sb) => return Err(shape_err(p, format!("cannot multiply {sa} by {sb}"))),
            }
        }
        Primitive::MatMul => {
            let b = bin();
            match (a.shape, b.shape) {
                (Shape::Matrix(_, k), Shape::Matrix(k2, _)) if k == k2 => {
                    Value::matrix(a.to_matrix().matmul(&b.to_matrix()))
                }
                (sa, sb) => return Err(shape_err(p, format!("cannot multiply {sa} by {sb}"))),
            }
        }
        Primitive::Cholesky => match a.shape {
            Shape::Matrix(r, c) if r == c => {
                let l = a
                    .to_matrix()
                    .cholesky()
                    .map_err(|e| AdError::NotPositiveDefinite { pivot: e.pivot })?;
                Value::matrix(l)
            }
            s => return Err(shape_err(p, format!("needs a square matrix, got {s}"))),
        },
        Primitive::SolveLower | Primitive::SolveLowerTransposed => {
            let b = bin();
            match (a.shape, b.shape) {
                (Shape::Matrix(r, c), Shape::Vector(n)) if r == c && c == n => {
                    let l = a.to_matrix();
                    Value::vector(if p == Primitive::SolveLower {
                        linalg::solve_lower(&l, &b.data)
                    } else {
                        linalg::solve_lower_transposed(&l, &b.data)
                    })
                }
                (sa, sb) => return Err(shape_err(p, format!("cannot solve {sa} against {sb}"))),
            }
        }
        Primitive::LogDiagSum => match a.shape {
            Shape::Matrix(r, c) if r == c => {
                Value::scalar((0..r).map(|i| a.data[i * c + i].ln()).sum())
            }
            s => return Err(shape_err(p, format!("needs a square matrix, got {s}"))),
        },
        Primitive::Index(i) => match a.shape {
            Shape::Vector(n) if i < n => Value::scalar(a.data[i]),
            s => return Err(shape_err(p, format!("index {i} out of range for {s}"))),
        },
        Primitive::Slice { start, len } => match a.shape {
            Shape::Vector(n) if start + len <= n => Value::vector(a.data[start..start + len].to_vec()),
            s => {
                return Err(shape_err(
                    p,
                    format!("range {start}..{} out of range for {s}", start + len),
                ))
            }
        },
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: [usize; 2], value: Value) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let shape = value.shape;
        nodes.push(Node { op, inputs, value });
        Var {
            tape: self,
            index: nodes.len() - 1,
            shape,
        }
    }

    /// Records an input whose gradient is wanted.
    pub fn var(&self, value: impl Into<Value>) -> Var<'_> {
        self.push(Op::Leaf, [usize::MAX; 2], value.into())
    }

    /// Records an input treated as a constant; its adjoint is never formed.
    pub fn constant(&self, value: impl Into<Value>) -> Var<'_> {
        self.push(Op::Constant, [usize::MAX; 2], value.into())
    }

    /// Applies `p` to `inputs` and appends the result.
    pub fn record<'t>(&'t self, p: Primitive, inputs: &[Var<'t>]) -> AdResult<Var<'t>> {
        if inputs.len() != p.arity() {
            return Err(shape_err(
                p,
                format!("expects {} inputs, got {}", p.arity(), inputs.len()),
            ));
        }
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(AdError::TapeMismatch);
        }
        let value = {
            let nodes = self.nodes.borrow();
            let a = &nodes[inputs[0].index].value;
            let b = inputs.get(1).map(|v| &nodes[v.index].value);
            forward(p, a, b)?
        };
        let idx = [inputs[0].index, inputs.get(1).map_or(usize::MAX, |v| v.index)];
        Ok(self.push(Op::Apply(p), idx, value))
    }

    /// Primal value of `v`.
    pub fn value(&self, v: Var<'_>) -> Value {
        self.nodes.borrow()[v.index].value.clone()
    }

    /// Reverse sweep seeded at the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> AdResult<Gradients> {
        if !std::ptr::eq(output.tape, self) {
            return Err(AdError::TapeMismatch);
        }
        if output.shape != Shape::Scalar {
            return Err(AdError::NonScalarOutput(output.shape));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Value>> = vec![None; output.index + 1];
        adj[output.index] = Some(Value::scalar(1.0));
        for k in (0..=output.index).rev() {
            let Some(g) = adj[k].take() else { continue };
            let node = &nodes[k];
            let Op::Apply(p) = node.op else {
                adj[k] = Some(g);
                continue;
            };
            let ia = node.inputs[0];
            let ib = node.inputs[1];
            let a = &nodes[ia].value;
            let b = (ib != usize::MAX).then(|| &nodes[ib].value);
            let wants = |i: usize| i != usize::MAX && nodes[i].op != Op::Constant;
            let (ga, gb) = adjoint(p, &g, a, b, &node.value, wants(ia), b.is_some() && wants(ib));
            for (i, gi) in [(ia, ga), (ib, gb)] {
                if let Some(gi) = gi {
                    match &mut adj[i] {
                        Some(acc) => acc.accumulate(&gi),
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            adj[k] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }
}

fn adjoint(
    p: Primitive,
    g: &Value,
    a: &Value,
    b: Option<&Value>,
    out: &Value,
    want_a: bool,
    want_b: bool,
) -> (Option<Value>, Option<Value>) {
    let b_ = || b.expect("binary primitive without second input");
    match p {
        Primitive::Add => (
            want_a.then(|| unbroadcast(g.clone(), a.shape)),
            want_b.then(|| unbroadcast(g.clone(), b_().shape)),
        ),
        Primitive::Sub => (
            want_a.then(|| unbroadcast(g.clone(), a.shape)),
            want_b.then(|| unbroadcast(g.map(|x| -x), b_().shape)),
        ),
        Primitive::Mul => (
            want_a.then(|| unbroadcast(broadcast(g, b_(), |x, y| x * y), a.shape)),
            want_b.then(|| unbroadcast(broadcast(g, a, |x, y| x * y), b_().shape)),
        ),
        Primitive::Div => {
            let b = b_();
            (
                want_a.then(|| unbroadcast(broadcast(g, b, |x, y| x / y), a.shape)),
                want_b.then(|| {
                    let go = g.zip(out, |x, o| x * o);
                    unbroadcast(broadcast(&go, b, |x, y| -x / y), b.shape)
                }),
            )
        }
        Primitive::Neg => (want_a.then(|| g.map(|x| -x)), None),
        Primitive::Exp => (want_a.then(|| g.zip(out, |x, o| x * o)), None),
        Primitive::Log => (want_a.then(|| g.zip(a, |x, y| x / y)), None),
        Primitive::Softplus => (want_a.then(|| g.zip(a, |x, y| x * sigmoid(y))), None),
        Primitive::Power(c) => (
            want_a.then(|| {
                if c == 2.0 {
                    g.zip(a, |x, y| 2.0 * x * y)
                } else {
                    g.zip(a, |x, y| x * c * y.powf(c - 1.0))
                }
            }),
            None,
        ),
        Primitive::Scale(c) => (want_a.then(|| g.map(|x| c * x)), None),
        Primitive::Shift(_) => (want_a.then(|| g.clone()), None),
        Primitive::Sum => (
            want_a.then(|| Value::with_data(a.shape, vec![g.data[0]; a.shape.len()])),
            None,
        ),
        Primitive::Dot => {
            let s = g.data[0];
            (
                want_a.then(|| b_().map(|y| s * y)),
                want_b.then(|| a.map(|x| s * x)),
            )
        }
        Primitive::MatVec => {
            let (r, c) = match a.shape {
                Shape::Matrix(r, c) => (r, c),
                _ => unreachable!(),
            };
            let v = b_();
            let ga = want_a.then(|| {
                let m = Matrix::from_fn(r, c, |i, j| g.data[i] * v.data[j]);
                Value::matrix(m)
            });
            let gb = want_b.then(|| Value::vector(a.to_matrix().transpose().matvec(&g.data)));
            (ga, gb)
        }
        Primitive::MatMul => {
            let gm = g.to_matrix();
            (
                want_a.then(|| Value::matrix(gm.matmul(&b_().to_matrix().transpose()))),
                want_b.then(|| Value::matrix(a.to_matrix().transpose().matmul(&gm))),
            )
        }
        Primitive::Cholesky => (want_a.then(|| cholesky_adjoint(&out.to_matrix(), &g.to_matrix())), None),
        Primitive::SolveLower => {
            // x = L⁻¹ b:  b̄ = L⁻ᵀ x̄,  L̄ = −tril(b̄ xᵀ)
            let l = a.to_matrix();
            let bbar = linalg::solve_lower_transposed(&l, &g.data);
            let ga = want_a.then(|| {
                let n = l.rows();
                let mut m = Matrix::from_fn(n, n, |i, j| -bbar[i] * out.data[j]);
                lower_part(&mut m);
                Value::matrix(m)
            });
            (ga, want_b.then(|| Value::vector(bbar)))
        }
        Primitive::SolveLowerTransposed => {
            // x = L⁻ᵀ b:  b̄ = L⁻¹ x̄,  L̄ = −tril(x b̄ᵀ)
            let l = a.to_matrix();
            let bbar = linalg::solve_lower(&l, &g.data);
            let ga = want_a.then(|| {
                let n = l.rows();
                let mut m = Matrix::from_fn(n, n, |i, j| -out.data[i] * bbar[j]);
                lower_part(&mut m);
                Value::matrix(m)
            });
            (ga, want_b.then(|| Value::vector(bbar)))
        }
        Primitive::LogDiagSum => (
            want_a.then(|| {
                let n = match a.shape {
                    Shape::Matrix(n, _) => n,
                    _ => unreachable!(),
                };
                let mut m = Matrix::zeros(n, n);
                for i in 0..n {
                    m[(i, i)] = g.data[0] / a.data[i * n + i];
                }
                Value::matrix(m)
            }),
            None,
        ),
        Primitive::Index(i) => (
            want_a.then(|| {
                let mut v = Value::zeros(a.shape);
                v.data[i] = g.data[0];
                v
            }),
            None,
        ),
        Primitive::Slice { start, len } => (
            want_a.then(|| {
                let mut v = Value::zeros(a.shape);
                v.data[start..start + len].copy_from_slice(&g.data);
                v
            }),
            None,
        ),
    }
}

/// Adjoint of `A ↦ chol(A)`, returned symmetrized.
///
/// With `P = Φ(Lᵀ L̄)` (lower triangle, halved diagonal) the lower-triangle
/// adjoint is `Φ(L⁻ᵀ P L⁻¹)`; the symmetric form spreads off-diagonal mass
/// evenly over `(i, j)` and `(j, i)`.
fn cholesky_adjoint(l: &Matrix, lbar: &Matrix) -> Value {
    let n = l.rows();
    let mut p = l.transpose().matmul(lbar);
    for i in 0..n {
        for j in i + 1..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // X = P L⁻¹, row by row: Lᵀ xᵢᵀ = pᵢᵀ
    let mut x = Matrix::zeros(n, n);
    for i in 0..n {
        let row = linalg::solve_lower_transposed(l, p.row(i));
        for j in 0..n {
            x[(i, j)] = row[j];
        }
    }
    // S = L⁻ᵀ X, column by column
    let mut s = Matrix::zeros(n, n);
    for j in 0..n {
        let col = linalg::solve_lower_transposed(l, &x.column(j));
        for i in 0..n {
            s[(i, j)] = col[i];
        }
    }
    let sym = Matrix::from_fn(n, n, |i, j| 0.5 * (s[(i, j)] + s[(j, i)]));
    Value::matrix(sym)
}

/// Adjoints from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Value>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Adjoint of `v`; zero when `v` does not feed the output.
    pub fn wrt(&self, v: Var<'_>) -> Value {
        self.adjoints
            .get(v.index)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Value::zeros(self.shapes[v.index]))
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Value {
        self.tape.value(*self)
    }

    /// Primal of a scalar var. Panics on other shapes.
    pub fn scalar(&self) -> f64 {
        self.value().as_scalar()
    }

    fn unary(self, p: Primitive) -> AdResult<Var<'t>> {
        self.tape.record(p, &[self])
    }

    fn binary(self, p: Primitive, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.tape.record(p, &[self, rhs])
    }

    pub fn add(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::Add, rhs)
    }

    pub fn sub(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::Sub, rhs)
    }

    pub fn mul(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::Mul, rhs)
    }

    pub fn div(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::Div, rhs)
    }

    pub fn neg(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Neg)
    }

    pub fn exp(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Exp)
    }

    pub fn ln(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Log)
    }

    pub fn softplus(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Softplus)
    }

    pub fn powf(self, c: f64) -> AdResult<Var<'t>> {
        self.unary(Primitive::Power(c))
    }

    pub fn square(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Power(2.0))
    }

    pub fn scale(self, c: f64) -> AdResult<Var<'t>> {
        self.unary(Primitive::Scale(c))
    }

    pub fn shift(self, c: f64) -> AdResult<Var<'t>> {
        self.unary(Primitive::Shift(c))
    }

    pub fn sum(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Sum)
    }

    pub fn dot(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::Dot, rhs)
    }

    pub fn matvec(self, v: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::MatVec, v)
    }

    pub fn matmul(self, rhs: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::MatMul, rhs)
    }

    pub fn cholesky(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::Cholesky)
    }

    /// `self⁻¹ b`, treating `self` as lower triangular.
    pub fn solve_lower(self, b: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::SolveLower, b)
    }

    /// `self⁻ᵀ b`, treating `self` as lower triangular.
    pub fn solve_lower_transposed(self, b: Var<'t>) -> AdResult<Var<'t>> {
        self.binary(Primitive::SolveLowerTransposed, b)
    }

    pub fn log_diag_sum(self) -> AdResult<Var<'t>> {
        self.unary(Primitive::LogDiagSum)
    }

    pub fn at(self, i: usize) -> AdResult<Var<'t>> {
        self.unary(Primitive::Index(i))
    }

    pub fn slice(self, start: usize, len: usize) -> AdResult<Var<'t>> {
        self.unary(Primitive::Slice { start, len })
    }
}
