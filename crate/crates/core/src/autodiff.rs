//! Reverse-mode automatic differentiation over matrix-valued expressions.
//!
//! A [`Graph`] is built once (define, then run). Nodes hold matrices; scalars
//! are `1 x 1`. Leaves are either constants or named slots of a
//! [`ParamStore`]. [`Graph::forward`] evaluates and caches every node
//! reachable from the output, [`Graph::backward`] propagates adjoints and
//! accumulates them into the store's gradient vectors.
//!
//! ```
//! use wideprior::autodiff::{Graph, ParamStore};
//!
//! let mut store = ParamStore::<f64>::new();
//! store.insert("x", vec![3.0]).unwrap();
//! let mut g = Graph::new();
//! let x = g.param("x");
//! let y = g.mul(x, x);
//! g.set_output(y);
//! assert_eq!(g.forward(&store).unwrap(), 9.0);
//! g.backward(&mut store).unwrap();
//! assert_eq!(store.grad("x").unwrap(), &[6.0]);
//! ```

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("non-finite value produced by node {node} ({op})")]
    NonFiniteValue { node: usize, op: String },
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { node: usize, op: String },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },
    #[error("parameter `{0}` is not bound in the store")]
    UnboundParam(String),
    #[error("parameter `{0}` already exists")]
    DuplicateParam(String),
    #[error("parameter `{name}` expects {expected} values, got {got}")]
    ParamLength {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("backward called without a fresh forward pass")]
    BackwardWithoutForward,
    #[error("graph has no output node")]
    NoOutput,
    #[error("output node must be 1x1, got {0}x{1}")]
    NonScalarOutput(usize, usize),
    #[error("{0}")]
    Custom(String),
}

pub type Result<T> = std::result::Result<T, AdError>;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Slot<T> {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<T>,
    grad: Vec<T>,
}

/// Named trainable parameters with accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a column-vector parameter.
    pub fn insert(&mut self, name: &str, value: Vec<T>) -> Result<()> {
        self.insert_matrix(name, Matrix::column(value))
    }

    pub fn insert_matrix(&mut self, name: &str, value: Matrix<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let (rows, cols) = value.shape();
        let value = value.into_data();
        self.index.insert(name.to_string(), self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            rows,
            cols,
            grad: vec![T::zero(); value.len()],
            value,
        });
        Ok(())
    }

    fn slot(&self, name: &str) -> Result<&Slot<T>> {
        self.index
            .get(name)
            .map(|&i| &self.slots[i])
            .ok_or_else(|| AdError::UnboundParam(name.to_string()))
    }

    fn slot_mut(&mut self, name: &str) -> Result<&mut Slot<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.slots[i]),
            None => Err(AdError::UnboundParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&[T]> {
        self.slot(name).map(|s| s.value.as_slice())
    }

    pub fn grad(&self, name: &str) -> Result<&[T]> {
        self.slot(name).map(|s| s.grad.as_slice())
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix<T>> {
        let s = self.slot(name)?;
        Ok(Matrix::new(s.rows, s.cols, s.value.clone()).expect("slot shape"))
    }

    pub fn set(&mut self, name: &str, value: &[T]) -> Result<()> {
        let s = self.slot_mut(name)?;
        if s.value.len() != value.len() {
            return Err(AdError::ParamLength {
                name: name.to_string(),
                expected: s.value.len(),
                got: value.len(),
            });
        }
        s.value.copy_from_slice(value);
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut [T]> {
        self.slot_mut(name).map(|s| s.value.as_mut_slice())
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// Total number of scalar parameters.
    pub fn dim(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// All values concatenated in insertion order.
    pub fn flat_values(&self) -> Vec<T> {
        self.slots.iter().flat_map(|s| s.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.slots.iter().flat_map(|s| s.grad.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.dim() {
            return Err(AdError::ParamLength {
                name: "<flat>".into(),
                expected: self.dim(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for s in &mut self.slots {
            let n = s.value.len();
            s.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn accumulate(&mut self, name: &str, g: &Matrix<T>) -> Result<()> {
        let s = self.slot_mut(name)?;
        for (acc, &v) in s.grad.iter_mut().zip(g.data()) {
            *acc += v;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Custom operations
// ---------------------------------------------------------------------------

/// A fused operation with a hand-written adjoint. Implementors are plugged
/// into a graph with [`Graph::custom`].
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&mut self, inputs: &[&Matrix<T>]) -> Result<Matrix<T>>;

    /// Vector–Jacobian product. `needs[k]` tells whether input `k` requires a
    /// gradient; entries for inputs that do not may be `None`.
    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        output: &Matrix<T>,
        grad_output: &Matrix<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Matrix<T>>>>;

    fn box_clone(&self) -> Box<dyn CustomOp<T>>;
}

impl<T: Scalar> Clone for Box<dyn CustomOp<T>> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// Subgradient 0 at 0.
    Abs,
    /// `max(x, 0)`, subgradient 0 at 0.
    Relu,
    Sqrt,
    Softplus,
    Transpose,
    Sum,
    Mean,
    Trace,
    /// `R x C -> 1 x C`.
    ColMean,
    /// `(A + Aᵀ)/2`.
    Symmetrize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    MatMul,
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Param(String),
    Const(Matrix<T>),
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Scale(NodeId, T),
    AddConst(NodeId, T),
    AddIdentity(NodeId, T),
    PowConst(NodeId, T),
    Custom(Box<dyn CustomOp<T>>, Vec<NodeId>),
}

impl<T: Scalar> Op<T> {
    fn label(&self) -> String {
        match self {
            Op::Param(n) => format!("param:{n}"),
            Op::Const(_) => "const".into(),
            Op::Unary(u, _) => format!("{u:?}").to_lowercase(),
            Op::Binary(b, _, _) => format!("{b:?}").to_lowercase(),
            Op::Scale(_, _) => "scale".into(),
            Op::AddConst(_, _) => "add_const".into(),
            Op::AddIdentity(_, _) => "add_identity".into(),
            Op::PowConst(_, _) => "pow_const".into(),
            Op::Custom(op, _) => op.name().to_string(),
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Const(_) => vec![],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::AddIdentity(a, _)
            | Op::PowConst(a, _) => vec![*a],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Custom(_, ins) => ins.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Stale,
    Forwarded,
    Consumed,
}

/// Expression graph. Nodes are appended in topological order.
#[derive(Clone)]
pub struct Graph<T: Scalar> {
    ops: Vec<Op<T>>,
    values: Vec<Option<Matrix<T>>>,
    output: Option<NodeId>,
    state: State,
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.ops.len())
            .field("output", &self.output)
            .field("state", &self.state)
            .finish()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sums `g` down to shape `(rows, cols)` along broadcast dimensions.
fn reduce_to<T: Scalar>(g: &Matrix<T>, rows: usize, cols: usize) -> Matrix<T> {
    if g.shape() == (rows, cols) {
        return g.clone();
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..g.rows() {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..g.cols() {
            let oj = if cols == 1 { 0 } else { j };
            out[(oi, oj)] += g[(i, j)];
        }
    }
    out
}

#[inline]
fn bget<T: Scalar>(m: &Matrix<T>, i: usize, j: usize) -> T {
    let ii = if m.rows() == 1 { 0 } else { i };
    let jj = if m.cols() == 1 { 0 } else { j };
    m[(ii, jj)]
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            output: None,
            state: State::Stale,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.ops.len(), "node {} is not part of this graph", input.0);
        }
        self.ops.push(op);
        self.values.push(None);
        self.state = State::Stale;
        NodeId(self.ops.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param(name.to_string()))
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn scalar(&mut self, value: T) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> NodeId {
        self.push(Op::Unary(op, a))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Div, a, b)
    }
    /// Elementwise `a^b`; `a` must be positive where `b` is differentiated.
    pub fn pow(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::Pow, a, b)
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryOp::MatMul, a, b)
    }
    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Log, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sigmoid, a)
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Abs, a)
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Relu, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Softplus, a)
    }
    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Transpose, a)
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Sum, a)
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Mean, a)
    }
    pub fn trace(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Trace, a)
    }
    pub fn col_mean(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::ColMean, a)
    }
    pub fn symmetrize(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryOp::Symmetrize, a)
    }
    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::Scale(a, c))
    }
    pub fn add_const(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::AddConst(a, c))
    }
    /// `a + c·I` for square `a`.
    pub fn add_identity(&mut self, a: NodeId, c: T) -> NodeId {
        self.push(Op::AddIdentity(a, c))
    }
    pub fn powf(&mut self, a: NodeId, p: T) -> NodeId {
        self.push(Op::PowConst(a, p))
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[NodeId]) -> NodeId {
        self.push(Op::Custom(op, inputs.to_vec()))
    }

    /// Records `iters` coupled Newton–Schulz steps on `a / tr(a)` and the
    /// `√tr(a)` rescaling, all as ordinary differentiable nodes. Mirrors
    /// [`crate::linalg::sqrt_spd_unchecked`] operation for operation.
    pub fn sqrt_spd(&mut self, a: NodeId, iters: usize, n: usize) -> NodeId {
        let tr = self.trace(a);
        let mut y = self.div(a, tr);
        let mut z = self.constant(Matrix::identity(n));
        for _ in 0..iters {
            let zy = self.matmul(z, y);
            let half = self.scale(zy, lit(-0.5));
            let t = self.add_identity(half, lit(1.5));
            let ny = self.matmul(y, t);
            let nz = self.matmul(t, z);
            y = ny;
            z = nz;
        }
        let root_tr = self.sqrt(tr);
        let s = self.mul(y, root_tr);
        self.symmetrize(s)
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
        self.state = State::Stale;
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Cached value after a forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Matrix<T>> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    fn reachable(&self, out: NodeId) -> Vec<bool> {
        let mut mark = vec![false; self.ops.len()];
        mark[out.0] = true;
        for i in (0..=out.0).rev() {
            if mark[i] {
                for input in self.ops[i].inputs() {
                    mark[input.0] = true;
                }
            }
        }
        mark
    }

    fn requires_grad(&self, live: &[bool]) -> Vec<bool> {
        let mut req = vec![false; self.ops.len()];
        for i in 0..self.ops.len() {
            if !live[i] {
                continue;
            }
            req[i] = match &self.ops[i] {
                Op::Param(_) => true,
                Op::Const(_) => false,
                op => op.inputs().iter().any(|k| req[k.0]),
            };
        }
        req
    }

    /// Evaluates the graph and returns the scalar output.
    pub fn forward(&mut self, params: &ParamStore<T>) -> Result<T> {
        let out = self.output.ok_or(AdError::NoOutput)?;
        let live = self.reachable(out);
        for v in &mut self.values {
            *v = None;
        }
        for i in 0..=out.0 {
            if !live[i] {
                continue;
            }
            let value = self.eval_node(i, params)?;
            if let Some((r, c)) = value.first_non_finite() {
                let _ = (r, c);
                return Err(AdError::NonFiniteValue {
                    node: i,
                    op: self.ops[i].label(),
                });
            }
            self.values[i] = Some(value);
        }
        let v = self.values[out.0].as_ref().unwrap();
        if v.shape() != (1, 1) {
            return Err(AdError::NonScalarOutput(v.rows(), v.cols()));
        }
        self.state = State::Forwarded;
        Ok(v.item())
    }

    fn val(&self, id: NodeId) -> &Matrix<T> {
        self.values[id.0].as_ref().expect("operand evaluated")
    }

    fn shape_err(&self, node: usize, detail: String) -> AdError {
        AdError::ShapeMismatch {
            node,
            op: self.ops[node].label(),
            detail,
        }
    }

    fn eval_node(&mut self, i: usize, params: &ParamStore<T>) -> Result<Matrix<T>> {
        // Custom ops need `&mut` access to themselves and `&` to operand values.
        if let Op::Custom(_, ins) = &self.ops[i] {
            let ins = ins.clone();
            let operands: Vec<Matrix<T>> = ins.iter().map(|k| self.val(*k).clone()).collect();
            let refs: Vec<&Matrix<T>> = operands.iter().collect();
            if let Op::Custom(op, _) = &mut self.ops[i] {
                return op.forward(&refs);
            }
            unreachable!()
        }
        let op = &self.ops[i];
        Ok(match op {
            Op::Param(name) => params.matrix(name)?,
            Op::Const(m) => m.clone(),
            Op::Unary(u, a) => {
                let x = self.val(*a);
                match u {
                    UnaryOp::Neg => x.map(|v| -v),
                    UnaryOp::Exp => x.map(|v| v.exp()),
                    UnaryOp::Log => x.map(|v| v.ln()),
                    UnaryOp::Tanh => x.map(|v| v.tanh()),
                    UnaryOp::Sigmoid => x.map(sigmoid),
                    UnaryOp::Abs => x.map(|v| v.abs()),
                    UnaryOp::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
                    UnaryOp::Sqrt => x.map(|v| v.sqrt()),
                    UnaryOp::Softplus => x.map(softplus),
                    UnaryOp::Transpose => x.transpose(),
                    UnaryOp::Sum => Matrix::scalar(x.data().iter().copied().sum()),
                    UnaryOp::Mean => {
                        Matrix::scalar(x.data().iter().copied().sum::<T>() / lit(x.len() as f64))
                    }
                    UnaryOp::Trace => {
                        if !x.is_square() {
                            return Err(self.shape_err(i, format!("trace of {:?}", x.shape())));
                        }
                        Matrix::scalar(x.trace())
                    }
                    UnaryOp::ColMean => {
                        let n = lit::<T>(x.rows() as f64);
                        let mut m = Matrix::zeros(1, x.cols());
                        for r in 0..x.rows() {
                            for (acc, &v) in m.data_mut().iter_mut().zip(x.row(r)) {
                                *acc += v;
                            }
                        }
                        m.map(|v| v / n)
                    }
                    UnaryOp::Symmetrize => {
                        if !x.is_square() {
                            return Err(self.shape_err(i, format!("symmetrize {:?}", x.shape())));
                        }
                        x.symmetrize()
                    }
                }
            }
            Op::Binary(b, l, r) => {
                let x = self.val(*l);
                let y = self.val(*r);
                if *b == BinaryOp::MatMul {
                    if x.cols() != y.rows() {
                        return Err(self.shape_err(
                            i,
                            format!("{:?} x {:?}", x.shape(), y.shape()),
                        ));
                    }
                    x.matmul(y)
                } else {
                    let (Some(rows), Some(cols)) = (
                        broadcast_dim(x.rows(), y.rows()),
                        broadcast_dim(x.cols(), y.cols()),
                    ) else {
                        return Err(self.shape_err(
                            i,
                            format!("cannot broadcast {:?} with {:?}", x.shape(), y.shape()),
                        ));
                    };
                    let f: fn(T, T) -> T = match b {
                        BinaryOp::Add => |a, b| a + b,
                        BinaryOp::Sub => |a, b| a - b,
                        BinaryOp::Mul => |a, b| a * b,
                        BinaryOp::Div => |a, b| a / b,
                        BinaryOp::Pow => |a, b| a.powf(b),
                        BinaryOp::MatMul => unreachable!(),
                    };
                    if x.shape() == y.shape() {
                        x.zip_map(y, f)
                    } else {
                        Matrix::from_fn(rows, cols, |r, c| f(bget(x, r, c), bget(y, r, c)))
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.val(*a).map(|v| v * c)
            }
            Op::AddConst(a, c) => {
                let c = *c;
                self.val(*a).map(|v| v + c)
            }
            Op::AddIdentity(a, c) => {
                let x = self.val(*a);
                if !x.is_square() {
                    return Err(self.shape_err(i, format!("add_identity {:?}", x.shape())));
                }
                x.add_diag(*c)
            }
            Op::PowConst(a, p) => {
                let p = *p;
                self.val(*a).map(|v| v.powf(p))
            }
            Op::Custom(..) => unreachable!(),
        })
    }

    /// Propagates adjoints from the output and adds them to the gradients of
    /// the bound parameters. Requires a forward pass since the last backward.
    pub fn backward(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.state != State::Forwarded {
            return Err(AdError::BackwardWithoutForward);
        }
        let out = self.output.ok_or(AdError::NoOutput)?;
        self.state = State::Consumed;
        let live = self.reachable(out);
        let req = self.requires_grad(&live);
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; self.ops.len()];
        adj[out.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=out.0).rev() {
            if !req[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Some((_, _)) = g.first_non_finite() {
                return Err(AdError::NonFiniteGradient {
                    node: i,
                    op: self.ops[i].label(),
                });
            }
            let contributions = self.vjp(i, &g, &req)?;
            for (input, grad) in contributions {
                if !req[input.0] {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
            if let Op::Param(name) = &self.ops[i] {
                params.accumulate(name, &g)?;
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &Matrix<T>, req: &[bool]) -> Result<Vec<(NodeId, Matrix<T>)>> {
        let y = self.values[i].as_ref().expect("forward value");
        let one = T::one();
        Ok(match &self.ops[i] {
            Op::Param(_) | Op::Const(_) => vec![],
            Op::Unary(u, a) => {
                let x = self.val(*a);
                let d = match u {
                    UnaryOp::Neg => g.map(|v| -v),
                    UnaryOp::Exp => g.zip_map(y, |g, y| g * y),
                    UnaryOp::Log => g.zip_map(x, |g, x| g / x),
                    UnaryOp::Tanh => g.zip_map(y, |g, y| g * (one - y * y)),
                    UnaryOp::Sigmoid => g.zip_map(y, |g, y| g * y * (one - y)),
                    UnaryOp::Abs => g.zip_map(x, |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                    UnaryOp::Relu => g.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() }),
                    UnaryOp::Sqrt => g.zip_map(y, |g, y| g / (y + y)),
                    UnaryOp::Softplus => g.zip_map(x, |g, x| g * sigmoid(x)),
                    UnaryOp::Transpose => g.transpose(),
                    UnaryOp::Sum => Matrix::filled(x.rows(), x.cols(), g.item()),
                    UnaryOp::Mean => {
                        Matrix::filled(x.rows(), x.cols(), g.item() / lit(x.len() as f64))
                    }
                    UnaryOp::Trace => {
                        let mut m = Matrix::zeros(x.rows(), x.cols());
                        for k in 0..x.rows() {
                            m[(k, k)] = g.item();
                        }
                        m
                    }
                    UnaryOp::ColMean => {
                        let n = lit::<T>(x.rows() as f64);
                        Matrix::from_fn(x.rows(), x.cols(), |_, c| g[(0, c)] / n)
                    }
                    UnaryOp::Symmetrize => g.symmetrize(),
                };
                vec![(*a, d)]
            }
            Op::Binary(b, l, r) => {
                let x = self.val(*l);
                let z = self.val(*r);
                let mut out = Vec::with_capacity(2);
                match b {
                    BinaryOp::MatMul => {
                        if req[l.0] {
                            out.push((*l, g.matmul_t(z)));
                        }
                        if req[r.0] {
                            out.push((*r, x.t_matmul(g)));
                        }
                    }
                    _ => {
                        let (rows, cols) = g.shape();
                        let mut gx = Matrix::zeros(rows, cols);
                        let mut gz = Matrix::zeros(rows, cols);
                        for rr in 0..rows {
                            for cc in 0..cols {
                                let a = bget(x, rr, cc);
                                let c = bget(z, rr, cc);
                                let gv = g[(rr, cc)];
                                let (da, dc) = match b {
                                    BinaryOp::Add => (gv, gv),
                                    BinaryOp::Sub => (gv, -gv),
                                    BinaryOp::Mul => (gv * c, gv * a),
                                    BinaryOp::Div => (gv / c, -gv * a / (c * c)),
                                    BinaryOp::Pow => {
                                        let p = a.powf(c);
                                        let da = if c == T::zero() {
                                            T::zero()
                                        } else {
                                            gv * c * a.powf(c - one)
                                        };
                                        let dc = if req[r.0] { gv * p * a.ln() } else { T::zero() };
                                        (da, dc)
                                    }
                                    BinaryOp::MatMul => unreachable!(),
                                };
                                gx[(rr, cc)] = da;
                                gz[(rr, cc)] = dc;
                            }
                        }
                        if req[l.0] {
                            out.push((*l, reduce_to(&gx, x.rows(), x.cols())));
                        }
                        if req[r.0] {
                            out.push((*r, reduce_to(&gz, z.rows(), z.cols())));
                        }
                    }
                }
                out
            }
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, g.map(|v| v * c))]
            }
            Op::AddConst(a, _) | Op::AddIdentity(a, _) => vec![(*a, g.clone())],
            Op::PowConst(a, p) => {
                let p = *p;
                let x = self.val(*a);
                vec![(*a, g.zip_map(x, |g, x| g * p * x.powf(p - one)))]
            }
            Op::Custom(op, ins) => {
                let refs: Vec<&Matrix<T>> = ins.iter().map(|k| self.val(*k)).collect();
                let needs: Vec<bool> = ins.iter().map(|k| req[k.0]).collect();
                let grads = op.backward(&refs, y, g, &needs)?;
                ins.iter()
                    .zip(grads)
                    .filter_map(|(k, gk)| gk.map(|m| (*k, m)))
                    .collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(name: &str, v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, vec![v]).unwrap();
        s
    }

    #[test]
    fn square_value_and_gradient() {
        let mut store = scalar_store("x", 3.0);
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.mul(x, x);
        g.set_output(y);
        assert_eq!(g.forward(&store).unwrap(), 9.0);
        g.backward(&mut store).unwrap();
        assert_eq!(store.grad("x").unwrap(), &[6.0]);
    }

    #[test]
    fn exp_of_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let z = g.scalar(0.0);
        let e = g.exp(z);
        g.set_output(e);
        assert_eq!(g.forward(&store).unwrap(), 1.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut store = scalar_store("x", 2.0);
        let mut g = Graph::new();
        let _x = g.param("x");
        let c = g.scalar(5.0);
        g.set_output(c);
        g.forward(&store).unwrap();
        g.backward(&mut store).unwrap();
        assert_eq!(store.grad("x").unwrap(), &[0.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = scalar_store("x", 1.5);
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.exp(x);
        g.set_output(y);
        g.forward(&store).unwrap();
        g.backward(&mut store).unwrap();
        assert_eq!(g.backward(&mut store), Err(AdError::BackwardWithoutForward));
        g.forward(&store).unwrap();
        g.backward(&mut store).unwrap();
        let e = 1.5f64.exp();
        assert!((store.grad("x").unwrap()[0] - 2.0 * e).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_names_the_node() {
        let store = scalar_store("x", -1.0);
        let mut g = Graph::new();
        let x = g.param("x");
        let l = g.log(x);
        g.set_output(l);
        match g.forward(&store) {
            Err(AdError::NonFiniteValue { node, op }) => {
                assert_eq!(node, l.index());
                assert_eq!(op, "log");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_param_and_shape_errors() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let x = g.param("missing");
        g.set_output(x);
        assert_eq!(g.forward(&store), Err(AdError::UnboundParam("missing".into())));

        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 3));
        let m = g.matmul(a, b);
        let s = g.sum(m);
        g.set_output(s);
        assert!(matches!(g.forward(&store), Err(AdError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 2));
        g.set_output(a);
        assert_eq!(g.forward(&store), Err(AdError::NonScalarOutput(2, 2)));
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        // sum(M + b) with b a 1x3 row broadcast over 4 rows
        let mut store = ParamStore::new();
        store
            .insert_matrix("b", Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let m = g.constant(Matrix::filled(4, 3, 1.0));
        let b = g.param("b");
        let s = g.add(m, b);
        let t = g.sum(s);
        g.set_output(t);
        assert_eq!(g.forward(&store).unwrap(), 12.0 + 4.0 * 6.0);
        g.backward(&mut store).unwrap();
        assert_eq!(store.grad("b").unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn abs_and_relu_subgradient_zero_at_kink() {
        for unary in [UnaryOp::Abs, UnaryOp::Relu] {
            let mut store = scalar_store("x", 0.0);
            let mut g = Graph::new();
            let x = g.param("x");
            let y = g.unary(unary, x);
            g.set_output(y);
            g.forward(&store).unwrap();
            g.backward(&mut store).unwrap();
            assert_eq!(store.grad("x").unwrap(), &[0.0]);
        }
    }

    #[test]
    fn graph_sqrt_matches_linalg_bitwise_path() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]])
            .unwrap();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new();
        let an = g.constant(a.clone());
        let s = g.sqrt_spd(an, 25, 3);
        let t = g.trace(s);
        g.set_output(t);
        let v = g.forward(&store).unwrap();
        let direct = crate::linalg::sqrt_spd_unchecked(&a, 25);
        assert!((v - direct.trace()).abs() < 1e-14);
        assert!(crate::linalg::rel_frobenius(g.value(s).unwrap(), &direct, &a) < 1e-15);
    }

    #[test]
    fn flat_round_trip() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", vec![1.0, 2.0]).unwrap();
        store.insert("b", vec![3.0]).unwrap();
        assert_eq!(store.flat_values(), vec![1.0, 2.0, 3.0]);
        store.set_flat(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(store.get("a").unwrap(), &[4.0, 5.0]);
        assert!(store.set_flat(&[1.0]).is_err());
        assert!(store.insert("a", vec![0.0]).is_err());
    }
}
