//! Reverse-mode automatic differentiation over scalar and dense-vector nodes.
//!
//! A [`Tape`] records every differentiable operation applied to its
//! [`Value`]s. Nodes are appended in evaluation order, so node ids are a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Each node keeps only what its own backward rule needs (the diagonal
//! Jacobian of an elementwise map, the operands of a product, ...). Output
//! data lives in the [`Value`] handles and is released as soon as nothing
//! refers to it, which keeps long unrolled graphs affordable.
//!
//! ```
//! use bruno_core::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(vec![3.0]).unwrap();
//! let y = tape.mul(&w, &w).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(y.item(), 9.0);
//! assert_eq!(grads.wrt(&w), vec![6.0]);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Accounted size of a node header, in bytes.
///
/// The memory figure reported by [`Tape::accounted_bytes`] is
/// `NODE_HEADER_BYTES + 8 * len` per node, where `len` is the node's output
/// width. It is deterministic and independent of the allocator.
pub const NODE_HEADER_BYTES: usize = 64;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("value does not belong to this tape")]
    ForeignValue,
    #[error("arithmetic domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("gradient explosion: non-finite adjoint at node {node}")]
    GradientExplosion { node: NodeId },
    #[error("tape memory budget of {budget} bytes exceeded")]
    BudgetExceeded { budget: usize },
    #[error("backward needs a scalar loss recorded on this tape")]
    BadLoss,
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// A scalar or vector quantity, either recorded on a tape or constant.
///
/// Constants never receive gradient. Cloning is cheap (the data is shared).
#[derive(Clone, Debug)]
pub struct Value {
    tape: u64,
    node: Option<NodeId>,
    data: Arc<[f64]>,
}

impl Value {
    pub fn constant(data: impl Into<Vec<f64>>) -> Self {
        let data: Vec<f64> = data.into();
        Value {
            tape: 0,
            node: None,
            data: data.into(),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::constant(vec![x])
    }

    pub fn zeros(len: usize) -> Self {
        Self::constant(vec![0.0; len])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// First element; the natural accessor for scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Option<NodeId>, Option<NodeId>),
    Sub(Option<NodeId>, Option<NodeId>),
    Mul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_val: Option<Arc<[f64]>>,
        b_val: Option<Arc<[f64]>>,
    },
    Div {
        a: Option<NodeId>,
        b: Option<NodeId>,
        b_val: Arc<[f64]>,
        out: Option<Arc<[f64]>>,
    },
    Scale(NodeId, f64),
    /// Elementwise map with its diagonal Jacobian saved at forward time.
    Elementwise(NodeId, Vec<f64>),
    /// Forward-only dependency: sign(), detach().
    NoGrad,
    /// Value replaced by external data, gradient passes straight through.
    PassThrough(NodeId),
    Sum(NodeId),
    MatVec {
        w: Option<NodeId>,
        x: Option<NodeId>,
        w_val: Option<Arc<[f64]>>,
        x_val: Option<Arc<[f64]>>,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    len: usize,
}

/// Append-only record of differentiable operations.
///
/// Single owner, single thread. Independent tapes can be used from
/// different threads and their gradient maps summed afterwards.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bytes: usize,
    budget: Option<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .field("bytes", &self.bytes)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TapeError::NonFinite { op })
    }
}

fn broadcast(op: &'static str, a: &[f64], b: &[f64]) -> Result<usize> {
    match (a.len(), b.len()) {
        (x, y) if x == y => Ok(x),
        (1, y) => Ok(y),
        (x, 1) => Ok(x),
        (x, y) => Err(TapeError::Shape {
            op,
            left: x,
            right: y,
        }),
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn zip_map(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == n && b.len() == n {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(at(a, i), at(b, i))).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_tape_id(),
            nodes: Vec::new(),
            bytes: 0,
            budget: None,
        }
    }

    /// A tape that refuses to grow beyond `bytes` of accounted memory.
    pub fn with_budget(bytes: usize) -> Self {
        Tape {
            budget: Some(bytes),
            ..Self::new()
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Accounted memory of the recorded graph, see [`NODE_HEADER_BYTES`].
    pub fn accounted_bytes(&self) -> usize {
        self.bytes
    }

    /// Drops every node. Values recorded before the reset become foreign.
    pub fn reset(&mut self) {
        self.nodes = Vec::new();
        self.bytes = 0;
        self.id = fresh_tape_id();
    }

    fn owns(&self, v: &Value) -> Result<Option<NodeId>> {
        match v.node {
            None => Ok(None),
            Some(id) if v.tape == self.id && id.0 < self.nodes.len() => Ok(Some(id)),
            Some(_) => Err(TapeError::ForeignValue),
        }
    }

    fn push(&mut self, op: Op, data: impl Into<Arc<[f64]>>) -> Result<Value> {
        let data: Arc<[f64]> = data.into();
        let cost = NODE_HEADER_BYTES + 8 * data.len();
        if let Some(budget) = self.budget {
            if self.bytes + cost > budget {
                return Err(TapeError::BudgetExceeded { budget });
            }
        }
        self.bytes += cost;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            len: data.len(),
        });
        Ok(Value {
            tape: self.id,
            node: Some(id),
            data,
        })
    }

    /// Registers a differentiable input (a parameter or state seed).
    pub fn leaf(&mut self, data: impl Into<Vec<f64>>) -> Result<Value> {
        let data = data.into();
        check_finite("leaf", &data)?;
        self.push(Op::Leaf, data)
    }

    pub fn add(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let (ia, ib) = (self.owns(a)?, self.owns(b)?);
        let n = broadcast("add", &a.data, &b.data)?;
        let out = zip_map(&a.data, &b.data, n, |x, y| x + y);
        check_finite("add", &out)?;
        if ia.is_none() && ib.is_none() {
            return Ok(Value::constant(out));
        }
        self.push(Op::Add(ia, ib), out)
    }

    pub fn sub(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let (ia, ib) = (self.owns(a)?, self.owns(b)?);
        let n = broadcast("sub", &a.data, &b.data)?;
        let out = zip_map(&a.data, &b.data, n, |x, y| x - y);
        check_finite("sub", &out)?;
        if ia.is_none() && ib.is_none() {
            return Ok(Value::constant(out));
        }
        self.push(Op::Sub(ia, ib), out)
    }

    pub fn mul(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let (ia, ib) = (self.owns(a)?, self.owns(b)?);
        let n = broadcast("mul", &a.data, &b.data)?;
        let out = zip_map(&a.data, &b.data, n, |x, y| x * y);
        check_finite("mul", &out)?;
        if ia.is_none() && ib.is_none() {
            return Ok(Value::constant(out));
        }
        let op = Op::Mul {
            a: ia,
            b: ib,
            a_val: ib.map(|_| a.data.clone()),
            b_val: ia.map(|_| b.data.clone()),
        };
        self.push(op, out)
    }

    pub fn div(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let (ia, ib) = (self.owns(a)?, self.owns(b)?);
        let n = broadcast("div", &a.data, &b.data)?;
        if b.data.iter().any(|&y| y == 0.0) {
            return Err(TapeError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = zip_map(&a.data, &b.data, n, |x, y| x / y);
        check_finite("div", &out)?;
        if ia.is_none() && ib.is_none() {
            return Ok(Value::constant(out));
        }
        let out: Arc<[f64]> = out.into();
        let op = Op::Div {
            a: ia,
            b: ib,
            b_val: b.data.clone(),
            out: ib.map(|_| out.clone()),
        };
        self.push(op, out)
    }

    pub fn neg(&mut self, a: &Value) -> Result<Value> {
        self.scale(a, -1.0)
    }

    /// `a * c` for a constant factor `c`.
    pub fn scale(&mut self, a: &Value, c: f64) -> Result<Value> {
        let ia = self.owns(a)?;
        let out: Vec<f64> = a.data.iter().map(|&x| x * c).collect();
        check_finite("scale", &out)?;
        match ia {
            None => Ok(Value::constant(out)),
            Some(id) => self.push(Op::Scale(id, c), out),
        }
    }

    /// `a + c` for a constant offset `c`.
    pub fn offset(&mut self, a: &Value, c: f64) -> Result<Value> {
        self.add(a, &Value::scalar(c))
    }

    /// Custom elementwise node: `f` returns `(value, derivative)` per element.
    ///
    /// This is how surrogate gradients and straight-through estimators are
    /// expressed: the derivative need not be the true derivative of the value.
    pub fn map(
        &mut self,
        op: &'static str,
        a: &Value,
        f: impl Fn(f64) -> (f64, f64),
    ) -> Result<Value> {
        let ia = self.owns(a)?;
        let (out, deriv): (Vec<f64>, Vec<f64>) = a.data.iter().map(|&x| f(x)).unzip();
        check_finite(op, &out)?;
        match ia {
            None => Ok(Value::constant(out)),
            Some(id) => self.push(Op::Elementwise(id, deriv), out),
        }
    }

    /// Elementwise node with externally computed values and derivatives,
    /// for rules that need state the closure form cannot carry (an RNG).
    pub fn elementwise(
        &mut self,
        op: &'static str,
        a: &Value,
        values: Vec<f64>,
        derivs: Vec<f64>,
    ) -> Result<Value> {
        let ia = self.owns(a)?;
        if values.len() != a.len() || derivs.len() != a.len() {
            return Err(TapeError::Shape {
                op,
                left: a.len(),
                right: values.len().min(derivs.len()),
            });
        }
        check_finite(op, &values)?;
        match ia {
            None => Ok(Value::constant(values)),
            Some(id) => self.push(Op::Elementwise(id, derivs), values),
        }
    }

    pub fn exp(&mut self, a: &Value) -> Result<Value> {
        self.map("exp", a, |x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&mut self, a: &Value) -> Result<Value> {
        if a.data.iter().any(|&x| x <= 0.0) {
            return Err(TapeError::Domain {
                op: "ln",
                detail: "logarithm of a non-positive value".into(),
            });
        }
        self.map("ln", a, |x| (x.ln(), 1.0 / x))
    }

    /// `a^p` for a constant exponent.
    pub fn powf(&mut self, a: &Value, p: f64) -> Result<Value> {
        if p.fract() != 0.0 && a.data.iter().any(|&x| x < 0.0) {
            return Err(TapeError::Domain {
                op: "pow",
                detail: "fractional power of a negative value".into(),
            });
        }
        self.map("pow", a, |x| (x.powf(p), p * x.powf(p - 1.0)))
    }

    pub fn abs(&mut self, a: &Value) -> Result<Value> {
        self.map("abs", a, |x| (x.abs(), if x < 0.0 { -1.0 } else { 1.0 }))
    }

    /// Clamp to `[lo, hi]`. The gradient is 1 strictly inside the interval
    /// and 0 on or beyond its bounds, so a value pinned at a bound does not
    /// pass gradient.
    pub fn clamp(&mut self, a: &Value, lo: f64, hi: f64) -> Result<Value> {
        self.map("clamp", a, |x| {
            if x <= lo {
                (lo, 0.0)
            } else if x >= hi {
                (hi, 0.0)
            } else {
                (x, 1.0)
            }
        })
    }

    /// sign(x) with sign(0) = 0. Its gradient is zero everywhere.
    pub fn sign(&mut self, a: &Value) -> Result<Value> {
        let ia = self.owns(a)?;
        let out: Vec<f64> = a
            .data
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        match ia {
            None => Ok(Value::constant(out)),
            Some(_) => self.push(Op::NoGrad, out),
        }
    }

    /// Identity forward, zero gradient to `a`.
    pub fn detach(&mut self, a: &Value) -> Result<Value> {
        match self.owns(a)? {
            None => Ok(a.clone()),
            Some(_) => self.push(Op::NoGrad, a.data.to_vec()),
        }
    }

    /// Forward value `data`, gradient routed to `a` unchanged.
    ///
    /// Equivalent to `a + detach(data - a)` but exact: the result carries
    /// `data` bit for bit instead of `a + (data - a)` after rounding.
    pub fn pass_through(&mut self, a: &Value, data: &[f64]) -> Result<Value> {
        let ia = self.owns(a)?;
        if a.len() != data.len() {
            return Err(TapeError::Shape {
                op: "pass_through",
                left: a.len(),
                right: data.len(),
            });
        }
        check_finite("pass_through", data)?;
        match ia {
            None => Ok(Value::constant(data.to_vec())),
            Some(id) => self.push(Op::PassThrough(id), data.to_vec()),
        }
    }

    /// Heaviside spike with a fast-sigmoid surrogate derivative
    /// `1 / (1 + k |v - v_thr|)^2`.
    pub fn spike_sg(&mut self, v: &Value, v_thr: f64, k: f64) -> Result<Value> {
        if k <= 0.0 || !k.is_finite() {
            return Err(TapeError::Domain {
                op: "spike_sg",
                detail: format!("surrogate slope must be positive, got {k}"),
            });
        }
        self.map("spike_sg", v, |x| {
            let u = x - v_thr;
            let s = if u >= 0.0 { 1.0 } else { 0.0 };
            let d = 1.0 + k * u.abs();
            (s, 1.0 / (d * d))
        })
    }

    pub fn sum(&mut self, a: &Value) -> Result<Value> {
        let ia = self.owns(a)?;
        let out = vec![a.data.iter().sum::<f64>()];
        check_finite("sum", &out)?;
        match ia {
            None => Ok(Value::constant(out)),
            Some(id) => self.push(Op::Sum(id), out),
        }
    }

    /// Row-major `w (rows x cols) · x (cols)`. One node regardless of size.
    pub fn matvec(&mut self, w: &Value, rows: usize, cols: usize, x: &Value) -> Result<Value> {
        let (iw, ix) = (self.owns(w)?, self.owns(x)?);
        if w.len() != rows * cols {
            return Err(TapeError::Shape {
                op: "matvec",
                left: w.len(),
                right: rows * cols,
            });
        }
        if x.len() != cols {
            return Err(TapeError::Shape {
                op: "matvec",
                left: cols,
                right: x.len(),
            });
        }
        let out: Vec<f64> = w
            .data
            .chunks_exact(cols.max(1))
            .take(rows)
            .map(|row| row.iter().zip(x.data.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let out = if cols == 0 { vec![0.0; rows] } else { out };
        check_finite("matvec", &out)?;
        if iw.is_none() && ix.is_none() {
            return Ok(Value::constant(out));
        }
        let op = Op::MatVec {
            w: iw,
            x: ix,
            w_val: ix.map(|_| w.data.clone()),
            x_val: iw.map(|_| x.data.clone()),
            rows,
            cols,
        };
        self.push(op, out)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the adjoints of every leaf reached from the loss. A
    /// non-finite adjoint aborts with [`TapeError::GradientExplosion`]
    /// naming the first node (in sweep order) where it appeared.
    pub fn backward(&self, loss: &Value) -> Result<Gradients> {
        let root = self.owns(loss)?.ok_or(TapeError::BadLoss)?;
        if loss.len() != 1 {
            return Err(TapeError::BadLoss);
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TapeError::GradientExplosion { node: NodeId(i) });
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(NodeId(i), g);
                }
                Op::Add(a, b) => {
                    if let Some(a) = a {
                        self.accumulate(&mut adj, *a, &g, |_, x| x);
                    }
                    if let Some(b) = b {
                        self.accumulate(&mut adj, *b, &g, |_, x| x);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(a) = a {
                        self.accumulate(&mut adj, *a, &g, |_, x| x);
                    }
                    if let Some(b) = b {
                        self.accumulate(&mut adj, *b, &g, |_, x| -x);
                    }
                }
                Op::Mul { a, b, a_val, b_val } => {
                    if let (Some(a), Some(bv)) = (a, b_val) {
                        self.accumulate(&mut adj, *a, &g, |j, x| x * at(bv, j));
                    }
                    if let (Some(b), Some(av)) = (b, a_val) {
                        self.accumulate(&mut adj, *b, &g, |j, x| x * at(av, j));
                    }
                }
                Op::Div { a, b, b_val, out } => {
                    if let Some(a) = a {
                        self.accumulate(&mut adj, *a, &g, |j, x| x / at(b_val, j));
                    }
                    if let (Some(b), Some(o)) = (b, out) {
                        self.accumulate(&mut adj, *b, &g, |j, x| -x * o[j] / at(b_val, j));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accumulate(&mut adj, *a, &g, |_, x| x * c);
                }
                Op::Elementwise(a, d) => {
                    self.accumulate(&mut adj, *a, &g, |j, x| x * d[j]);
                }
                Op::NoGrad => {}
                Op::PassThrough(a) => {
                    self.accumulate(&mut adj, *a, &g, |_, x| x);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].len;
                    let g0 = g[0];
                    add_into(&mut adj[a.0], n, |_| g0);
                }
                Op::MatVec {
                    w,
                    x,
                    w_val,
                    x_val,
                    rows,
                    cols,
                } => {
                    let (rows, cols) = (*rows, *cols);
                    if let (Some(w), Some(xv)) = (w, x_val) {
                        let slot = &mut adj[w.0];
                        let buf = slot.get_or_insert_with(|| vec![0.0; rows * cols]);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr != 0.0 {
                                let row = &mut buf[r * cols..(r + 1) * cols];
                                for (dst, &xc) in row.iter_mut().zip(xv.iter()) {
                                    *dst += gr * xc;
                                }
                            }
                        }
                    }
                    if let (Some(x), Some(wv)) = (x, w_val) {
                        let slot = &mut adj[x.0];
                        let buf = slot.get_or_insert_with(|| vec![0.0; cols]);
                        for (r, &gr) in g.iter().enumerate() {
                            if gr != 0.0 {
                                let row = &wv[r * cols..(r + 1) * cols];
                                for (dst, &wc) in buf.iter_mut().zip(row) {
                                    *dst += gr * wc;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }

    /// Adds `f(j, g[j])` into the adjoint of `parent`, summing over the
    /// broadcast dimension when the parent is a scalar.
    fn accumulate(
        &self,
        adj: &mut [Option<Vec<f64>>],
        parent: NodeId,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let n = self.nodes[parent.0].len;
        if n == g.len() {
            add_into(&mut adj[parent.0], n, |j| f(j, g[j]));
        } else {
            let total: f64 = g.iter().enumerate().map(|(j, &x)| f(j, x)).sum();
            add_into(&mut adj[parent.0], n, |_| total);
        }
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, n: usize, f: impl Fn(usize) -> f64) {
    match slot {
        Some(buf) => {
            for (j, dst) in buf.iter_mut().enumerate() {
                *dst += f(j);
            }
        }
        None => *slot = Some((0..n).map(f).collect()),
    }
}

/// Leaf adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: BTreeMap<NodeId, Vec<f64>>,
}

impl Gradients {
    /// Adjoint of a leaf, if the loss depends on it.
    pub fn get(&self, leaf: &Value) -> Option<&[f64]> {
        if leaf.tape != self.tape {
            return None;
        }
        leaf.node
            .and_then(|id| self.leaves.get(&id))
            .map(Vec::as_slice)
    }

    /// Adjoint of a leaf, zeros when the loss does not reach it.
    pub fn wrt(&self, leaf: &Value) -> Vec<f64> {
        self.get(leaf)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; leaf.len()])
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &[f64])> {
        self.leaves.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_leaf(t: &mut Tape, x: f64) -> Value {
        t.leaf(vec![x]).unwrap()
    }

    #[test]
    fn square_and_detach() {
        let mut t = Tape::new();
        let w = scalar_leaf(&mut t, 3.0);
        let y = t.mul(&w, &w).unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(t.backward(&y).unwrap().wrt(&w), vec![6.0]);

        let d = t.detach(&w).unwrap();
        let y = t.mul(&d, &w).unwrap();
        assert_eq!(y.item(), 9.0);
        assert_eq!(t.backward(&y).unwrap().wrt(&w), vec![3.0]);
    }

    #[test]
    fn exp_at_zero() {
        let mut t = Tape::new();
        let w = scalar_leaf(&mut t, 0.0);
        let y = t.exp(&w).unwrap();
        assert_eq!(y.item(), 1.0);
        assert_eq!(t.backward(&y).unwrap().wrt(&w), vec![1.0]);
    }

    #[test]
    fn detach_contract() {
        let mut t = Tape::new();
        let x = scalar_leaf(&mut t, 1.2);
        let d = t.detach(&x).unwrap();
        let dd = t.detach(&d).unwrap();
        assert_eq!(d.item(), 1.2);
        assert_eq!(dd.item(), 1.2);
        let s = t.sum(&dd).unwrap();
        assert_eq!(t.backward(&s).unwrap().wrt(&x), vec![0.0]);

        // combine step: a + detach(b - a)
        let a = scalar_leaf(&mut t, 1.0);
        let b = scalar_leaf(&mut t, 1.2);
        let diff = t.sub(&b, &a).unwrap();
        let diff = t.detach(&diff).unwrap();
        let y = t.add(&a, &diff).unwrap();
        assert!((y.item() - 1.2).abs() < 1e-15);
        let g = t.backward(&y).unwrap();
        assert_eq!(g.wrt(&a), vec![1.0]);
        assert_eq!(g.wrt(&b), vec![0.0]);
    }

    #[test]
    fn pass_through_matches_detach_combine() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, -2.0]).unwrap();
        let a2 = t.mul(&a, &a).unwrap();
        let y = t.pass_through(&a2, &[0.3, 0.7]).unwrap();
        assert_eq!(y.data(), &[0.3, 0.7]);
        let s = t.sum(&y).unwrap();
        let g1 = t.backward(&s).unwrap().wrt(&a);

        let fine = Value::constant(vec![0.3, 0.7]);
        let d = t.sub(&fine, &a2).unwrap();
        let d = t.detach(&d).unwrap();
        let y2 = t.add(&a2, &d).unwrap();
        let s2 = t.sum(&y2).unwrap();
        let g2 = t.backward(&s2).unwrap().wrt(&a);
        assert_eq!(g1, g2);
        assert_eq!(g1, vec![2.0, -4.0]);
    }

    #[test]
    fn spike_surrogate_values() {
        let mut t = Tape::new();
        let v = t.leaf(vec![1.0, 1.1, -4.0]).unwrap();
        let s = t.spike_sg(&v, 1.0, 10.0).unwrap();
        assert_eq!(s.data(), &[1.0, 1.0, 0.0]);
        let l = t.sum(&s).unwrap();
        let g = t.backward(&l).unwrap().wrt(&v);
        assert_eq!(g[0], 1.0);
        assert!((g[1] - 0.25).abs() < 1e-12);
        assert!((g[2] - 1.0 / 2601.0).abs() < 1e-15);
        assert!(t.spike_sg(&v, 1.0, 0.0).is_err());
    }

    #[test]
    fn linear_map_grads() {
        let mut t = Tape::new();
        let a = scalar_leaf(&mut t, 0.4);
        let b = scalar_leaf(&mut t, -1.7);
        let a2 = t.scale(&a, 2.0).unwrap();
        let b3 = t.scale(&b, 3.0).unwrap();
        let l = t.add(&a2, &b3).unwrap();
        let g = t.backward(&l).unwrap();
        assert_eq!(g.wrt(&a), vec![2.0]);
        assert_eq!(g.wrt(&b), vec![3.0]);
    }

    #[test]
    fn long_linear_recurrence() {
        let mut t = Tape::new();
        let v0 = scalar_leaf(&mut t, 1.0);
        let mut v = v0.clone();
        for _ in 0..1000 {
            v = t.scale(&v, 0.9).unwrap();
        }
        let g = t.backward(&v).unwrap().wrt(&v0)[0];
        let expect = 0.9f64.powi(1000);
        assert!(((g - expect) / expect).abs() < 1e-12, "{g} vs {expect}");
        assert_eq!(t.node_count(), 1001);
    }

    #[test]
    fn node_count_and_reset() {
        let mut t = Tape::new();
        assert_eq!(t.node_count(), 0);
        let a = scalar_leaf(&mut t, 2.0);
        let b = t.exp(&a).unwrap();
        t.add(&a, &b).unwrap();
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.accounted_bytes(), 3 * (NODE_HEADER_BYTES + 8));
        t.reset();
        assert_eq!(t.node_count(), 0);
        assert_eq!(t.accounted_bytes(), 0);
        assert_eq!(t.exp(&a).unwrap_err(), TapeError::ForeignValue);
    }

    #[test]
    fn constants_record_nothing() {
        let mut t = Tape::new();
        let c = Value::constant(vec![1.0, 2.0]);
        let y = t.mul(&c, &c).unwrap();
        assert!(y.is_constant());
        assert_eq!(t.node_count(), 0);
        assert_eq!(t.backward(&y).unwrap_err(), TapeError::BadLoss);
    }

    #[test]
    fn errors() {
        let mut t = Tape::new();
        let mut other = Tape::new();
        let a = t.leaf(vec![1.0]).unwrap();
        let z = other.leaf(vec![0.0]).unwrap();
        assert_eq!(other.add(&a, &z).unwrap_err(), TapeError::ForeignValue);
        assert!(matches!(
            t.div(&a, &Value::scalar(0.0)),
            Err(TapeError::Domain { .. })
        ));
        assert!(matches!(
            t.ln(&Value::scalar(-1.0)),
            Err(TapeError::Domain { .. })
        ));
        let big = t.leaf(vec![800.0]).unwrap();
        assert_eq!(t.exp(&big).unwrap_err(), TapeError::NonFinite { op: "exp" });
        assert!(t.leaf(vec![f64::NAN]).is_err());
        assert!(matches!(
            t.add(&Value::zeros(2), &Value::zeros(3)),
            Err(TapeError::Shape { .. })
        ));
    }

    #[test]
    fn exploding_adjoint_is_reported() {
        let mut t = Tape::new();
        let a = scalar_leaf(&mut t, 1.0);
        let mut v = a.clone();
        for _ in 0..400 {
            // identity forward, derivative 1e3 per node: 1e1200 overflows
            v = t.map("amplify", &v, |x| (x, 1e3)).unwrap();
        }
        let err = t.backward(&v).unwrap_err();
        assert!(matches!(err, TapeError::GradientExplosion { .. }));
    }

    #[test]
    fn budget_is_enforced() {
        let mut t = Tape::with_budget(3 * (NODE_HEADER_BYTES + 8));
        let a = scalar_leaf(&mut t, 1.0);
        let b = t.exp(&a).unwrap();
        let _ = t.exp(&b).unwrap();
        assert!(matches!(t.exp(&b), Err(TapeError::BudgetExceeded { .. })));
    }

    #[test]
    fn matvec_grads() {
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = t.leaf(vec![1.0, -1.0, 0.5]).unwrap();
        let y = t.matvec(&w, 2, 3, &x).unwrap();
        assert_eq!(y.data(), &[0.5, 2.0]);
        let c = Value::constant(vec![1.0, 2.0]);
        let l = t.mul(&y, &c).unwrap();
        let l = t.sum(&l).unwrap();
        let g = t.backward(&l).unwrap();
        assert_eq!(g.wrt(&w), vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.0]);
        assert_eq!(g.wrt(&x), vec![9.0, 12.0, 15.0]);
    }

    #[test]
    fn scalar_broadcast() {
        let mut t = Tape::new();
        let s = scalar_leaf(&mut t, 2.0);
        let v = t.leaf(vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.mul(&s, &v).unwrap();
        let l = t.sum(&y).unwrap();
        let g = t.backward(&l).unwrap();
        assert_eq!(g.wrt(&s), vec![6.0]);
        assert_eq!(g.wrt(&v), vec![2.0, 2.0, 2.0]);
    }

    /// A random composite of smooth ops over `params`, driven by an op
    /// script. Returns the scalar loss.
    fn random_graph(t: &mut Tape, params: &[Value], script: &[(u8, usize, usize)]) -> Value {
        let mut pool: Vec<Value> = params.to_vec();
        for &(op, i, j) in script {
            let a = pool[i % pool.len()].clone();
            let b = pool[j % pool.len()].clone();
            let v = match op % 7 {
                0 => t.add(&a, &b),
                1 => t.sub(&a, &b),
                2 => t.mul(&a, &b),
                3 => {
                    let s = t.mul(&a, &a).unwrap();
                    let s = t.scale(&s, 0.1).unwrap();
                    let s = t.exp(&s).unwrap();
                    t.div(&b, &s)
                }
                4 => {
                    let s = t.mul(&b, &b).unwrap();
                    let s = t.offset(&s, 1.0).unwrap();
                    t.ln(&s)
                }
                5 => t.scale(&a, 0.7),
                _ => {
                    let s = t.mul(&a, &a).unwrap();
                    let s = t.offset(&s, 0.5).unwrap();
                    t.powf(&s, 0.5)
                }
            }
            .unwrap();
            let bounded = t.map("tanh", &v, |x| (x.tanh(), 1.0 - x.tanh().powi(2))).unwrap();
            pool.push(bounded);
        }
        let mut acc = pool.last().unwrap().clone();
        for v in &pool[params.len()..] {
            acc = t.add(&acc, v).unwrap();
        }
        t.sum(&acc).unwrap()
    }

    fn eval_graph(x: &[f64], script: &[(u8, usize, usize)]) -> f64 {
        let mut t = Tape::new();
        let params: Vec<Value> = x.iter().map(|&v| t.leaf(vec![v]).unwrap()).collect();
        random_graph(&mut t, &params, script).item()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_central_differences(
            x in proptest::collection::vec(-1.5f64..1.5, 10),
            script in proptest::collection::vec((0u8..7, 0usize..64, 0usize..64), 5..25),
        ) {
            let mut t = Tape::new();
            let params: Vec<Value> = x.iter().map(|&v| t.leaf(vec![v]).unwrap()).collect();
            let loss = random_graph(&mut t, &params, &script);
            let g = t.backward(&loss).unwrap();
            let eps = 1e-5;
            for k in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += eps;
                xm[k] -= eps;
                let fd = (eval_graph(&xp, &script) - eval_graph(&xm, &script)) / (2.0 * eps);
                let an = g.wrt(&params[k])[0];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                prop_assert!((an - fd).abs() / scale < 1e-4, "param {k}: {an} vs {fd}");
            }
        }

        #[test]
        fn detached_inputs_get_exactly_zero(
            x in proptest::collection::vec(-1.5f64..1.5, 4),
            script in proptest::collection::vec((0u8..7, 0usize..64, 0usize..64), 3..12),
        ) {
            let mut t = Tape::new();
            let hidden = t.leaf(vec![x[0]]).unwrap();
            let through_detach = t.detach(&hidden).unwrap();
            let mut params: Vec<Value> = x[1..].iter().map(|&v| t.leaf(vec![v]).unwrap()).collect();
            params.push(through_detach);
            let loss = random_graph(&mut t, &params, &script);
            let g = t.backward(&loss).unwrap();
            prop_assert_eq!(g.wrt(&hidden), vec![0.0]);
        }

        #[test]
        fn recording_is_deterministic(
            x in proptest::collection::vec(-1.5f64..1.5, 5),
            script in proptest::collection::vec((0u8..7, 0usize..64, 0usize..64), 3..20),
        ) {
            let run = || {
                let mut t = Tape::new();
                let params: Vec<Value> = x.iter().map(|&v| t.leaf(vec![v]).unwrap()).collect();
                let loss = random_graph(&mut t, &params, &script);
                let g = t.backward(&loss).unwrap();
                let grads: Vec<u64> = params.iter().map(|p| g.wrt(p)[0].to_bits()).collect();
                (t.node_count(), loss.item().to_bits(), loss.node(), grads)
            };
            prop_assert_eq!(run(), run());
        }
    }

    #[test]
    fn clamp_bound_passes_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(vec![-1.0, -0.5, 1.0, 2.0]).unwrap();
        let y = t.clamp(&x, -1.0, 1.0).unwrap();
        assert_eq!(y.data(), &[-1.0, -0.5, 1.0, 1.0]);
        let l = t.sum(&y).unwrap();
        assert_eq!(t.backward(&l).unwrap().wrt(&x), vec![0.0, 1.0, 0.0, 0.0]);
    }
}
