//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records operations as they execute. Leaves created through
//! [`Tape::leaf`] are trainable; tensors built with [`Tensor::from_vec`] and
//! friends are constants and may be reused across tapes. Calling
//! [`backward`] on a scalar result walks the tape once in reverse and
//! accumulates gradients (summed when a value feeds several consumers).
//!
//! All storage is row-major `Vec<f64>` behind an `Rc`, so cloning a tensor
//! is cheap and never copies data.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// shapes

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

fn dim_err(msg: String) -> Error {
    Error::Dimension(msg)
}

/// Broadcast result shape (numpy rules: right-aligned, extents equal or 1).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(dim_err(format!(
                "cannot broadcast {} with {}",
                shape_str(a),
                shape_str(b)
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut p = vec![1usize; ndim];
    p[ndim - shape.len()..].copy_from_slice(shape);
    p
}

/// Expand `data` of `shape` to `out_shape` (size-1 axes repeat).
fn expand(data: &[f64], shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if shape == out_shape {
        return data.to_vec();
    }
    let ndim = out_shape.len();
    let src = pad_left(shape, ndim);
    let total = numel_of(out_shape);
    let mut out = vec![0.0; total];
    let mut coords = vec![0usize; ndim];
    for v in out.iter_mut() {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for d in (0..ndim).rev() {
            let c = if src[d] == 1 { 0 } else { coords[d] };
            idx += c * stride;
            stride *= src[d];
        }
        *v = data[idx];
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Sum `grad` of `grad_shape` down to `target_shape` (undo a broadcast).
fn reduce_to(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let ndim = grad_shape.len();
    let tgt = pad_left(target_shape, ndim);
    let mut out = vec![0.0; numel_of(target_shape)];
    let mut coords = vec![0usize; ndim];
    for g in grad.iter() {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for d in (0..ndim).rev() {
            let c = if tgt[d] == 1 { 0 } else { coords[d] };
            idx += c * stride;
            stride *= tgt[d];
        }
        out[idx] += *g;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// raw kernels

/// C[m,n] = A[m,k] * B[k,n], row-major.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// log(cosh(x)) computed without overflow for large |x|.
fn logcosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

// ---------------------------------------------------------------------------
// tape

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Softsign,
    Relu,
    LogCosh,
    Ln,
    Neg,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Softsign => softsign(x),
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::LogCosh => logcosh(x),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Neg => -x,
        }
    }

    /// d/dx given the input x and the already-computed output y.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::LogCosh => x.tanh(),
            UnaryKind::Ln => 1.0 / x,
            UnaryKind::Neg => -1.0,
        }
    }
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Unary { a: usize, kind: UnaryKind },
    Clamp { a: usize, lo: f64, hi: f64 },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    Softmax { a: usize, axis: usize },
    Sum { a: usize, axis: Option<usize> },
    Mean { a: usize, axis: Option<usize> },
    GatherRows { a: usize, indices: Vec<usize> },
    Conv2d { input: usize, kernel: usize, bias: usize, stride: usize },
}

struct Node {
    op: Op,
    values: Rc<Vec<f64>>,
    shape: Vec<usize>,
    needs_grad: bool,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Recording context for one differentiation pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(TapeInner { nodes: RefCell::new(Vec::new()) }) }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Create a trainable leaf on this tape.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if values.len() != numel_of(shape) {
            return Err(dim_err(format!(
                "leaf data length {} does not match shape {}",
                values.len(),
                shape_str(shape)
            )));
        }
        let values = Rc::new(values);
        let id = self.push(Node {
            op: Op::Leaf,
            values: Rc::clone(&values),
            shape: shape.to_vec(),
            needs_grad: true,
        });
        Ok(Tensor { shape: shape.to_vec(), values, node: Some((self.clone(), id)) })
    }

    fn node_needs_grad(&self, id: usize) -> bool {
        self.inner.nodes.borrow()[id].needs_grad
    }

    /// Node id of `t` on this tape, inserting a constant leaf if needed.
    fn node_id(&self, t: &Tensor) -> Result<usize> {
        match &t.node {
            Some((tape, id)) => {
                if !self.same_tape(tape) {
                    return Err(Error::Contract(
                        "operands recorded on different tapes".to_string(),
                    ));
                }
                Ok(*id)
            }
            None => Ok(self.push(Node {
                op: Op::Leaf,
                values: Rc::clone(&t.values),
                shape: t.shape.clone(),
                needs_grad: false,
            })),
        }
    }
}

/// Tape of either operand, verifying both agree when present.
fn joint_tape(a: &Tensor, b: &Tensor) -> Result<Option<Tape>> {
    match (&a.node, &b.node) {
        (Some((ta, _)), Some((tb, _))) => {
            if !ta.same_tape(tb) {
                return Err(Error::Contract(
                    "operands recorded on different tapes".to_string(),
                ));
            }
            Ok(Some(ta.clone()))
        }
        (Some((t, _)), None) | (None, Some((t, _))) => Ok(Some(t.clone())),
        (None, None) => Ok(None),
    }
}

// ---------------------------------------------------------------------------
// tensor

/// Dense row-major f64 array, optionally recorded on a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
    node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{} {:?}", shape_str(&self.shape), &self.values[..self.values.len().min(8)])
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if values.len() != numel_of(shape) {
            return Err(dim_err(format!(
                "data length {} does not match shape {}",
                values.len(),
                shape_str(shape)
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), values: Rc::new(values), node: None })
    }

    /// Zero-copy constant over shared storage.
    pub fn from_shared(shape: &[usize], values: Rc<Vec<f64>>) -> Result<Tensor> {
        if values.len() != numel_of(shape) {
            return Err(dim_err(format!(
                "data length {} does not match shape {}",
                values.len(),
                shape_str(shape)
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), values, node: None })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), values: Rc::new(vec![0.0; numel_of(shape)]), node: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], values: Rc::new(vec![v]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.values
    }

    /// Single stored value; contract error otherwise.
    pub fn value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {}",
                shape_str(&self.shape)
            )));
        }
        Ok(self.values[0])
    }

    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some((tape, id)) => tape.node_needs_grad(*id),
            None => false,
        }
    }

    fn unary_result(&self, kind: UnaryKind) -> Tensor {
        let out: Vec<f64> = self.values.iter().map(|&x| kind.apply(x)).collect();
        self.record_unary(Op::Unary { a: 0, kind }, out)
    }

    /// Record a single-parent op; `op` carries a placeholder parent id that
    /// is patched once the parent's id on the tape is known.
    fn record_unary(&self, op: Op, out: Vec<f64>) -> Tensor {
        let shape = self.shape.clone();
        match &self.node {
            Some((tape, _)) => {
                let pid = tape.node_id(self).expect("same tape");
                let needs = tape.node_needs_grad(pid);
                let patched = match op {
                    Op::Unary { kind, .. } => Op::Unary { a: pid, kind },
                    Op::Clamp { lo, hi, .. } => Op::Clamp { a: pid, lo, hi },
                    Op::AddScalar { .. } => Op::AddScalar { a: pid },
                    Op::MulScalar { c, .. } => Op::MulScalar { a: pid, c },
                    _ => unreachable!(),
                };
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: patched,
                    values: Rc::clone(&values),
                    shape: shape.clone(),
                    needs_grad: needs,
                });
                Tensor { shape, values, node: Some((tape.clone(), id)) }
            }
            None => Tensor { shape, values: Rc::new(out), node: None },
        }
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary_result(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary_result(UnaryKind::Tanh)
    }

    pub fn softsign(&self) -> Tensor {
        self.unary_result(UnaryKind::Softsign)
    }

    pub fn relu(&self) -> Tensor {
        self.unary_result(UnaryKind::Relu)
    }

    /// Elementwise log(cosh(x)), numerically stable.
    pub fn logcosh_elem(&self) -> Tensor {
        self.unary_result(UnaryKind::LogCosh)
    }

    pub fn ln(&self) -> Tensor {
        self.unary_result(UnaryKind::Ln)
    }

    pub fn neg(&self) -> Tensor {
        self.unary_result(UnaryKind::Neg)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out: Vec<f64> = self.values.iter().map(|&x| x.clamp(lo, hi)).collect();
        self.record_unary(Op::Clamp { a: 0, lo, hi }, out)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.values.iter().map(|&x| x + c).collect();
        self.record_unary(Op::AddScalar { a: 0 }, out)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.values.iter().map(|&x| x * c).collect();
        self.record_unary(Op::MulScalar { a: 0, c }, out)
    }

    fn binary(&self, other: &Tensor, which: u8) -> Result<Tensor> {
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let a = expand(&self.values, &self.shape, &out_shape);
        let b = expand(&other.values, &other.shape, &out_shape);
        let out: Vec<f64> = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| match which {
                0 => x + y,
                1 => x - y,
                _ => x * y,
            })
            .collect();
        match joint_tape(self, other)? {
            Some(tape) => {
                let ia = tape.node_id(self)?;
                let ib = tape.node_id(other)?;
                let needs = tape.node_needs_grad(ia) || tape.node_needs_grad(ib);
                let op = match which {
                    0 => Op::Add { a: ia, b: ib },
                    1 => Op::Sub { a: ia, b: ib },
                    _ => Op::Mul { a: ia, b: ib },
                };
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op,
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape, id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, 0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, 1)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, 2)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(dim_err(format!(
                "matmul needs 2-d operands, got {} and {}",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(dim_err(format!(
                "matmul inner extents differ: {} vs {}",
                shape_str(&self.shape),
                shape_str(&other.shape)
            )));
        }
        let out = matmul_raw(&self.values, &other.values, m, k, n);
        let out_shape = vec![m, n];
        match joint_tape(self, other)? {
            Some(tape) => {
                let ia = tape.node_id(self)?;
                let ib = tape.node_id(other)?;
                let needs = tape.node_needs_grad(ia) || tape.node_needs_grad(ib);
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: Op::MatMul { a: ia, b: ib },
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape, id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(dim_err(format!(
                "transpose needs a 2-d tensor, got {}",
                shape_str(&self.shape)
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let out = transpose_raw(&self.values, r, c);
        let out_shape = vec![c, r];
        match &self.node {
            Some((tape, _)) => {
                let ia = tape.node_id(self)?;
                let needs = tape.node_needs_grad(ia);
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: Op::Transpose { a: ia },
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape.clone(), id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(dim_err(format!(
                "cannot reshape {} into {}",
                shape_str(&self.shape),
                shape_str(shape)
            )));
        }
        match &self.node {
            Some((tape, _)) => {
                let ia = tape.node_id(self)?;
                let needs = tape.node_needs_grad(ia);
                let values = Rc::clone(&self.values);
                let id = tape.push(Node {
                    op: Op::Reshape { a: ia },
                    values: Rc::clone(&values),
                    shape: shape.to_vec(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: shape.to_vec(), values, node: Some((tape.clone(), id)) })
            }
            None => Ok(Tensor {
                shape: shape.to_vec(),
                values: Rc::clone(&self.values),
                node: None,
            }),
        }
    }

    /// Take `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(dim_err(format!(
                "slice axis {axis} out of range for {}",
                shape_str(&self.shape)
            )));
        }
        if start + len > self.shape[axis] {
            return Err(dim_err(format!(
                "slice {start}..{} exceeds extent {} of {}",
                start + len,
                self.shape[axis],
                shape_str(&self.shape)
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&self.values[base..base + len * inner]);
        }
        match &self.node {
            Some((tape, _)) => {
                let ia = tape.node_id(self)?;
                let needs = tape.node_needs_grad(ia);
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: Op::Slice { a: ia, axis, start },
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape.clone(), id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(dim_err(format!(
                "softmax axis {axis} out of range for {}",
                shape_str(&self.shape)
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let ext = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * ext * inner + a * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for a in 0..ext {
                    mx = mx.max(self.values[at(a)]);
                }
                let mut denom = 0.0;
                for a in 0..ext {
                    let e = (self.values[at(a)] - mx).exp();
                    out[at(a)] = e;
                    denom += e;
                }
                for a in 0..ext {
                    out[at(a)] /= denom;
                }
            }
        }
        match &self.node {
            Some((tape, _)) => {
                let ia = tape.node_id(self)?;
                let needs = tape.node_needs_grad(ia);
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: Op::Softmax { a: ia, axis },
                    values: Rc::clone(&values),
                    shape: self.shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: self.shape.clone(), values, node: Some((tape.clone(), id)) })
            }
            None => Tensor::from_vec(&self.shape, out),
        }
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let (out, out_shape) = match axis {
            None => {
                let s: f64 = self.values.iter().sum();
                let v = if mean { s / self.numel() as f64 } else { s };
                (vec![v], vec![1])
            }
            Some(ax) => {
                if ax >= self.shape.len() {
                    return Err(dim_err(format!(
                        "reduce axis {ax} out of range for {}",
                        shape_str(&self.shape)
                    )));
                }
                let outer: usize = self.shape[..ax].iter().product();
                let ext = self.shape[ax];
                let inner: usize = self.shape[ax + 1..].iter().product();
                let mut out_shape = self.shape.clone();
                out_shape.remove(ax);
                if out_shape.is_empty() {
                    out_shape.push(1);
                }
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for a in 0..ext {
                        for i in 0..inner {
                            out[o * inner + i] += self.values[o * ext * inner + a * inner + i];
                        }
                    }
                }
                if mean {
                    for v in out.iter_mut() {
                        *v /= ext as f64;
                    }
                }
                (out, out_shape)
            }
        };
        let op = if mean { Op::Mean { a: 0, axis } } else { Op::Sum { a: 0, axis } };
        match &self.node {
            Some((tape, _)) => {
                let ia = tape.node_id(self)?;
                let needs = tape.node_needs_grad(ia);
                let op = match op {
                    Op::Mean { axis, .. } => Op::Mean { a: ia, axis },
                    Op::Sum { axis, .. } => Op::Sum { a: ia, axis },
                    _ => unreachable!(),
                };
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op,
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape.clone(), id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), false)
    }

    pub fn sum_all(&self) -> Tensor {
        self.reduce(None, false).expect("total reduction cannot fail")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), true)
    }

    pub fn mean_all(&self) -> Tensor {
        self.reduce(None, true).expect("total reduction cannot fail")
    }

    /// Row lookup: self is [n, d], result is [indices.len(), d].
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(dim_err(format!(
                "gather_rows needs a 2-d table, got {}",
                shape_str(&self.shape)
            )));
        }
        let (n, d) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= n {
                return Err(Error::Input(format!("row index {ix} out of range (table has {n})")));
            }
            out.extend_from_slice(&self.values[ix * d..(ix + 1) * d]);
        }
        let out_shape = vec![indices.len(), d];
        match &self.node {
            Some((tape, _)) => {
                let ia = tape.node_id(self)?;
                let needs = tape.node_needs_grad(ia);
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: Op::GatherRows { a: ia, indices: indices.to_vec() },
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape.clone(), id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }

    /// Valid-padding cross-correlation.
    ///
    /// input [c_in, h, w], kernel [c_out, c_in, kh, kw], bias [c_out];
    /// output [c_out, (h-kh)/stride+1, (w-kw)/stride+1].
    pub fn conv2d(&self, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        if self.shape.len() != 3 || kernel.shape.len() != 4 || bias.shape.len() != 1 {
            return Err(dim_err(format!(
                "conv2d expects input [c,h,w], kernel [o,c,kh,kw], bias [o]; got {}, {}, {}",
                shape_str(&self.shape),
                shape_str(&kernel.shape),
                shape_str(&bias.shape)
            )));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".to_string()));
        }
        let (c_in, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (c_out, kc, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
        if kc != c_in || bias.shape[0] != c_out {
            return Err(dim_err(format!(
                "conv2d channel mismatch: input {}, kernel {}, bias {}",
                shape_str(&self.shape),
                shape_str(&kernel.shape),
                shape_str(&bias.shape)
            )));
        }
        if kh > h || kw > w {
            return Err(dim_err(format!(
                "conv2d kernel {} larger than input {}",
                shape_str(&kernel.shape),
                shape_str(&self.shape)
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.values[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let irow = (oy * stride + ky) * w + ox * stride;
                            let ibase = ci * h * w + irow;
                            let kbase = ((co * c_in + ci) * kh + ky) * kw;
                            for kx in 0..kw {
                                acc += self.values[ibase + kx] * kernel.values[kbase + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let out_shape = vec![c_out, oh, ow];
        let tape = joint_tape(self, kernel)?;
        let tape = match (tape, &bias.node) {
            (Some(t), Some((tb, _))) => {
                if !t.same_tape(tb) {
                    return Err(Error::Contract(
                        "operands recorded on different tapes".to_string(),
                    ));
                }
                Some(t)
            }
            (Some(t), None) => Some(t),
            (None, Some((tb, _))) => Some(tb.clone()),
            (None, None) => None,
        };
        match tape {
            Some(tape) => {
                let ii = tape.node_id(self)?;
                let ik = tape.node_id(kernel)?;
                let ib = tape.node_id(bias)?;
                let needs = tape.node_needs_grad(ii)
                    || tape.node_needs_grad(ik)
                    || tape.node_needs_grad(ib);
                let values = Rc::new(out);
                let id = tape.push(Node {
                    op: Op::Conv2d { input: ii, kernel: ik, bias: ib, stride },
                    values: Rc::clone(&values),
                    shape: out_shape.clone(),
                    needs_grad: needs,
                });
                Ok(Tensor { shape: out_shape, values, node: Some((tape, id)) })
            }
            None => Tensor::from_vec(&out_shape, out),
        }
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Contract("concat of zero tensors".to_string()));
    }
    let ndim = parts[0].shape.len();
    if axis >= ndim {
        return Err(dim_err(format!(
            "concat axis {axis} out of range for {}",
            shape_str(&parts[0].shape)
        )));
    }
    let mut total_ext = 0usize;
    for p in parts {
        if p.shape.len() != ndim {
            return Err(dim_err(format!(
                "concat rank mismatch: {} vs {}",
                shape_str(&parts[0].shape),
                shape_str(&p.shape)
            )));
        }
        for d in 0..ndim {
            if d != axis && p.shape[d] != parts[0].shape[d] {
                return Err(dim_err(format!(
                    "concat extent mismatch on axis {d}: {} vs {}",
                    shape_str(&parts[0].shape),
                    shape_str(&p.shape)
                )));
            }
        }
        total_ext += p.shape[axis];
    }
    let mut out_shape = parts[0].shape.clone();
    out_shape[axis] = total_ext;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = vec![0.0; numel_of(&out_shape)];
    let mut offset = 0usize;
    for p in parts {
        let ext = p.shape[axis];
        for o in 0..outer {
            let src = o * ext * inner;
            let dst = o * total_ext * inner + offset * inner;
            out[dst..dst + ext * inner].copy_from_slice(&p.values[src..src + ext * inner]);
        }
        offset += ext;
    }

    let mut tape: Option<Tape> = None;
    for p in parts {
        if let Some((t, _)) = &p.node {
            match &tape {
                Some(existing) => {
                    if !existing.same_tape(t) {
                        return Err(Error::Contract(
                            "operands recorded on different tapes".to_string(),
                        ));
                    }
                }
                None => tape = Some(t.clone()),
            }
        }
    }
    match tape {
        Some(tape) => {
            let mut ids = Vec::with_capacity(parts.len());
            let mut needs = false;
            for p in parts {
                let id = tape.node_id(p)?;
                needs |= tape.node_needs_grad(id);
                ids.push(id);
            }
            let values = Rc::new(out);
            let id = tape.push(Node {
                op: Op::Concat { parts: ids, axis },
                values: Rc::clone(&values),
                shape: out_shape.clone(),
                needs_grad: needs,
            });
            Ok(Tensor { shape: out_shape, values, node: Some((tape, id)) })
        }
        None => Tensor::from_vec(&out_shape, out),
    }
}

// ---------------------------------------------------------------------------
// backward

/// Per-node gradients produced by [`backward`].
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let (tape, id) = t.node.as_ref()?;
        if !self.tape.same_tape(tape) {
            return None;
        }
        self.grads[*id].as_deref()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, contrib: impl Fn(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    contrib(g);
}

/// Reverse pass from a scalar loss; gradients accumulate by summation when
/// a tensor feeds multiple consumers.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    let (tape, loss_id) = loss
        .node
        .as_ref()
        .ok_or_else(|| Error::Contract("loss is not recorded on a tape".to_string()))?;
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward expects a scalar loss, got shape {}",
            shape_str(loss.shape())
        )));
    }
    let nodes = tape.inner.nodes.borrow();
    let n = nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
    grads[*loss_id] = Some(vec![1.0]);

    for i in (0..=*loss_id).rev() {
        let Some(grad) = grads[i].take() else { continue };
        let node = &nodes[i];
        if !node.needs_grad {
            grads[i] = Some(grad);
            continue;
        }
        let needs = |id: usize| nodes[id].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if needs(*a) {
                    let da = reduce_to(&grad, &node.shape, &nodes[*a].shape);
                    accumulate(&mut grads[*a], da.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
                if needs(*b) {
                    let db = reduce_to(&grad, &node.shape, &nodes[*b].shape);
                    accumulate(&mut grads[*b], db.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(db.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    let da = reduce_to(&grad, &node.shape, &nodes[*a].shape);
                    accumulate(&mut grads[*a], da.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
                if needs(*b) {
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    let db = reduce_to(&neg, &node.shape, &nodes[*b].shape);
                    accumulate(&mut grads[*b], db.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(db.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let av = expand(&nodes[*a].values, &nodes[*a].shape, &node.shape);
                let bv = expand(&nodes[*b].values, &nodes[*b].shape, &node.shape);
                if needs(*a) {
                    let full: Vec<f64> = grad.iter().zip(bv.iter()).map(|(g, b)| g * b).collect();
                    let da = reduce_to(&full, &node.shape, &nodes[*a].shape);
                    accumulate(&mut grads[*a], da.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
                if needs(*b) {
                    let full: Vec<f64> = grad.iter().zip(av.iter()).map(|(g, a)| g * a).collect();
                    let db = reduce_to(&full, &node.shape, &nodes[*b].shape);
                    accumulate(&mut grads[*b], db.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(db.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n2 = nodes[*b].shape[1];
                if needs(*a) {
                    // dA = G * B^T
                    let bt = transpose_raw(&nodes[*b].values, k, n2);
                    let da = matmul_raw(&grad, &bt, m, n2, k);
                    accumulate(&mut grads[*a], da.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
                if needs(*b) {
                    // dB = A^T * G
                    let at = transpose_raw(&nodes[*a].values, m, k);
                    let db = matmul_raw(&at, &grad, k, m, n2);
                    accumulate(&mut grads[*b], db.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(db.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                if needs(*a) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let da = transpose_raw(&grad, r, c);
                    accumulate(&mut grads[*a], da.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    accumulate(&mut grads[*a], grad.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(grad.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[*axis + 1..].iter().product();
                let total_ext = node.shape[*axis];
                let mut offset = 0usize;
                for &pid in parts {
                    let ext = nodes[pid].shape[*axis];
                    if needs(pid) {
                        let plen = nodes[pid].shape.iter().product::<usize>();
                        let mut dp = vec![0.0; plen];
                        for o in 0..outer {
                            let src = o * total_ext * inner + offset * inner;
                            let dst = o * ext * inner;
                            dp[dst..dst + ext * inner]
                                .copy_from_slice(&grad[src..src + ext * inner]);
                        }
                        accumulate(&mut grads[pid], plen, |g| {
                            for (gv, dv) in g.iter_mut().zip(dp.iter()) {
                                *gv += dv;
                            }
                        });
                    }
                    offset += ext;
                }
            }
            Op::Slice { a, axis, start } => {
                if needs(*a) {
                    let src_shape = &nodes[*a].shape;
                    let outer: usize = src_shape[..*axis].iter().product();
                    let inner: usize = src_shape[*axis + 1..].iter().product();
                    let ext = src_shape[*axis];
                    let len = node.shape[*axis];
                    let plen = numel_of(src_shape);
                    let mut da = vec![0.0; plen];
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        let src = o * len * inner;
                        da[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                    }
                    accumulate(&mut grads[*a], plen, |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Unary { a, kind } => {
                if needs(*a) {
                    let xin = &nodes[*a].values;
                    let yout = &node.values;
                    accumulate(&mut grads[*a], xin.len(), |g| {
                        for idx in 0..g.len() {
                            g[idx] += grad[idx] * kind.derivative(xin[idx], yout[idx]);
                        }
                    });
                }
            }
            Op::Clamp { a, lo, hi } => {
                if needs(*a) {
                    let xin = &nodes[*a].values;
                    accumulate(&mut grads[*a], xin.len(), |g| {
                        for idx in 0..g.len() {
                            if xin[idx] > *lo && xin[idx] < *hi {
                                g[idx] += grad[idx];
                            }
                        }
                    });
                }
            }
            Op::AddScalar { a } => {
                if needs(*a) {
                    accumulate(&mut grads[*a], grad.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(grad.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::MulScalar { a, c } => {
                if needs(*a) {
                    accumulate(&mut grads[*a], grad.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(grad.iter()) {
                            *gv += dv * c;
                        }
                    });
                }
            }
            Op::Softmax { a, axis } => {
                if needs(*a) {
                    let y = &node.values;
                    let outer: usize = node.shape[..*axis].iter().product();
                    let ext = node.shape[*axis];
                    let inner: usize = node.shape[*axis + 1..].iter().product();
                    let mut da = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |x: usize| o * ext * inner + x * inner + i;
                            let mut dot = 0.0;
                            for x in 0..ext {
                                dot += grad[at(x)] * y[at(x)];
                            }
                            for x in 0..ext {
                                da[at(x)] = y[at(x)] * (grad[at(x)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[*a], da.len(), |g| {
                        for (gv, dv) in g.iter_mut().zip(da.iter()) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Sum { a, axis } => {
                if needs(*a) {
                    let src_shape = &nodes[*a].shape;
                    let plen = numel_of(src_shape);
                    match axis {
                        None => {
                            let gv0 = grad[0];
                            accumulate(&mut grads[*a], plen, |g| {
                                for gv in g.iter_mut() {
                                    *gv += gv0;
                                }
                            });
                        }
                        Some(ax) => {
                            let outer: usize = src_shape[..*ax].iter().product();
                            let ext = src_shape[*ax];
                            let inner: usize = src_shape[*ax + 1..].iter().product();
                            accumulate(&mut grads[*a], plen, |g| {
                                for o in 0..outer {
                                    for x in 0..ext {
                                        for i in 0..inner {
                                            g[o * ext * inner + x * inner + i] +=
                                                grad[o * inner + i];
                                        }
                                    }
                                }
                            });
                        }
                    }
                }
            }
            Op::Mean { a, axis } => {
                if needs(*a) {
                    let src_shape = &nodes[*a].shape;
                    let plen = numel_of(src_shape);
                    match axis {
                        None => {
                            let gv0 = grad[0] / plen as f64;
                            accumulate(&mut grads[*a], plen, |g| {
                                for gv in g.iter_mut() {
                                    *gv += gv0;
                                }
                            });
                        }
                        Some(ax) => {
                            let outer: usize = src_shape[..*ax].iter().product();
                            let ext = src_shape[*ax];
                            let inner: usize = src_shape[*ax + 1..].iter().product();
                            let scale = 1.0 / ext as f64;
                            accumulate(&mut grads[*a], plen, |g| {
                                for o in 0..outer {
                                    for x in 0..ext {
                                        for i in 0..inner {
                                            g[o * ext * inner + x * inner + i] +=
                                                grad[o * inner + i] * scale;
                                        }
                                    }
                                }
                            });
                        }
                    }
                }
            }
            Op::GatherRows { a, indices } => {
                if needs(*a) {
                    let d = nodes[*a].shape[1];
                    let plen = numel_of(&nodes[*a].shape);
                    accumulate(&mut grads[*a], plen, |g| {
                        for (row, &ix) in indices.iter().enumerate() {
                            for c in 0..d {
                                g[ix * d + c] += grad[row * d + c];
                            }
                        }
                    });
                }
            }
            Op::Conv2d { input, kernel, bias, stride } => {
                let ishape = &nodes[*input].shape;
                let kshape = &nodes[*kernel].shape;
                let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (c_out, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let ivals = &nodes[*input].values;
                let kvals = &nodes[*kernel].values;
                if needs(*bias) {
                    accumulate(&mut grads[*bias], c_out, |g| {
                        for co in 0..c_out {
                            let base = co * oh * ow;
                            for v in &grad[base..base + oh * ow] {
                                g[co] += v;
                            }
                        }
                    });
                }
                if needs(*kernel) {
                    let klen = numel_of(kshape);
                    accumulate(&mut grads[*kernel], klen, |g| {
                        for co in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = grad[(co * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..kh {
                                            let ibase = ci * h * w
                                                + (oy * stride + ky) * w
                                                + ox * stride;
                                            let kbase = ((co * c_in + ci) * kh + ky) * kw;
                                            for kx in 0..kw {
                                                g[kbase + kx] += gv * ivals[ibase + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if needs(*input) {
                    let plen = numel_of(ishape);
                    accumulate(&mut grads[*input], plen, |g| {
                        for co in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = grad[(co * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c_in {
                                        for ky in 0..kh {
                                            let ibase = ci * h * w
                                                + (oy * stride + ky) * w
                                                + ox * stride;
                                            let kbase = ((co * c_in + ci) * kh + ky) * kw;
                                            for kx in 0..kw {
                                                g[ibase + kx] += gv * kvals[kbase + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        grads[i] = Some(grad);
    }
    Ok(Gradients { tape: tape.clone(), grads })
}

// ---------------------------------------------------------------------------
// gradient checking

/// Max relative error between analytic and numeric gradient arrays,
/// using |a-n| / max(1e-8, |a|+|n|) per coordinate.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central-difference check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, values: &[f64], shape: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let inputs = [(values.to_vec(), shape.to_vec())];
    grad_check_many(|tape, xs| f(tape, &xs[0]), &inputs, eps)
}

/// Central-difference check of a scalar function of several tensors; returns
/// the max relative error over all coordinates of all inputs.
pub fn grad_check_many<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check eps must be positive".to_string()));
    }
    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let xs: Vec<Tensor> = data
            .iter()
            .zip(inputs.iter())
            .map(|(v, (_, s))| tape.leaf(v.clone(), s))
            .collect::<Result<_>>()?;
        f(&tape, &xs)?.value()
    };

    // analytic
    let tape = Tape::new();
    let xs: Vec<Tensor> = inputs
        .iter()
        .map(|(v, s)| tape.leaf(v.clone(), s))
        .collect::<Result<_>>()?;
    let loss = f(&tape, &xs)?;
    if loss.numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".to_string()));
    }
    let grads = backward(&loss)?;

    let mut worst = 0.0f64;
    let mut data: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    for (pi, x) in xs.iter().enumerate() {
        let analytic = grads
            .get(x)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[pi].0.len()]);
        for ci in 0..data[pi].len() {
            let orig = data[pi][ci];
            data[pi][ci] = orig + eps;
            let fp = eval(&data)?;
            data[pi][ci] = orig - eps;
            let fm = eval(&data)?;
            data[pi][ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ci];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_vec(&[3, 3], randvec(&mut rng, 9)).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let out = eye.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1., 1.]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2x3]"), "both shapes should be named: {msg}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randvec(&mut rng, 6);
        let b = randvec(&mut rng, 12);
        let err = grad_check_many(
            |_, xs| xs[0].matmul(&xs[1]).map(|t| t.sum_all()),
            &[(a, vec![2, 3]), (b, vec![3, 4])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "matmul grad rel err {err}");
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[1, 4, 5], randvec(&mut rng, 20)).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 4, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0; 4]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&k, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn conv2d_kernel_larger_than_input_errors() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(x.conv2d(&k, &b, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randvec(&mut rng, 36);
        let k = randvec(&mut rng, 2 * 1 * 3 * 3);
        let b = randvec(&mut rng, 2);
        let err = grad_check_many(
            |_, xs| xs[0].conv2d(&xs[1], &xs[2], 2).map(|t| t.sum_all()),
            &[(x, vec![1, 6, 6]), (k, vec![2, 1, 3, 3]), (b, vec![2])],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d grad rel err {err}");
    }

    #[test]
    fn activation_values() {
        let x = Tensor::from_vec(&[3], vec![0.0, 1.0, -3.0]).unwrap();
        let s = x.softsign();
        assert_eq!(s.data(), &[0.0, 0.5, -0.75]);
        let sig = Tensor::scalar(0.0).sigmoid();
        assert_eq!(sig.data(), &[0.5]);
    }

    #[test]
    fn softmax_uniform_and_pair() {
        let u = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap().softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap().softmax(0).unwrap();
        assert!((p.data()[0] - 0.731059).abs() < 1e-6);
        assert!((p.data()[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = randvec(&mut rng, 6);
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let a = Tensor::from_vec(&[2, 3], v).unwrap().softmax(1).unwrap();
        let b = Tensor::from_vec(&[2, 3], shifted).unwrap().softmax(1).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let c = concat(&[a.clone(), b.clone()], 0).unwrap();
        let a2 = c.slice(0, 0, 1).unwrap();
        let b2 = c.slice(0, 1, 1).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn mean_and_its_gradient() {
        let x = Tensor::from_vec(&[3], vec![2.0, 4.0, 6.0]).unwrap();
        assert_eq!(x.mean_all().data(), &[4.0]);

        let tape = Tape::new();
        let leaf = tape.leaf(vec![2.0, 4.0, 6.0], &[3]).unwrap();
        let loss = leaf.mean_all();
        let grads = backward(&loss).unwrap();
        for g in grads.get(&leaf).unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_scalar_leaf() {
        let tape = Tape::new();
        let x = tape.leaf(vec![7.5], &[1]).unwrap();
        let grads = backward(&x).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0], &[1]).unwrap();
        let y = x.add(&x).unwrap(); // 2x
        let z = y.mul(&x).unwrap(); // 2x^2
        let grads = backward(&z.sum_all()).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[12.0]); // d/dx 2x^2 = 4x
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randvec(&mut rng, 10);
        let err = grad_check(|_, t| Ok(t.sum_all()), &x, &[10], 1e-4).unwrap();
        assert!(err < 1e-10, "linear rel err {err}");
    }

    #[test]
    fn grad_check_logcosh() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randvec(&mut rng, 12);
        let err = grad_check(|_, t| Ok(t.logcosh_elem().sum_all()), &x, &[3, 4], 1e-4).unwrap();
        assert!(err < 1e-6, "logcosh rel err {err}");
    }

    #[test]
    fn grad_check_detects_corrupted_rule() {
        // negative control: a wrong analytic gradient must trip the checker
        let x = vec![0.3, -0.7, 1.1];
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone(), &[3]).unwrap();
        let loss = leaf.mul(&leaf).unwrap().sum_all();
        let grads = backward(&loss).unwrap();
        let mut corrupted = grads.get(&leaf).unwrap().to_vec();
        corrupted[1] += 0.5;
        let numeric: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(max_rel_error(&corrupted, &numeric) > 1e-3);
        // and the honest gradient passes
        assert!(max_rel_error(grads.get(&leaf).unwrap(), &numeric) < 1e-12);
    }

    #[test]
    fn all_ops_pass_grad_check_on_random_shapes() {
        // ten seeds per op family, eps 1e-4, threshold 1e-3
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let r = rng.gen_range(2..5usize);
            let c = rng.gen_range(2..5usize);
            let x = randvec(&mut rng, r * c);
            let y = randvec(&mut rng, r * c);
            let w = randvec(&mut rng, c * 3);

            let cases: Vec<(&str, f64)> = vec![
                (
                    "add_mul",
                    grad_check_many(
                        |_, xs| xs[0].add(&xs[1]).and_then(|t| t.mul(&xs[0])).map(|t| t.sum_all()),
                        &[(x.clone(), vec![r, c]), (y.clone(), vec![r, c])],
                        1e-4,
                    )
                    .unwrap(),
                ),
                (
                    "matmul",
                    grad_check_many(
                        |_, xs| xs[0].matmul(&xs[1]).map(|t| t.sum_all()),
                        &[(x.clone(), vec![r, c]), (w.clone(), vec![c, 3])],
                        1e-4,
                    )
                    .unwrap(),
                ),
                (
                    "activations",
                    grad_check(
                        |_, t| {
                            let s = t.sigmoid().add(&t.tanh())?;
                            let s = s.add(&t.softsign())?;
                            Ok(s.sum_all())
                        },
                        &x,
                        &[r, c],
                        1e-4,
                    )
                    .unwrap(),
                ),
                (
                    "softmax_mean",
                    grad_check(
                        |_, t| t.softmax(1)?.mul(t).map(|t| t.mean_all()),
                        &x,
                        &[r, c],
                        1e-4,
                    )
                    .unwrap(),
                ),
                (
                    "concat_slice",
                    grad_check_many(
                        |_, xs| {
                            let c0 = concat(&[xs[0].clone(), xs[1].clone()], 1)?;
                            let s = c0.slice(1, 1, c)?;
                            s.mul(&s).map(|t| t.sum_all())
                        },
                        &[(x.clone(), vec![r, c]), (y.clone(), vec![r, c])],
                        1e-4,
                    )
                    .unwrap(),
                ),
                (
                    "transpose_sum_axis",
                    grad_check(
                        |_, t| {
                            let tt = t.transpose()?;
                            let s = tt.sum_axis(0)?;
                            s.mul(&s).map(|t| t.sum_all())
                        },
                        &x,
                        &[r, c],
                        1e-4,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in cases {
                assert!(err < 1e-3, "{name} rel err {err} at seed {seed}");
            }
        }
    }

    #[test]
    fn tape_replay_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = tape.leaf(randvec(&mut rng, 12), &[3, 4]).unwrap();
            let w = tape.leaf(randvec(&mut rng, 8), &[4, 2]).unwrap();
            let h = x.matmul(&w).unwrap().tanh();
            let loss = h.logcosh_elem().sum_all();
            let grads = backward(&loss).unwrap();
            (
                loss.value().unwrap().to_bits(),
                grads.get(&w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let tape = Tape::new();
        let table = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let picked = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(picked.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let grads = backward(&picked.sum_all()).unwrap();
        assert_eq!(grads.get(&table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

            #[test]
            fn softmax_rows_are_probability_vectors(
                vals in proptest::collection::vec(-30.0f64..30.0, 12)
            ) {
                let t = Tensor::from_vec(&[3, 4], vals).unwrap().softmax(1).unwrap();
                for r in 0..3 {
                    let row = &t.data()[r * 4..(r + 1) * 4];
                    let s: f64 = row.iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&v| v > 0.0));
                }
            }

            #[test]
            fn transpose_is_an_involution(
                vals in proptest::collection::vec(-10.0f64..10.0, 12)
            ) {
                let t = Tensor::from_vec(&[3, 4], vals.clone()).unwrap();
                let back = t.transpose().unwrap().transpose().unwrap();
                prop_assert_eq!(back.data(), &vals[..]);
            }

            #[test]
            fn concat_then_slice_recovers_parts(
                a in proptest::collection::vec(-5.0f64..5.0, 6),
                b in proptest::collection::vec(-5.0f64..5.0, 9),
            ) {
                let ta = Tensor::from_vec(&[3, 2], a.clone()).unwrap();
                let tb = Tensor::from_vec(&[3, 3], b.clone()).unwrap();
                let c = concat(&[ta, tb], 1).unwrap();
                let left = c.slice(1, 0, 2).unwrap();
                let right = c.slice(1, 2, 3).unwrap();
                prop_assert_eq!(left.data(), &a[..]);
                prop_assert_eq!(right.data(), &b[..]);
            }
        }
    }
}
