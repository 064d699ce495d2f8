//! Define-by-run gradient tape.
//!
//! `Tape` owns the nodes of one recorded computation; `Var` is a copyable
//! handle into it. Nodes are appended in program order, so reverse creation
//! order is a valid reverse topological order and backward visits each node
//! exactly once. Every forward op checks its output for NaN/Inf and fails
//! rather than propagating a poisoned value.

use std::cell::RefCell;

use crate::params::ParamStore;
use crate::scalar::{lit, Scalar};

use super::{NumericsError, Result, Tensor};

const UNIT_ROWS_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    SoftmaxColumns(usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Outer(usize, usize),
    Sum(usize),
    Splice { input: usize, offsets: Vec<isize> },
    SelectRows { input: usize, rows: Vec<usize> },
    StackRows(Vec<usize>),
    UnitRows(usize),
    CrossEntropy { logits: usize, label: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

impl<T> Node<T> {
    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Recorded computation over one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    /// (node id, parameter slot) pairs for leaves bound to a `ParamStore`.
    bindings: RefCell<Vec<(usize, usize)>>,
}

/// Handle to one tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            bindings: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf holding `value`.
    pub fn input(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let node = Node {
            shape: value.shape().to_vec(),
            data: value.into_data(),
            op: Op::Leaf,
            requires_grad,
        };
        let id = self.push_unchecked(node);
        Var { tape: self, id }
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.input(value, false)
    }

    /// Records a trainable leaf bound to a named parameter; after
    /// [`Tape::backward`], [`Tape::accumulate_param_grads`] adds the leaf
    /// gradient into the store's matching grad slot.
    pub fn param<'t>(&'t self, store: &ParamStore<T>, name: &str) -> Result<Var<'t, T>> {
        let slot = store
            .index_of(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let param = store.by_index(slot);
        let node = Node {
            shape: param.shape.clone(),
            data: param.values.clone(),
            op: Op::Leaf,
            requires_grad: true,
        };
        let id = self.push_unchecked(node);
        self.bindings.borrow_mut().push((id, slot));
        Ok(Var { tape: self, id })
    }

    fn push_unchecked(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    fn push(&self, op_name: &'static str, node: Node<T>) -> Result<Var<'_, T>> {
        if node.data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let id = self.push_unchecked(node);
        Ok(Var { tape: self, id })
    }

    /// Stacks 1-D vars of equal length into a matrix, one per row.
    pub fn stack_rows<'t>(&'t self, rows: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let nodes = self.nodes.borrow();
        let width = match rows.first() {
            Some(v) => nodes[v.id].data.len(),
            None => {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    detail: "no rows".into(),
                })
            }
        };
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut requires = false;
        for v in rows {
            let n = &nodes[v.id];
            if n.shape.len() != 1 || n.data.len() != width {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    detail: format!("row shape {:?}, want [{width}]", n.shape),
                });
            }
            requires |= n.requires_grad;
            data.extend_from_slice(&n.data);
        }
        let node = Node {
            shape: vec![rows.len(), width],
            data,
            op: Op::StackRows(rows.iter().map(|v| v.id).collect()),
            requires_grad: requires,
        };
        drop(nodes);
        self.push("stack_rows", node)
    }

    /// Concatenates 1-D vars end to end.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let nodes = self.nodes.borrow();
        let mut data = Vec::new();
        let mut requires = false;
        for v in parts {
            let n = &nodes[v.id];
            if n.shape.len() != 1 {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    detail: format!("part shape {:?}, want 1-D", n.shape),
                });
            }
            requires |= n.requires_grad;
            data.extend_from_slice(&n.data);
        }
        let node = Node {
            shape: vec![data.len()],
            data,
            op: Op::Concat(parts.iter().map(|v| v.id).collect()),
            requires_grad: requires,
        };
        drop(nodes);
        self.push("concat", node)
    }

    /// Runs reverse-mode accumulation from a scalar loss. Gradients of all
    /// contributing nodes become readable through [`Var::grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].data.len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: nodes[loss.id].shape.clone() });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_one(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Adds gradients of param-bound leaves into the store's grad slots.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        let grads = self.grads.borrow();
        for &(node, slot) in self.bindings.borrow().iter() {
            if let Some(Some(g)) = grads.get(node) {
                store.add_grad(slot, g);
            }
        }
    }
}

fn backprop_one<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut Vec<Option<Vec<T>>>,
) {
    let wants = |t: usize| nodes[t].requires_grad;
    macro_rules! add_to {
        ($target:expr, $delta:expr) => {{
            let target = $target;
            let slot = grads[target]
                .get_or_insert_with(|| vec![T::zero(); nodes[target].data.len()]);
            for (s, d) in slot.iter_mut().zip($delta) {
                *s += d;
            }
        }};
    }

    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].rows(), nodes[*a].cols());
            let n = nodes[*b].cols();
            if wants(*a) {
                // dL/da = g · bᵀ, as row dot products to stay contiguous
                let bd = &nodes[*b].data;
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for (gv, bv) in grow.iter().zip(brow) {
                            acc += *gv * *bv;
                        }
                        da[i * k + p] = acc;
                    }
                }
                add_to!(*a, da);
            }
            if wants(*b) {
                // dL/db = aᵀ · g
                let ad = &nodes[*a].data;
                let mut db = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        for j in 0..n {
                            db[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
                add_to!(*b, db);
            }
        }
        Op::Add(a, b) => {
            if wants(*a) {
                add_to!(*a, g.iter().copied());
            }
            if wants(*b) {
                add_to!(*b, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                add_to!(*a, g.iter().copied());
            }
            if wants(*b) {
                add_to!(*b, g.iter().map(|v| -*v));
            }
        }
        Op::Hadamard(a, b) => {
            if wants(*a) {
                add_to!(*a, g.iter().zip(&nodes[*b].data).map(|(gv, bv)| *gv * *bv));
            }
            if wants(*b) {
                add_to!(*b, g.iter().zip(&nodes[*a].data).map(|(gv, av)| *gv * *av));
            }
        }
        Op::Scale(a, c) => {
            if wants(*a) {
                let c = *c;
                add_to!(*a, g.iter().map(|v| *v * c));
            }
        }
        Op::AddRow(mat, vec) => {
            if wants(*mat) {
                add_to!(*mat, g.iter().copied());
            }
            if wants(*vec) {
                let cols = nodes[*vec].data.len();
                let mut dv = vec![T::zero(); cols];
                for (i, gv) in g.iter().enumerate() {
                    dv[i % cols] += *gv;
                }
                add_to!(*vec, dv);
            }
        }
        Op::Tanh(a) => {
            if wants(*a) {
                add_to!(
                    *a,
                    g.iter().zip(&node.data).map(|(gv, y)| *gv * (T::one() - *y * *y))
                );
            }
        }
        Op::Sigmoid(a) => {
            if wants(*a) {
                add_to!(
                    *a,
                    g.iter().zip(&node.data).map(|(gv, y)| *gv * *y * (T::one() - *y))
                );
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                add_to!(
                    *a,
                    g.iter().zip(&nodes[*a].data).map(|(gv, x)| {
                        if *x > T::zero() {
                            *gv
                        } else {
                            T::zero()
                        }
                    })
                );
            }
        }
        Op::SoftmaxColumns(a) => {
            if wants(*a) {
                let (rows, cols) = (node.rows(), node.cols());
                let y = &node.data;
                let mut da = vec![T::zero(); rows * cols];
                for c in 0..cols {
                    let mut dot = T::zero();
                    for r in 0..rows {
                        dot += y[r * cols + c] * g[r * cols + c];
                    }
                    for r in 0..rows {
                        let i = r * cols + c;
                        da[i] = y[i] * (g[i] - dot);
                    }
                }
                add_to!(*a, da);
            }
        }
        Op::Transpose(a) => {
            if wants(*a) {
                let (rows, cols) = (node.rows(), node.cols());
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[c * rows + r] = g[r * cols + c];
                    }
                }
                add_to!(*a, da);
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                add_to!(*a, g.iter().copied());
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[*p].data.len();
                if wants(*p) {
                    add_to!(*p, g[offset..offset + len].iter().copied());
                }
                offset += len;
            }
        }
        Op::Outer(a, b) => {
            let (m, n) = (node.rows(), node.cols());
            if wants(*a) {
                let bd = &nodes[*b].data;
                let mut da = vec![T::zero(); m];
                for i in 0..m {
                    for j in 0..n {
                        da[i] += g[i * n + j] * bd[j];
                    }
                }
                add_to!(*a, da);
            }
            if wants(*b) {
                let ad = &nodes[*a].data;
                let mut db = vec![T::zero(); n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j] * ad[i];
                    }
                }
                add_to!(*b, db);
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let gs = g[0];
                add_to!(*a, std::iter::repeat(gs).take(nodes[*a].data.len()));
            }
        }
        Op::Splice { input, offsets } => {
            if wants(*input) {
                let rows = nodes[*input].rows();
                let cols = nodes[*input].cols();
                let mut da = vec![T::zero(); rows * cols];
                let width = offsets.len() * cols;
                for t in 0..rows {
                    for (l, off) in offsets.iter().enumerate() {
                        let src = clamp_row(t as isize + off, rows);
                        for c in 0..cols {
                            da[src * cols + c] += g[t * width + l * cols + c];
                        }
                    }
                }
                add_to!(*input, da);
            }
        }
        Op::SelectRows { input, rows } => {
            if wants(*input) {
                let cols = nodes[*input].cols();
                let mut da = vec![T::zero(); nodes[*input].data.len()];
                for (out_r, src_r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        da[src_r * cols + c] += g[out_r * cols + c];
                    }
                }
                add_to!(*input, da);
            }
        }
        Op::StackRows(parts) => {
            let width = node.cols();
            for (r, p) in parts.iter().enumerate() {
                if wants(*p) {
                    add_to!(*p, g[r * width..(r + 1) * width].iter().copied());
                }
            }
        }
        Op::UnitRows(a) => {
            if wants(*a) {
                let (rows, cols) = (node.rows(), node.cols());
                let x = &nodes[*a].data;
                let y = &node.data;
                let eps = lit::<T>(UNIT_ROWS_EPS);
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| *v * *v).sum::<T>().sqrt();
                    if norm <= eps {
                        // linear branch y = x / eps
                        for c in 0..cols {
                            da[r * cols + c] = gr[c] / eps;
                        }
                    } else {
                        let dot = yr.iter().zip(gr).map(|(yv, gv)| *yv * *gv).sum::<T>();
                        for c in 0..cols {
                            da[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                }
                add_to!(*a, da);
            }
        }
        Op::CrossEntropy { logits, label } => {
            if wants(*logits) {
                let z = &nodes[*logits].data;
                let probs = stable_softmax(z);
                let gs = g[0];
                add_to!(
                    *logits,
                    probs.iter().enumerate().map(|(j, p)| {
                        let delta = if j == *label { T::one() } else { T::zero() };
                        gs * (*p - delta)
                    })
                );
            }
        }
    }
}

fn clamp_row(idx: isize, rows: usize) -> usize {
    idx.clamp(0, rows as isize - 1) as usize
}

fn stable_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|v| (*v - m).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    /// Copies the forward value out of the tape.
    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape consistent")
    }

    /// Scalar forward value; panics if not a single element.
    pub fn scalar_value(&self) -> T {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].data.len(), 1, "scalar_value on non-scalar");
        nodes[self.id].data[0]
    }

    /// Gradient captured by the last `backward` call, if this node took part.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        let nodes = self.tape.nodes.borrow();
        Some(Tensor::new(nodes[self.id].shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn binary_same_shape(
        &self,
        other: Var<'t, T>,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: impl Fn(usize, usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        let node = Node {
            shape: a.shape.clone(),
            data,
            op: op(self.id, other.id),
            requires_grad: a.requires_grad || b.requires_grad,
        };
        drop(nodes);
        self.tape.push(op_name, node)
    }

    fn unary(
        &self,
        op_name: &'static str,
        f: impl Fn(T) -> T,
        op: impl Fn(usize) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        let node = Node {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| f(*x)).collect(),
            op: op(self.id),
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push(op_name, node)
    }

    /// Standard matrix product. Backward: dL/da = g·bᵀ, dL/db = aᵀ·g.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape.len() != 2 || b.shape.len() != 2 || a.cols() != b.rows() {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} × {:?}", a.shape, b.shape),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * *bv;
                }
            }
        }
        let node = Node {
            shape: vec![m, n],
            data,
            op: Op::MatMul(self.id, other.id),
            requires_grad: a.requires_grad || b.requires_grad,
        };
        drop(nodes);
        self.tape.push("matmul", node)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn hadamard(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_same_shape(other, "hadamard", |x, y| x * y, Op::Hadamard)
    }

    pub fn scale(&self, factor: T) -> Result<Var<'t, T>> {
        self.unary("scale", |x| x * factor, |a| Op::Scale(a, factor))
    }

    /// Adds a 1-D bias to every row of a matrix.
    pub fn add_row(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let (m, v) = (&nodes[self.id], &nodes[bias.id]);
        if m.shape.len() != 2 || v.shape.len() != 1 || m.cols() != v.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", m.shape, v.shape),
            });
        }
        let cols = m.cols();
        let data = m
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| *x + v.data[i % cols])
            .collect();
        let node = Node {
            shape: m.shape.clone(),
            data,
            op: Op::AddRow(self.id, bias.id),
            requires_grad: m.requires_grad || v.requires_grad,
        };
        drop(nodes);
        self.tape.push("add_row", node)
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary("tanh", |x| x.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        self.unary(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            Op::Sigmoid,
        )
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary("relu", |x| x.max(T::zero()), Op::Relu)
    }

    /// Column-wise stabilized softmax of a matrix.
    pub fn softmax_columns(&self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "softmax_columns",
                detail: format!("{:?}, want 2-D", a.shape),
            });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut data = vec![T::zero(); rows * cols];
        for c in 0..cols {
            let mut mx = T::neg_infinity();
            for r in 0..rows {
                mx = mx.max(a.data[r * cols + c]);
            }
            let mut total = T::zero();
            for r in 0..rows {
                let e = (a.data[r * cols + c] - mx).exp();
                data[r * cols + c] = e;
                total += e;
            }
            for r in 0..rows {
                data[r * cols + c] /= total;
            }
        }
        let node = Node {
            shape: a.shape.clone(),
            data,
            op: Op::SoftmaxColumns(self.id),
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("softmax_columns", node)
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}, want 2-D", a.shape),
            });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = a.data[r * cols + c];
            }
        }
        let node = Node {
            shape: vec![cols, rows],
            data,
            op: Op::Transpose(self.id),
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("transpose", node)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if shape.iter().product::<usize>() != a.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", a.shape, shape),
            });
        }
        let node = Node {
            shape: shape.to_vec(),
            data: a.data.clone(),
            op: Op::Reshape(self.id),
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("reshape", node)
    }

    /// Row-major flattening to 1-D.
    pub fn vectorize(&self) -> Result<Var<'t, T>> {
        let n = self.numel();
        self.reshape(&[n])
    }

    /// 1-D vector viewed as a single column.
    pub fn as_col(&self) -> Result<Var<'t, T>> {
        let n = self.numel();
        self.reshape(&[n, 1])
    }

    /// Outer product of two vectors: out[i,j] = a[i]·b[j].
    pub fn outer(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape.len() != 1 || b.shape.len() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "outer",
                detail: format!("{:?} ⊗ {:?}", a.shape, b.shape),
            });
        }
        let (m, n) = (a.data.len(), b.data.len());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(a.data[i] * b.data[j]);
            }
        }
        let node = Node {
            shape: vec![m, n],
            data,
            op: Op::Outer(self.id, other.id),
            requires_grad: a.requires_grad || b.requires_grad,
        };
        drop(nodes);
        self.tape.push("outer", node)
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        let total: T = a.data.iter().copied().sum();
        let node = Node {
            shape: vec![],
            data: vec![total],
            op: Op::Sum(self.id),
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("sum", node)
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let n = self.numel();
        self.sum()?.scale(T::one() / lit::<T>(n as f64))
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn frob_sq(&self) -> Result<Var<'t, T>> {
        self.hadamard(*self)?.sum()
    }

    /// Temporal context splicing with replicate padding: output row t is the
    /// concatenation of input rows t+offsets, edge rows clamped.
    pub fn splice(&self, offsets: &[isize]) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 || a.rows() == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "splice",
                detail: format!("{:?}, want non-empty 2-D", a.shape),
            });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let width = offsets.len() * cols;
        let mut data = Vec::with_capacity(rows * width);
        for t in 0..rows {
            for off in offsets {
                let src = clamp_row(t as isize + off, rows);
                data.extend_from_slice(&a.data[src * cols..(src + 1) * cols]);
            }
        }
        let node = Node {
            shape: vec![rows, width],
            data,
            op: Op::Splice { input: self.id, offsets: offsets.to_vec() },
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("splice", node)
    }

    /// Gathers the given rows (indices may repeat) into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "select_rows",
                detail: format!("{:?}, want 2-D", a.shape),
            });
        }
        let cols = a.cols();
        if let Some(&bad) = rows.iter().find(|r| **r >= a.rows()) {
            return Err(NumericsError::ShapeMismatch {
                op: "select_rows",
                detail: format!("row {} out of {}", bad, a.rows()),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&a.data[r * cols..(r + 1) * cols]);
        }
        let node = Node {
            shape: vec![rows.len(), cols],
            data,
            op: Op::SelectRows { input: self.id, rows: rows.to_vec() },
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("select_rows", node)
    }

    /// Extracts one row of a matrix as a 1-D vector.
    pub fn row(&self, index: usize) -> Result<Var<'t, T>> {
        let cols = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].cols()
        };
        self.select_rows(&[index])?.reshape(&[cols])
    }

    /// L2-normalizes each row, with an epsilon floor against zero rows.
    pub fn unit_rows(&self) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "unit_rows",
                detail: format!("{:?}, want 2-D", a.shape),
            });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let eps = lit::<T>(UNIT_ROWS_EPS);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let xr = &a.data[r * cols..(r + 1) * cols];
            let norm = xr.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            data.extend(xr.iter().map(|v| *v / norm));
        }
        let node = Node {
            shape: a.shape.clone(),
            data,
            op: Op::UnitRows(self.id),
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("unit_rows", node)
    }

    /// Cross-entropy of 1-D logits against an integer label, via a stable
    /// log-sum-exp.
    pub fn cross_entropy(&self, label: usize) -> Result<Var<'t, T>> {
        let nodes = self.tape.nodes.borrow();
        let a = &nodes[self.id];
        if a.shape.len() != 1 || label >= a.data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?}, label {}", a.shape, label),
            });
        }
        let z = &a.data;
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.iter().map(|v| (*v - m).exp()).sum::<T>().ln();
        let node = Node {
            shape: vec![],
            data: vec![lse - z[label]],
            op: Op::CrossEntropy { logits: self.id, label },
            requires_grad: a.requires_grad,
        };
        drop(nodes);
        self.tape.push("cross_entropy", node)
    }
}
