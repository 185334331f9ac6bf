//! Reverse-mode differentiation over an append-only record of primitive ops.
//!
//! Every primitive evaluates eagerly when it is recorded. The record keeps the
//! op, its input handles and its output value, which is all the reverse sweep
//! needs. Nodes are only ever appended, so inputs always precede outputs.

use super::tensor::{matmul, matmul_at, matmul_bt};
use super::{NumError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed primitive set.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Input value; `slot` is `Some` for parameters that receive gradients.
    Leaf { slot: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `s·a + c` with constants `s`, `c`.
    ScaleShift(Var, f64, f64),
    MatMul(Var, Var),
    /// `x·wᵀ + b` for `x [m×k]`, `w [n×k]`, `b [n]`.
    Affine(Var, Var, Var),
    /// `x·wᵀ`.
    Linear(Var, Var),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    /// Sum of all entries (scalar).
    Sum(Var),
    /// Mean of all entries (scalar).
    Mean(Var),
    /// Row sums of a rank-2 tensor, `[m×n] → [m×1]`.
    RowSum(Var),
    /// Column-wise concatenation of rank-2 tensors with equal row counts.
    Concat(Vec<Var>),
    /// Columns `start..end` of a rank-2 tensor.
    SliceCols(Var, usize, usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleShift(..) => "scale_shift",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Linear(..) => "linear",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Linear(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(x, w, b) => vec![*x, *w, *b],
            Op::ScaleShift(a, ..)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::SliceCols(a, ..) => vec![*a],
            Op::Concat(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of one scalar (or seeded) output with respect to every parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    slots: Vec<Tensor>,
}

impl Gradients {
    pub fn slot(&self, i: usize) -> &Tensor {
        &self.slots[i]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.slots
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.slots.iter()
    }
}

/// Append-only computation record.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Parameter handles in slot order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Leaf that receives a gradient slot.
    pub fn param(&mut self, value: Tensor) -> Var {
        let slot = self.params.len();
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf { slot: Some(slot) },
            value,
            needs_grad: true,
        });
        self.params.push(v);
        v
    }

    /// Leaf without a gradient slot.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf { slot: None },
            value,
            needs_grad: false,
        });
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NumError> {
        self.push(Op::ScaleShift(a, scale, shift))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NumError> {
        self.push(Op::ScaleShift(a, s, 0.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        self.push(Op::Affine(x, w, b))
    }

    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, NumError> {
        self.push(Op::Linear(x, w))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::Mean(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var, NumError> {
        self.push(Op::RowSum(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        self.push(Op::SliceCols(a, start, end))
    }

    /// Records `op`, evaluating it immediately.
    pub fn push(&mut self, op: Op) -> Result<Var, NumError> {
        let index = self.nodes.len();
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= index) {
            return Err(NumError::Shape {
                index,
                op: op.name(),
                detail: format!("input {} is not recorded yet", bad.0),
            });
        }
        let value = self.eval(&op, index)?;
        if !value.all_finite() {
            return Err(NumError::NonFinite {
                index,
                op: op.name(),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(index))
    }

    fn eval(&self, op: &Op, index: usize) -> Result<Tensor, NumError> {
        let shape_err = |detail: String| NumError::Shape {
            index,
            op: op.name(),
            detail,
        };
        let val = |v: &Var| &self.nodes[v.0].value;
        let elementwise = |a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64| {
            if a.shape() == b.shape() {
                Ok(a.zip_map(b, f))
            } else if b.len() == 1 {
                let s = b.data()[0];
                Ok(a.map(|x| f(x, s)))
            } else if a.len() == 1 {
                let s = a.data()[0];
                Ok(b.map(|y| f(s, y)))
            } else {
                Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        };
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are pushed directly"),
            Op::Add(a, b) => elementwise(val(a), val(b), |x, y| x + y)?,
            Op::Sub(a, b) => elementwise(val(a), val(b), |x, y| x - y)?,
            Op::Mul(a, b) => elementwise(val(a), val(b), |x, y| x * y)?,
            Op::ScaleShift(a, s, c) => {
                let (s, c) = (*s, *c);
                val(a).map(|x| s * x + c)
            }
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                    return Err(shape_err(format!("{:?} · {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))?
            }
            Op::Affine(x, w, b) => {
                let (x, w, b) = (val(x), val(w), val(b));
                if x.rank() != 2 || w.rank() != 2 || x.cols() != w.cols() || b.len() != w.rows()
                {
                    return Err(shape_err(format!(
                        "x {:?}, w {:?}, b {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    )));
                }
                let (m, k, n) = (x.rows(), x.cols(), w.rows());
                let mut data = matmul_bt(x.data(), w.data(), m, k, n);
                for row in data.chunks_mut(n) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::new(vec![m, n], data)?
            }
            Op::Linear(x, w) => {
                let (x, w) = (val(x), val(w));
                if x.rank() != 2 || w.rank() != 2 || x.cols() != w.cols() {
                    return Err(shape_err(format!("x {:?}, w {:?}", x.shape(), w.shape())));
                }
                let (m, k, n) = (x.rows(), x.cols(), w.rows());
                Tensor::new(vec![m, n], matmul_bt(x.data(), w.data(), m, k, n))?
            }
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Softplus(a) => val(a).map(softplus),
            Op::Sigmoid(a) => val(a).map(sigmoid),
            Op::Square(a) => val(a).map(|x| x * x),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Log(a) => {
                let a = val(a);
                if a.data().iter().any(|&x| x <= 0.0) {
                    return Err(NumError::NonFinite {
                        index,
                        op: op.name(),
                    });
                }
                a.map(f64::ln)
            }
            Op::Sum(a) => Tensor::scalar(val(a).sum()),
            Op::Mean(a) => {
                let a = val(a);
                if a.is_empty() {
                    return Err(shape_err("mean of empty tensor".into()));
                }
                Tensor::scalar(a.sum() / a.len() as f64)
            }
            Op::RowSum(a) => {
                let a = val(a);
                if a.rank() != 2 {
                    return Err(shape_err(format!("row_sum of {:?}", a.shape())));
                }
                let data = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
                Tensor::new(vec![a.rows(), 1], data)?
            }
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(shape_err("concat of nothing".into()));
                }
                let rows = val(&parts[0]).rows();
                if parts
                    .iter()
                    .any(|p| val(p).rank() != 2 || val(p).rows() != rows)
                {
                    let shapes: Vec<_> = parts.iter().map(|p| val(p).shape().to_vec()).collect();
                    return Err(shape_err(format!("row counts differ: {shapes:?}")));
                }
                let cols: usize = parts.iter().map(|p| val(p).cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for p in parts {
                        data.extend_from_slice(val(p).row(i));
                    }
                }
                Tensor::new(vec![rows, cols], data)?
            }
            Op::SliceCols(a, start, end) => {
                let a = val(a);
                if a.rank() != 2 || start >= end || *end > a.cols() {
                    return Err(shape_err(format!(
                        "columns {start}..{end} of {:?}",
                        a.shape()
                    )));
                }
                let mut data = Vec::with_capacity(a.rows() * (end - start));
                for i in 0..a.rows() {
                    data.extend_from_slice(&a.row(i)[*start..*end]);
                }
                Tensor::new(vec![a.rows(), end - start], data)?
            }
        };
        Ok(out)
    }

    /// Re-evaluates every node in order with new leaf values (in creation order).
    pub fn replay(&self, leaves: &[Tensor]) -> Result<Tape, NumError> {
        let mut out = Tape::new();
        let mut next_leaf = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Leaf { slot } => {
                    let value = leaves.get(next_leaf).cloned().ok_or_else(|| {
                        NumError::Construct(format!("replay needs a value for leaf node {i}"))
                    })?;
                    if value.shape() != node.value.shape() {
                        return Err(NumError::Shape {
                            index: i,
                            op: "leaf",
                            detail: format!(
                                "replay value {:?} vs recorded {:?}",
                                value.shape(),
                                node.value.shape()
                            ),
                        });
                    }
                    next_leaf += 1;
                    if slot.is_some() {
                        out.param(value);
                    } else {
                        out.constant(value);
                    }
                }
                op => {
                    out.push(op.clone())?;
                }
            }
        }
        Ok(out)
    }

    /// Leaf values in creation order (what [`Tape::replay`] expects).
    pub fn leaf_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf { .. }))
            .map(|n| n.value.clone())
            .collect()
    }

    /// Reverse sweep from `output` seeded with `seed`; one gradient per parameter slot.
    pub fn grad(&self, output: Var, seed: &Tensor) -> Result<Gradients, NumError> {
        let out_val = &self.nodes[output.0].value;
        if out_val.shape() != seed.shape() {
            return Err(NumError::SeedShape {
                expected: out_val.shape().to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                adj[i] = None;
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut adj);
        }
        let slots = self
            .params
            .iter()
            .map(|p| {
                adj.get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[p.0].value.shape()))
            })
            .collect();
        Ok(Gradients { slots })
    }

    /// Gradient of a scalar output (seed 1).
    pub fn grad_scalar(&self, output: Var) -> Result<Gradients, NumError> {
        let seed = Tensor::full(self.nodes[output.0].value.shape(), 1.0);
        if seed.len() != 1 {
            return Err(NumError::SeedShape {
                expected: vec![],
                got: self.nodes[output.0].value.shape().to_vec(),
            });
        }
        self.grad(output, &seed)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Folds a broadcast gradient back to the operand's shape.
    fn unbroadcast(&self, v: Var, g: Tensor) -> Tensor {
        let shape = self.nodes[v.0].value.shape();
        if g.shape() == shape {
            g
        } else {
            Tensor::full(shape, g.sum())
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if needs(a) {
                    let ga = self.unbroadcast(*a, g.clone());
                    self.accumulate(adj, *a, ga);
                }
                if needs(b) {
                    let gb = self.unbroadcast(*b, g.clone());
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    let ga = self.unbroadcast(*a, g.clone());
                    self.accumulate(adj, *a, ga);
                }
                if needs(b) {
                    let gb = self.unbroadcast(*b, g.map(|x| -x));
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let times = |x: &Tensor| -> Tensor {
                    if x.len() == 1 {
                        let s = x.data()[0];
                        g.map(|v| v * s)
                    } else if g.len() == 1 {
                        let s = g.data()[0];
                        x.map(|v| v * s)
                    } else {
                        g.zip_map(x, |p, q| p * q)
                    }
                };
                if needs(a) {
                    let ga = self.unbroadcast(*a, times(vb));
                    self.accumulate(adj, *a, ga);
                }
                if needs(b) {
                    let gb = self.unbroadcast(*b, times(va));
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::ScaleShift(a, s, _) => {
                let s = *s;
                self.accumulate(adj, *a, g.map(|v| v * s));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if needs(a) {
                    // dA = G · Bᵀ
                    let d = matmul_bt(g.data(), vb.data(), m, n, k);
                    self.accumulate(adj, *a, Tensor::new(vec![m, k], d).expect("shape"));
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    let d = matmul_at(va.data(), g.data(), m, k, n);
                    self.accumulate(adj, *b, Tensor::new(vec![k, n], d).expect("shape"));
                }
            }
            Op::Affine(x, w, b) => {
                self.linear_backward(*x, *w, g, adj);
                if needs(b) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = val(b).shape().to_vec();
                    self.accumulate(adj, *b, Tensor::new(shape, gb).expect("shape"));
                }
            }
            Op::Linear(x, w) => self.linear_backward(*x, *w, g, adj),
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y));
                self.accumulate(adj, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(val(a), |gv, z| gv * sigmoid(z));
                self.accumulate(adj, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(adj, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(val(a), |gv, x| 2.0 * gv * x);
                self.accumulate(adj, *a, d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y);
                self.accumulate(adj, *a, d);
            }
            Op::Log(a) => {
                let d = g.zip_map(val(a), |gv, x| gv / x);
                self.accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(adj, *a, Tensor::full(val(a).shape(), s));
            }
            Op::Mean(a) => {
                let va = val(a);
                let s = g.item() / va.len() as f64;
                self.accumulate(adj, *a, Tensor::full(va.shape(), s));
            }
            Op::RowSum(a) => {
                let va = val(a);
                let c = va.cols();
                let mut d = Vec::with_capacity(va.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, c));
                }
                self.accumulate(adj, *a, Tensor::new(va.shape().to_vec(), d).expect("shape"));
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let c = val(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(adj, *p, Tensor::new(vec![rows, c], d).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::SliceCols(a, start, end) => {
                let va = val(a);
                let c = va.cols();
                let mut d = Tensor::zeros(va.shape());
                let w = end - start;
                for r in 0..va.rows() {
                    d.data_mut()[r * c + start..r * c + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate(adj, *a, d);
            }
        }
    }

    fn linear_backward(&self, x: Var, w: Var, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (m, k, n) = (vx.rows(), vx.cols(), vw.rows());
        if self.nodes[x.0].needs_grad {
            // dX = G · W
            let d = matmul(g.data(), vw.data(), m, n, k);
            self.accumulate(adj, x, Tensor::new(vec![m, k], d).expect("shape"));
        }
        if self.nodes[w.0].needs_grad {
            // dW = Gᵀ · X
            let d = matmul_at(g.data(), vx.data(), m, n, k);
            self.accumulate(adj, w, Tensor::new(vec![n, k], d).expect("shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_square_and_power_rule() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        let g = tape.grad_scalar(y).unwrap();
        assert_eq!(g.slot(0).item(), 6.0);

        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.square(w).unwrap();
        assert_eq!(tape.len(), 2);
        assert_eq!(tape.grad_scalar(y).unwrap().slot(0).item(), 6.0);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(w).unwrap();
        assert_eq!(tape.grad_scalar(y).unwrap().slot(0).item(), 1.0);
    }

    #[test]
    fn mean_of_linear_map() {
        // f(W) = mean(W x), x = (1, 2), W 1×2
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.linear(x, w).unwrap();
        let f = tape.mean(y).unwrap();
        let g = tape.grad_scalar(f).unwrap();
        assert_eq!(g.slot(0).data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_tanh_zero_weights() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[3, 2]));
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, -4.0]).unwrap());
        let z = tape.linear(x, w).unwrap();
        let h = tape.tanh(z).unwrap();
        let y = tape.sum(h).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        match tape.add(a, b) {
            Err(NumError::Shape { index, op, .. }) => {
                assert_eq!(index, 2);
                assert_eq!(op, "add");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_forward_aborts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(-1.0));
        assert!(matches!(tape.log(a), Err(NumError::NonFinite { .. })));
        let b = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(b), Err(NumError::NonFinite { .. })));
    }

    #[test]
    fn seed_shape_checked() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        let s = tape.square(a).unwrap();
        assert!(matches!(
            tape.grad(s, &Tensor::zeros(&[4])),
            Err(NumError::SeedShape { .. })
        ));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![0.1, -0.4, 0.7, 1.3]).unwrap());
        let b = tape.param(Tensor::vector(vec![0.2, -0.1]));
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -0.5, 0.3, 4.0, -2.0]).unwrap());
        let z = tape.affine(x, w, b).unwrap();
        let h = tape.softplus(z).unwrap();
        let y = tape.mean(h).unwrap();
        let again = tape.replay(&tape.leaf_values()).unwrap();
        assert_eq!(
            tape.value(y).data()[0].to_bits(),
            again.value(y).data()[0].to_bits()
        );
        assert_eq!(
            tape.grad_scalar(y).unwrap(),
            again.grad_scalar(y).unwrap()
        );
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let _unused = tape.param(Tensor::zeros(&[2]));
        let y = tape.exp(a).unwrap();
        let g = tape.grad_scalar(y).unwrap();
        assert_eq!(g.slot(1).data(), &[0.0, 0.0]);
        assert!((g.slot(0).item() - 2f64.exp()).abs() < 1e-15);
    }
}
