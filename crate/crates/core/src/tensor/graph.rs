use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Matrix};

use super::kernels::{axis_strides, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc};
use super::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Neg,
    Sqrt,
    Relu,
    Tanh,
    Abs,
    Square,
    /// `ln(1 + eˣ)`, evaluated without overflow.
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Binary(Binary, Broadcast, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Shift(Var),
    Reduce {
        kind: Reduce,
        input: Var,
        axis: Option<usize>,
        // flat source index of the selected maximum for each output element
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    RepeatRows(Var),
    RepeatCols(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Diag(Var),
    SoftmaxRows(Var),
    LogDetSpd(Var, Vec<f64>),
    ColNorms(Var),
    BlockMatMul { a: Var, b: Var, blocks: usize, transpose_b: bool },
    BlockLogDetSpd(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of primitive operations in creation order.
///
/// Parents always precede children, so insertion order is a topological
/// order and the record is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    check_finite: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flags any non-finite intermediate as a numeric error.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push_raw(t, Op::Leaf, true)
    }

    /// Adds a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.clear_grad();
        self.push_raw(t, Op::Constant, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<Var> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if a backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "{op:?} produced non-finite value {} at index {pos}",
                    data[pos]
                )));
            }
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(Tensor::from_parts_unchecked(shape, data), op, requires_grad))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a)?;
        let (q2, r) = self.dims2(b)?;
        if q != q2 {
            return Err(Error::Dimension(format!("matmul of {p}x{q} by {q2}x{r}")));
        }
        let mut out = vec![0.0; p * r];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        self.push(vec![p, r], out, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Broadcast::Same
        } else if tb.is_scalar() {
            Broadcast::RightScalar
        } else if ta.is_scalar() {
            Broadcast::LeftScalar
        } else {
            return Err(Error::Dimension(format!(
                "{kind:?} of shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let shape = match bc {
            Broadcast::LeftScalar => tb.shape().to_vec(),
            _ => ta.shape().to_vec(),
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| if bc == Broadcast::LeftScalar { da[0] } else { da[i] };
        let bt = |i: usize| if bc == Broadcast::RightScalar { db[0] } else { db[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (at(i), bt(i));
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => {
                    if y == 0.0 {
                        return Err(Error::Domain(format!("division by zero at index {i}")));
                    }
                    x / y
                }
            });
        }
        self.push(shape, out, Op::Binary(kind, bc, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.len());
        for (i, &x) in t.data().iter().enumerate() {
            out.push(match kind {
                Unary::Exp => x.exp(),
                Unary::Log => {
                    if x <= 0.0 {
                        return Err(Error::Domain(format!("log of {x} at index {i}")));
                    }
                    x.ln()
                }
                Unary::Neg => -x,
                Unary::Sqrt => {
                    if x <= 0.0 {
                        return Err(Error::Domain(format!("sqrt of {x} at index {i}")));
                    }
                    x.sqrt()
                }
                Unary::Relu => x.max(0.0),
                Unary::Tanh => x.tanh(),
                Unary::Abs => x.abs(),
                Unary::Square => x * x,
                Unary::Softplus => softplus(x),
            });
        }
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Unary(kind, a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    /// `c · a` for a fixed real `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Scale(a, c), &[a])
    }

    /// `a + c` for a fixed real `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, Op::Shift(a), &[a])
    }

    fn reduce(&mut self, kind: Reduce, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let (shape, outer, len, inner) = match axis {
            None => (Vec::new(), 1, t.len(), 1),
            Some(ax) => {
                if ax >= t.rank() {
                    return Err(Error::Dimension(format!(
                        "axis {ax} out of range for rank {}",
                        t.rank()
                    )));
                }
                let (o, l, i) = axis_strides(t.shape(), ax);
                let mut s = t.shape().to_vec();
                s.remove(ax);
                (s, o, l, i)
            }
        };
        if len == 0 {
            return Err(Error::Domain(format!("{kind:?} over an empty axis")));
        }
        let data = t.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let s: f64 = (0..len).map(|k| data[idx(k)]).sum();
                        out.push(if kind == Reduce::Mean { s / len as f64 } else { s });
                    }
                    Reduce::Max => {
                        // first maximiser wins ties
                        let mut best = idx(0);
                        for k in 1..len {
                            if data[idx(k)] > data[best] {
                                best = idx(k);
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        self.push(shape, out, Op::Reduce { kind, input: a, axis, argmax }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Mean, a, axis)
    }

    /// Maximum; the gradient is routed to the first maximiser.
    pub fn max(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(Reduce::Max, a, axis)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                t.shape()
            )));
        }
        let data = t.data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a), &[a])
    }

    /// Tiles a row vector (`[n]` or `[1, n]`) into `count × n`.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let t = self.value(a);
        let n = match t.shape() {
            [n] | [1, n] => *n,
            s => return Err(Error::Dimension(format!("repeat_rows of shape {s:?}"))),
        };
        let mut out = Vec::with_capacity(count * n);
        for _ in 0..count {
            out.extend_from_slice(t.data());
        }
        self.push(vec![count, n], out, Op::RepeatRows(a), &[a])
    }

    /// Tiles a column vector (`[n]` or `[n, 1]`) into `n × count`.
    pub fn repeat_cols(&mut self, a: Var, count: usize) -> Result<Var> {
        let t = self.value(a);
        let n = match t.shape() {
            [n] | [n, 1] => *n,
            s => return Err(Error::Dimension(format!("repeat_cols of shape {s:?}"))),
        };
        let mut out = Vec::with_capacity(count * n);
        for &v in t.data() {
            out.extend(std::iter::repeat_n(v, count));
        }
        self.push(vec![n, count], out, Op::RepeatCols(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, p) = self.dims2(a)?;
        let (r2, q) = self.dims2(b)?;
        if r != r2 {
            return Err(Error::Dimension(format!("concat_cols of {r} and {r2} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        self.push(vec![r, p + q], out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        };
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2(p)?;
            if c2 != c {
                return Err(Error::Dimension(format!("concat_rows of {c} and {c2} columns")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start > end || end > r {
            return Err(Error::Dimension(format!("rows {start}..{end} of {r}")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        self.push(vec![end - start, c], out, Op::SliceRows(a, start), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start > end || end > c {
            return Err(Error::Dimension(format!("columns {start}..{end} of {c}")));
        }
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        self.push(vec![r, end - start], out, Op::SliceCols(a, start), &[a])
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if r != c {
            return Err(Error::Dimension(format!("diag of {r}x{c}")));
        }
        let d = self.value(a).data();
        let out = (0..r).map(|i| d[i * c + i]).collect();
        self.push(vec![r], out, Op::Diag(a), &[a])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if c == 0 {
            return Err(Error::Domain("softmax over an empty row".into()));
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        self.push(vec![r, c], out, Op::SoftmaxRows(a), &[a])
    }

    /// `log det A` of a symmetric positive-definite matrix.
    pub fn log_det_spd(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let m = Matrix::new(r, c, self.value(a).data().to_vec())?;
        let chol = Cholesky::new(&m)?;
        let inv = chol.inverse().into_data();
        self.push(Vec::new(), vec![chol.log_det()], Op::LogDetSpd(a, inv), &[a])
    }

    /// Euclidean norm of every column; the subgradient at a zero column is 0.
    pub fn col_norms(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j] * d[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        self.push(vec![c], out, Op::ColNorms(a), &[a])
    }

    /// Per-block product of two row-stacked batches.
    ///
    /// `a` stacks `blocks` matrices `A_b` of equal height and `b` stacks
    /// `blocks` matrices `B_b`; the result stacks `A_b·B_b`, or `A_b·B_bᵀ`
    /// when `transpose_b` is set.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize, transpose_b: bool) -> Result<Var> {
        let (ra, ca) = self.dims2(a)?;
        let (rb, cb) = self.dims2(b)?;
        if blocks == 0 || ra % blocks != 0 || rb % blocks != 0 {
            return Err(Error::Dimension(format!(
                "cannot split {ra}x{ca} and {rb}x{cb} into {blocks} blocks"
            )));
        }
        let (p, s) = (ra / blocks, rb / blocks);
        let (q, r) = if transpose_b { (cb, s) } else { (s, cb) };
        if ca != q {
            return Err(Error::Dimension(format!(
                "block product of {p}x{ca} by {}{s}x{cb}",
                if transpose_b { "transposed " } else { "" }
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; blocks * p * r];
        for k in 0..blocks {
            let ak = &da[k * p * q..(k + 1) * p * q];
            let bk = &db[k * s * cb..(k + 1) * s * cb];
            let ok = &mut out[k * p * r..(k + 1) * p * r];
            if transpose_b {
                for i in 0..p {
                    for j in 0..r {
                        ok[i * r + j] =
                            ak[i * q..(i + 1) * q].iter().zip(&bk[j * q..(j + 1) * q]).map(|(x, y)| x * y).sum();
                    }
                }
            } else {
                matmul_acc(ak, bk, ok, p, q, r);
            }
        }
        self.push(vec![blocks * p, r], out, Op::BlockMatMul { a, b, blocks, transpose_b }, &[a, b])
    }

    /// `log det` of every square block of a row-stacked batch of symmetric
    /// positive-definite matrices, as a vector of length `rows / cols`.
    pub fn block_log_det_spd(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if c == 0 || r % c != 0 {
            return Err(Error::Dimension(format!("{r}x{c} is not a stack of square blocks")));
        }
        let blocks = r / c;
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(blocks);
        let mut inv = Vec::with_capacity(r * c);
        for k in 0..blocks {
            let m = Matrix::new(c, c, d[k * c * c..(k + 1) * c * c].to_vec())?;
            let chol = Cholesky::new(&m).map_err(|e| match e {
                Error::Definiteness(msg) => Error::Definiteness(format!("block {k}: {msg}")),
                other => other,
            })?;
            out.push(chol.log_det());
            inv.extend(chol.inverse().into_data());
        }
        self.push(vec![blocks], out, Op::BlockLogDetSpd(a, inv), &[a])
    }

    /// Copies a value into the graph as a constant, cutting gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    /// Reverse pass from a scalar loss, accumulating into leaf gradients.
    ///
    /// Every leaf recorded before `loss` ends up with a gradient buffer, zero
    /// if the loss does not depend on it. Calling this twice without
    /// [`Graph::zero_grad`] adds the second pass onto the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", lt.item())));
        }
        let Graph { nodes, leaf_grads, .. } = self;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                let slot = leaf_grads[id].get_or_insert_with(|| vec![0.0; node.value.len()]);
                if let Some(g) = adj[id].take() {
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            propagate(nodes, &mut adj, id, &g);
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adjoint buffer for `v`, or `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node], adj: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (p, q) = nodes[a.0].value.dims2().expect("matmul operand");
            let r = nodes[b.0].value.shape()[1];
            if let Some(da) = slot(nodes, adj, *a) {
                matmul_a_bt_acc(g, nodes[b.0].value.data(), da, p, r, q);
            }
            if let Some(db) = slot(nodes, adj, *b) {
                matmul_at_b_acc(nodes[a.0].value.data(), g, db, p, q, r);
            }
        }
        Op::Binary(kind, bc, a, b) => {
            let xa = nodes[a.0].value.data();
            let xb = nodes[b.0].value.data();
            let av = |i: usize| if *bc == Broadcast::LeftScalar { xa[0] } else { xa[i] };
            let bv = |i: usize| if *bc == Broadcast::RightScalar { xb[0] } else { xb[i] };
            let left_scalar = *bc == Broadcast::LeftScalar;
            let right_scalar = *bc == Broadcast::RightScalar;
            if let Some(da) = slot(nodes, adj, *a) {
                for i in 0..g.len() {
                    let d = match kind {
                        Binary::Add | Binary::Sub => g[i],
                        Binary::Mul => g[i] * bv(i),
                        Binary::Div => g[i] / bv(i),
                    };
                    da[if left_scalar { 0 } else { i }] += d;
                }
            }
            if let Some(db) = slot(nodes, adj, *b) {
                for i in 0..g.len() {
                    let d = match kind {
                        Binary::Add => g[i],
                        Binary::Sub => -g[i],
                        Binary::Mul => g[i] * av(i),
                        Binary::Div => -g[i] * out[i] / bv(i),
                    };
                    db[if right_scalar { 0 } else { i }] += d;
                }
            }
        }
        Op::Unary(kind, a) => {
            let x = nodes[a.0].value.data();
            if let Some(da) = slot(nodes, adj, *a) {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Exp => out[i],
                        Unary::Log => 1.0 / x[i],
                        Unary::Neg => -1.0,
                        Unary::Sqrt => 0.5 / out[i],
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Tanh => 1.0 - out[i] * out[i],
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * x[i],
                        Unary::Softplus => sigmoid(x[i]),
                    };
                    da[i] += g[i] * d;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, adj, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
        }
        Op::Shift(a) | Op::Reshape(a) => {
            if let Some(da) = slot(nodes, adj, *a) {
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::Reduce { kind, input, axis, argmax } => {
            let shape = nodes[input.0].value.shape().to_vec();
            if let Some(da) = slot(nodes, adj, *input) {
                let (outer, len, inner) = match axis {
                    None => (1, da.len(), 1),
                    Some(ax) => axis_strides(&shape, *ax),
                };
                match kind {
                    Reduce::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            da[src] += g[o];
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let w = if *kind == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i] * w;
                                for k in 0..len {
                                    da[(o * len + k) * inner + i] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[a.0].value.dims2().expect("transpose operand");
            if let Some(da) = slot(nodes, adj, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::RepeatRows(a) => {
            let n = nodes[a.0].value.len();
            if let Some(da) = slot(nodes, adj, *a) {
                for row in g.chunks(n) {
                    da.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::RepeatCols(a) => {
            let n = nodes[a.0].value.len();
            let count = g.len() / n.max(1);
            if let Some(da) = slot(nodes, adj, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    *d += g[i * count..(i + 1) * count].iter().sum::<f64>();
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (r, p) = nodes[a.0].value.dims2().expect("concat operand");
            let q = nodes[b.0].value.shape()[1];
            if let Some(da) = slot(nodes, adj, *a) {
                for i in 0..r {
                    for j in 0..p {
                        da[i * p + j] += g[i * (p + q) + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, adj, *b) {
                for i in 0..r {
                    for j in 0..q {
                        db[i * q + j] += g[i * (p + q) + p + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(dp) = slot(nodes, adj, *p) {
                    dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, v)| *d += v);
                }
                offset += n;
            }
        }
        Op::SliceRows(a, start) => {
            let c = nodes[a.0].value.shape()[1];
            if let Some(da) = slot(nodes, adj, *a) {
                da[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
        }
        Op::SliceCols(a, start) => {
            let c = nodes[a.0].value.shape()[1];
            let w = node.value.shape()[1];
            if let Some(da) = slot(nodes, adj, *a) {
                for (i, row) in g.chunks(w.max(1)).enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        da[i * c + start + j] += v;
                    }
                }
            }
        }
        Op::Diag(a) => {
            let n = g.len();
            if let Some(da) = slot(nodes, adj, *a) {
                for i in 0..n {
                    da[i * n + i] += g[i];
                }
            }
        }
        Op::SoftmaxRows(a) => {
            let c = node.value.shape()[1];
            if let Some(da) = slot(nodes, adj, *a) {
                for (i, (grow, yrow)) in g.chunks(c).zip(out.chunks(c)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for j in 0..c {
                        da[i * c + j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LogDetSpd(a, inv) => {
            if let Some(da) = slot(nodes, adj, *a) {
                da.iter_mut().zip(inv).for_each(|(d, v)| *d += g[0] * v);
            }
        }
        Op::BlockMatMul { a, b, blocks, transpose_b } => {
            let (ra, q) = nodes[a.0].value.dims2().expect("block operand");
            let (rb, cb) = nodes[b.0].value.dims2().expect("block operand");
            let (p, s) = (ra / blocks, rb / blocks);
            let r = node.value.shape()[1];
            let xa = nodes[a.0].value.data();
            let xb = nodes[b.0].value.data();
            if let Some(da) = slot(nodes, adj, *a) {
                for k in 0..*blocks {
                    let gk = &g[k * p * r..(k + 1) * p * r];
                    let bk = &xb[k * s * cb..(k + 1) * s * cb];
                    let dk = &mut da[k * p * q..(k + 1) * p * q];
                    if *transpose_b {
                        // dA = G·B
                        matmul_acc(gk, bk, dk, p, r, q);
                    } else {
                        matmul_a_bt_acc(gk, bk, dk, p, r, q);
                    }
                }
            }
            if let Some(db) = slot(nodes, adj, *b) {
                for k in 0..*blocks {
                    let gk = &g[k * p * r..(k + 1) * p * r];
                    let ak = &xa[k * p * q..(k + 1) * p * q];
                    let dk = &mut db[k * s * cb..(k + 1) * s * cb];
                    if *transpose_b {
                        // dB = Gᵀ·A
                        matmul_at_b_acc(gk, ak, dk, p, r, q);
                    } else {
                        matmul_at_b_acc(ak, gk, dk, p, q, r);
                    }
                }
            }
        }
        Op::BlockLogDetSpd(a, inv) => {
            let c = nodes[a.0].value.shape()[1];
            if let Some(da) = slot(nodes, adj, *a) {
                for (i, (d, v)) in da.iter_mut().zip(inv).enumerate() {
                    *d += g[i / (c * c)] * v;
                }
            }
        }
        Op::ColNorms(a) => {
            let x = nodes[a.0].value.data();
            let c = out.len();
            if let Some(da) = slot(nodes, adj, *a) {
                for (i, d) in da.iter_mut().enumerate() {
                    let j = i % c;
                    if out[j] > 0.0 {
                        *d += g[j] * x[i] / out[j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let c = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 0.0]]).unwrap());
        let n = g.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let c = g.matmul(p, n).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 1.0]).unwrap());
        let e = g.exp(x).unwrap();
        assert!(close(g.value(e).data(), &[1.0, std::f64::consts::E], 1e-15));

        let x = g.constant(Tensor::vector(&[0.5, 2.0]).unwrap());
        let e = g.exp(x).unwrap();
        let l = g.log(e).unwrap();
        assert!(close(g.value(l).data(), &[0.5, 2.0], 1e-12));

        let x = g.constant(Tensor::vector(&[-1.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
        assert!(matches!(g.sqrt(x), Err(Error::Domain(_))));
        let one = g.scalar(1.0).unwrap();
        assert!(matches!(g.div(one, x), Err(Error::Domain(_))));
        let y = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(x, y), Err(Error::Dimension(_))));
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x, None).unwrap();
        assert_eq!(g.value(s).item(), 6.0);

        let m = g.constant(Tensor::from_rows(&[&[1.0, 3.0], &[3.0, 5.0]]).unwrap());
        let mean0 = g.mean(m, Some(0)).unwrap();
        assert_eq!(g.value(mean0).data(), &[2.0, 4.0]);
        assert!(matches!(g.sum(m, Some(2)), Err(Error::Dimension(_))));

        let empty = g.constant(Tensor::zeros(&[0]));
        assert!(matches!(g.sum(empty, Some(0)), Err(Error::Domain(_))));
    }

    #[test]
    fn max_routes_gradient_to_first_maximiser() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[2.0, 2.0, 1.0]).unwrap());
        let m = g.max(x, None).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient_and_accumulation() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).unwrap());
        let c = g.scalar(3.0).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_checks_flag_overflow() {
        let mut g = Graph::new().with_finite_checks(true);
        let x = g.constant(Tensor::vector(&[1000.0]).unwrap());
        assert!(matches!(g.exp(x), Err(Error::Numeric(_))));
        assert!(Tensor::vector(&[f64::NAN]).is_err());
    }

    #[test]
    fn col_norms_zero_column_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[&[3.0, 0.0], &[4.0, 0.0]]).unwrap());
        let n = g.col_norms(x).unwrap();
        assert_eq!(g.value(n).data(), &[5.0, 0.0]);
        let s = g.sum(n, None).unwrap();
        g.backward(s).unwrap();
        assert!(close(g.grad(x).unwrap(), &[0.6, 0.0, 0.8, 0.0], 1e-15));
    }

    #[test]
    fn detach_stops_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p, None).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn block_ops_match_per_block_oracle_and_gradients() {
        use crate::rng::Rng;
        use crate::tensor::gradcheck;
        let mut rng = Rng::new(5);
        let mut rand = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).unwrap()
        };
        let (a, b, v) = (rand(6, 4), rand(6, 4), rand(6, 2));
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.block_matmul(va, vb, 2, true).unwrap();
        assert_eq!(g.shape(c), &[6, 3]);
        for k in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want: f64 = (0..4).map(|t| a.at2(3 * k + i, t) * b.at2(3 * k + j, t)).sum();
                    assert!((g.value(c).at2(3 * k + i, j) - want).abs() < 1e-12);
                }
            }
        }
        let r = gradcheck(
            |g, x| {
                let c = g.block_matmul(x[0], x[1], 2, true)?;
                let d = g.block_matmul(c, x[2], 2, false)?;
                let s = g.square(d)?;
                g.sum(s, None)
            },
            &[a, b, v],
            1e-5,
            1e-2,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");

        let spd = Tensor::matrix(4, 2, vec![2.0, 1.0, 1.0, 2.0, 3.0, 0.5, 0.5, 1.0]).unwrap();
        let mut g = Graph::new();
        let s = g.constant(spd.clone());
        let ld = g.block_log_det_spd(s).unwrap();
        assert!((g.value(ld).data()[0] - 3f64.ln()).abs() < 1e-12);
        assert!((g.value(ld).data()[1] - 2.75f64.ln()).abs() < 1e-12);
        let eye = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = gradcheck(
            |g, x| {
                let gram = g.block_matmul(x[0], x[0], 2, true)?;
                let id = g.constant(eye.clone());
                let pd = g.add(gram, id)?;
                let ld = g.block_log_det_spd(pd)?;
                let w = g.constant(Tensor::vector(&[1.0, -0.5])?);
                let p = g.mul(ld, w)?;
                g.sum(p, None)
            },
            &[spd],
            1e-6,
            1e-2,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
