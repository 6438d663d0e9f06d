use super::tensor::{matmul_into, transpose_data, Tensor};
use crate::error::{Error, Result};

/// Floor applied to `log` arguments in `[0, LOG_FLOOR)`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Norm below which row normalization refuses to divide.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Handle to a node of one [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds accepted by [`Graph::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    AddRow,
    Scale(f64),
    /// Multiplies a tensor by a scalar node.
    MulScalar,
    Exp,
    Log,
    Tanh,
    Sum,
    Mean,
    RowSoftmax,
    LogSoftmaxRows,
    L2NormalizeRows,
    Square,
    Negate,
    SelectDiag,
    ConcatRows,
    StopGradient,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    RowSoftmax(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    Square(Var),
    Negate(Var),
    SelectDiag(Var),
    ConcatRows(Vec<Var>),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation graph for one forward pass.
///
/// Nodes are appended in creation order, so every parent precedes its
/// children and the reverse sweep in [`Graph::backward`] is a plain
/// descending walk. A graph is built and consumed on one thread; the
/// value tensors it produces are ordinary owned data.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` does not
    /// reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape tracks value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn is_reachable(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Scalar value of a rank-0 node.
    pub fn item(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node holding `tensor`'s values. The gradient slot is dropped.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.detached(), Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.detached();
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    /// Dispatches a primitive by kind. Arity is checked against `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "{kind:?} takes {n} input(s), got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddRow
            | OpKind::MulScalar => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    OpKind::MatMul => self.matmul(a, b),
                    OpKind::Add => self.add(a, b),
                    OpKind::Sub => self.sub(a, b),
                    OpKind::Mul => self.mul(a, b),
                    OpKind::AddRow => self.add_row(a, b),
                    _ => self.mul_scalar(a, b),
                }
            }
            _ => {
                arity(1)?;
                let a = inputs[0];
                match kind {
                    OpKind::Transpose => self.transpose(a),
                    OpKind::Scale(c) => Ok(self.scale(a, c)),
                    OpKind::Exp => Ok(self.exp(a)),
                    OpKind::Log => self.log(a),
                    OpKind::Tanh => Ok(self.tanh(a)),
                    OpKind::Sum => Ok(self.sum(a)),
                    OpKind::Mean => self.mean(a),
                    OpKind::RowSoftmax => self.row_softmax(a),
                    OpKind::LogSoftmaxRows => self.log_softmax_rows(a),
                    OpKind::L2NormalizeRows => self.l2_normalize_rows(a),
                    OpKind::Square => Ok(self.square(a)),
                    OpKind::Negate => Ok(self.negate(a)),
                    OpKind::SelectDiag => self.select_diag(a),
                    OpKind::StopGradient => Ok(self.stop_gradient(a)),
                    _ => unreachable!("binary and variadic kinds handled above"),
                }
            }
        }
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a matrix, got {}", shape_str(t)),
            ));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(ta), shape_str(tb)),
            ));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// `a · bᵀ`, the similarity matrix between two row sets.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        let tb = self.value(bias);
        if tb.rank() != 1 || tb.len() != n {
            return Err(Error::shape(
                "add_row",
                format!("{} + {}", shape_str(self.value(a)), shape_str(tb)),
            ));
        }
        let b = tb.data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.len() != 1 {
            return Err(Error::shape(
                "mul_scalar",
                format!(
                    "{} by non-scalar {}",
                    shape_str(self.value(a)),
                    shape_str(ts)
                ),
            ));
        }
        let c = ts.item();
        Ok(self.map(a, Op::MulScalar(a, s), |x| c * x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log with arguments in `[0, LOG_FLOOR)` raised to the floor.
    /// Negative or NaN inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((i, &x)) = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .find(|(_, x)| !(**x >= 0.0))
        {
            return Err(Error::domain("log", format!("argument {x} at index {i}")));
        }
        Ok(self.map(a, Op::Log(a), |x| x.max(LOG_FLOOR).ln()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn negate(&mut self, a: Var) -> Var {
        self.map(a, Op::Negate(a), |x| -x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("row_softmax", a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::RowSoftmax(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("log_softmax_rows", a)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::LogSoftmaxRows(a)))
    }

    /// Scales every row to unit L2 norm. Rows with norm below
    /// [`MIN_ROW_NORM`] are rejected rather than divided.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("l2_normalize_rows", a)?;
        let mut data = self.value(a).data().to_vec();
        for (row_idx, row) in data.chunks_mut(n.max(1)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= MIN_ROW_NORM) {
                return Err(Error::DegenerateEmbedding { row: row_idx, norm });
            }
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::L2NormalizeRows(a)))
    }

    pub fn select_diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("select_diag", a)?;
        if m != n {
            return Err(Error::shape(
                "select_diag",
                format!("non-square [{m}, {n}]"),
            ));
        }
        let t = self.value(a);
        let data = (0..m).map(|i| t.get(i, i)).collect();
        Ok(self.push(Tensor::vector(data), Op::SelectDiag(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let (_, n) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = self.matrix_dims("concat_rows", p)?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {c} vs {n}"),
                ));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Identity on values; blocks gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).detached();
        self.push(value, Op::StopGradient)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.rank() != 0 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let bt = transpose_data(tb.data(), k, n);
                let mut da = vec![0.0; m * k];
                matmul_into(g, &bt, &mut da, m, n, k);
                accumulate(grads, *a, da);
                let at = transpose_data(ta.data(), m, k);
                let mut db = vec![0.0; k * n];
                matmul_into(&at, g, &mut db, k, m, n);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                accumulate(grads, *a, transpose_data(g, r, c));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::AddRow(a, bias) => {
                let n = self.value(*bias).len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *bias, db);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.iter().map(|x| c * x).collect()),
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                let va = self.value(*a).data();
                let ds: f64 = g.iter().zip(va).map(|(g, x)| g * x).sum();
                accumulate(grads, *a, g.iter().map(|x| c * x).collect());
                accumulate(grads, *s, vec![ds]);
            }
            Op::Exp(a) => accumulate(grads, *a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let va = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(va)
                    .map(|(g, &x)| if x < LOG_FLOOR { 0.0 } else { g / x })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => accumulate(
                grads,
                *a,
                g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Square(a) => {
                let va = self.value(*a).data();
                accumulate(
                    grads,
                    *a,
                    g.iter().zip(va).map(|(g, x)| 2.0 * g * x).collect(),
                );
            }
            Op::Negate(a) => accumulate(grads, *a, g.iter().map(|x| -x).collect()),
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::RowSoftmax(a) => {
                let n = node.value.cols().max(1);
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - inner)));
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.cols().max(1);
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| g - y.exp() * total));
                }
                accumulate(grads, *a, d);
            }
            Op::L2NormalizeRows(a) => {
                let n = node.value.cols().max(1);
                let xa = self.value(*a).data();
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), xr) in y.chunks(n).zip(g.chunks(n)).zip(xa.chunks(n)) {
                    let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let proj: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * proj) / norm));
                }
                accumulate(grads, *a, d);
            }
            Op::SelectDiag(a) => {
                let n = g.len();
                let mut d = vec![0.0; n * n];
                for (i, gi) in g.iter().enumerate() {
                    d[i * n + i] = *gi;
                }
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    accumulate(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
