use super::kernels::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{as_matrix, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
///
/// `backward` returns one optional gradient per input, shaped like that
/// input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Powf(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic tape recorded during one forward pass.
///
/// Nodes are appended in execution order, so the node list is always
/// topologically sorted. A graph can be differentiated once.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    differentiated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last differentiated loss with respect to `v`.
    /// `None` before backward, or when `v` does not require grad or was
    /// not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.zip_map(a, b, f);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.value(a), "matmul")?;
        let (k2, n) = as_matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.value(x), "transpose")?;
        let out = transpose_data(self.value(x).data(), m, n);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(x), rg))
    }

    // ---- element-wise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if x >= y { x } else { y }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `x + c` for a scalar constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    /// Adds vector `v` (length = last axis of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_op("add_row", x, v, |a, b| a + b)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::AddRow(x, v), rg))
    }

    /// Multiplies every row of `x` element-wise by vector `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.row_op("mul_row", x, v, |a, b| a * b)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(out, Op::MulRow(x, v), rg))
    }

    fn row_op(&self, op: &'static str, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        if tv.shape().len() != 1 || tv.len() != tx.cols() {
            return Err(TensorError::Shape {
                op,
                lhs: tx.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, tv.data()[i % c]))
            .collect();
        Ok(Tensor {
            shape: tx.shape().to_vec(),
            data,
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    // ---- row-wise reductions over the last axis ----

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Zero-mean, unit-variance normalization of each row (biased variance).
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        let out = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Normalize(x, inv_std), rg)
    }

    /// Layer normalization: per-row standardization with `eps`, then
    /// `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let n = self.normalize(x, eps);
        let s = self.mul_row(n, gain)?;
        self.add_row(s, bias)
    }

    // ---- structural ----

    /// Concatenates along the last axis. Leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len().saturating_sub(1)];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len().saturating_sub(1)] != lead {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += self.value(p).cols();
        }
        let rows = self.value(parts[0]).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data }, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = 0;
        let mut cols = None;
        for &p in parts {
            let (r, c) = as_matrix(self.value(p), "concat_rows")?;
            if *cols.get_or_insert(c) != c {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let cols = cols.ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if start >= end || end > c {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} out of bounds for last axis {c}"),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceCols(x, start), rg))
    }

    /// Gathers rows of a matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, c) = as_matrix(self.value(x), "select_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("indices {idx:?} invalid for {m} rows"),
            });
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&[idx.len(), c], data)?,
            Op::SelectRows(x, idx.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&vals)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), rg))
    }

    // ---- reverse pass ----

    /// Accumulates d`loss`/d`v` into every reachable node that requires
    /// grad. May run only once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.differentiated {
            return Err(TensorError::AlreadyDifferentiated);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let seed = Tensor::ones(lt.shape());
        self.differentiated = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (v, dv) in self.input_grads(i, &g) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor {
            shape: self.shape(v).to_vec(),
            data,
        };
        let ew = |v: Var, f: &dyn Fn(usize, f64) -> f64| -> (Var, Tensor) {
            let data = gd.iter().enumerate().map(|(j, &gv)| f(j, gv)).collect();
            (v, like(v, data))
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let mut out = Vec::new();
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(gd, self.value(*b).data(), &mut da, m, n, k);
                    out.push((*a, like(*a, da)));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(self.value(*a).data(), gd, &mut db, m, k, n);
                    out.push((*b, like(*b, db)));
                }
                out
            }
            Op::Transpose(x) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                vec![(*x, like(*x, transpose_data(gd, m, n)))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), ew(*b, &|_, gv| -gv)],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![ew(*a, &|j, gv| gv * bv[j]), ew(*b, &|j, gv| gv * av[j])]
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    ew(*a, &|j, gv| gv / bv[j]),
                    ew(*b, &|j, gv| -gv * av[j] / (bv[j] * bv[j])),
                ]
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    ew(*a, &|j, gv| if av[j] <= bv[j] { gv } else { 0.0 }),
                    ew(*b, &|j, gv| if av[j] <= bv[j] { 0.0 } else { gv }),
                ]
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    ew(*a, &|j, gv| if av[j] >= bv[j] { gv } else { 0.0 }),
                    ew(*b, &|j, gv| if av[j] >= bv[j] { 0.0 } else { gv }),
                ]
            }
            Op::Scale(x, c) => vec![ew(*x, &|_, gv| gv * c)],
            Op::Offset(x) => vec![(*x, g.clone())],
            Op::AddRow(x, v) => {
                let c = y.cols();
                let mut dv = vec![0.0; c];
                for (j, gv) in gd.iter().enumerate() {
                    dv[j % c] += gv;
                }
                vec![(*x, g.clone()), (*v, like(*v, dv))]
            }
            Op::MulRow(x, v) => {
                let c = y.cols();
                let (xv, vv) = (self.value(*x).data(), self.value(*v).data());
                let mut dv = vec![0.0; c];
                for (j, gv) in gd.iter().enumerate() {
                    dv[j % c] += gv * xv[j];
                }
                vec![ew(*x, &|j, gv| gv * vv[j % c]), (*v, like(*v, dv))]
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                vec![ew(*x, &|j, gv| if xv[j] > 0.0 { gv } else { 0.0 })]
            }
            Op::Sigmoid(x) => {
                let yv = y.data();
                vec![ew(*x, &|j, gv| gv * yv[j] * (1.0 - yv[j]))]
            }
            Op::Exp(x) => {
                let yv = y.data();
                vec![ew(*x, &|j, gv| gv * yv[j])]
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                vec![ew(*x, &|j, gv| gv / xv[j])]
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                vec![ew(*x, &|j, gv| gv * sigmoid(xv[j]))]
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                vec![ew(*x, &|j, gv| gv * sign(xv[j]))]
            }
            Op::Powf(x, p) => {
                let xv = self.value(*x).data();
                vec![ew(*x, &|j, gv| gv * p * xv[j].powf(p - 1.0))]
            }
            Op::Softmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (&y.data()[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (&y.data()[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        dx[r * c + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::Normalize(x, inv_std) => {
                let c = y.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (&y.data()[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                    let gm = gr.iter().sum::<f64>() / c as f64;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = inv_std[r] * (gr[j] - gm - yr[j] * gy);
                    }
                }
                vec![(*x, like(*x, dx))]
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut d = Vec::with_capacity(self.value(p).len());
                    for r in 0..y.rows() {
                        d.extend_from_slice(&gd[r * total + off..r * total + off + pc]);
                    }
                    out.push((p, like(p, d)));
                    off += pc;
                }
                out
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = self.value(p).len();
                    out.push((p, like(p, gd[off..off + n].to_vec())));
                    off += n;
                }
                out
            }
            Op::SliceCols(x, start) => {
                let xc = self.value(*x).cols();
                let w = y.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for r in 0..y.rows() {
                    d[r * xc + start..r * xc + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                vec![(*x, like(*x, d))]
            }
            Op::SelectRows(x, idx) => {
                let c = y.cols();
                let mut d = vec![0.0; self.value(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[k * c + j];
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec()))],
            Op::Sum(x) => {
                let n = self.value(*x).len();
                vec![(*x, like(*x, vec![gd[0]; n]))]
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, like(*x, vec![gd[0] / n as f64; n]))]
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                op.backward(&vals, y, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, v)| d.map(|d| (*v, d)))
                    .collect()
            }
        }
    }
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
