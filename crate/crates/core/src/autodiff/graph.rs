use super::kernels::{self, Broadcast};
use super::tensor::Tensor;
use crate::error::{AmnError, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    SumAxis(Var, usize),
    SumAll(Var),
    Softmax(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape.
///
/// Every operation appends a node whose inputs already exist, so node order is
/// a topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AmnError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SumAxis(a, _)
            | Op::SumAll(a)
            | Op::Softmax(a)
            | Op::Slice { input: a, .. } => self.nodes[a.0].requires_grad,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Concat(parts, _) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
        };
        // Nodes outside the differentiable subgraph keep their value only.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let (name, out) = match kind {
            Unary::Sigmoid => ("sigmoid", x.map(kernels::sigmoid)),
            Unary::Tanh => ("tanh", x.map(f64::tanh)),
            Unary::Relu => ("relu", x.map(|v| v.max(0.0))),
            Unary::Exp => ("exp", x.map(f64::exp)),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(AmnError::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                ("log", x.map(f64::ln))
            }
            Unary::Square => ("square", x.map(|v| v * v)),
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                    return Err(AmnError::Domain {
                        op: "sqrt",
                        detail: format!("negative argument {bad}"),
                    });
                }
                ("sqrt", x.map(f64::sqrt))
            }
            Unary::Softplus => ("softplus", x.map(kernels::softplus)),
        };
        self.push(out, Op::Unary(kind, a), name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = kernels::broadcast_shape(xa.shape(), xb.shape())
            .ok_or_else(|| AmnError::shape(name, xa.shape(), xb.shape()))?;
        let ma = Broadcast::new(&shape, xa.shape());
        let mb = Broadcast::new(&shape, xb.shape());
        let (da, db) = (xa.data(), xb.data());
        let n: usize = shape.iter().product();
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = (0..n).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Binary(kind, a, b), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.map(|v| v + c);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = MatmulPlan::new(xa.shape(), xb.shape())?;
        let mut data = vec![0.0; plan.batch * plan.m * plan.n];
        let (da, db) = (xa.data(), xb.data());
        for bi in 0..plan.batch {
            let (oa, ob) = plan.offsets(bi);
            kernels::matmul_acc(
                &da[oa..oa + plan.m * plan.k],
                &db[ob..ob + plan.k * plan.n],
                &mut data[bi * plan.m * plan.n..(bi + 1) * plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        let out = Tensor::new(plan.out_shape.clone(), data)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.rank() < 2 {
            return Err(AmnError::shape("transpose", x.shape(), &[]));
        }
        let out = transpose_last2(x);
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(AmnError::shape("reshape", x.shape(), shape));
        }
        let out = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AmnError::Contract("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(AmnError::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(AmnError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let x = &self.nodes[p.0].value;
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec(), axis), "concat")
    }

    /// `len` entries of `axis` starting at `start`; the axis is kept.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(AmnError::shape("slice", x.shape(), &[axis, start, len]));
        }
        let (outer, alen, inner) = kernels::split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Slice { input: a, axis, start }, "slice")
    }

    // ---- reductions --------------------------------------------------------

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if axis >= x.rank() {
            return Err(AmnError::shape("sum_axis", x.shape(), &[axis]));
        }
        let (outer, alen, inner) = kernels::split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for l in 0..alen {
                let src = &xd[(o * alen + l) * inner..(o * alen + l + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::SumAxis(a, axis), "sum_axis")
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = self.shape(a).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let width = *x
            .shape()
            .last()
            .ok_or_else(|| AmnError::shape("softmax", x.shape(), &[]))?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(a), "softmax")
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of the scalar `loss` for every node that requires one.
    ///
    /// Gradients from earlier calls are discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AmnError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AmnError::NonFinite {
                        op: op_name(&self.nodes[i].op),
                    });
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out so input gradients can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Unary(kind, a) => self.back_unary(*kind, *a, i, g),
            Op::Binary(kind, a, b) => self.back_binary(*kind, *a, *b, i, g),
            Op::Scale(a, c) => {
                if let Some(ga) = self.grad_buf(*a) {
                    for (x, gv) in ga.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.grad_buf(*a) {
                    for (x, gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
            }
            Op::MatMul(a, b) => self.back_matmul(*a, *b, g),
            Op::Transpose(a) => {
                let shape = self.nodes[i].value.shape().to_vec();
                let gt = transpose_last2(&Tensor::new(shape, g.to_vec()).expect("grad shape"));
                if let Some(ga) = self.grad_buf(*a) {
                    for (x, gv) in ga.iter_mut().zip(gt.data()) {
                        *x += gv;
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = kernels::split_axis(&shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let plen = self.nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = self.grad_buf(*p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * plen * inner;
                            for (x, gv) in gp[dst..dst + plen * inner]
                                .iter_mut()
                                .zip(&g[src..src + plen * inner])
                            {
                                *x += gv;
                            }
                        }
                    }
                    offset += plen;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.nodes[input.0].value.shape().to_vec();
                let len = self.nodes[i].value.shape()[*axis];
                let (outer, alen, inner) = kernels::split_axis(&in_shape, *axis);
                if let Some(ga) = self.grad_buf(*input) {
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        for (x, gv) in ga[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *x += gv;
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                let in_shape = self.nodes[a.0].value.shape().to_vec();
                let (outer, alen, inner) = kernels::split_axis(&in_shape, *axis);
                if let Some(ga) = self.grad_buf(*a) {
                    for o in 0..outer {
                        for l in 0..alen {
                            let dst = (o * alen + l) * inner;
                            for (x, gv) in ga[dst..dst + inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                            {
                                *x += gv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.grad_buf(*a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data().to_vec();
                let width = *self.nodes[i].value.shape().last().expect("rank >= 1");
                if let Some(ga) = self.grad_buf(*a) {
                    for ((yr, gr), gar) in y
                        .chunks(width)
                        .zip(g.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((x, yv), gv) in gar.iter_mut().zip(yr).zip(gr) {
                            *x += yv * (gv - dot);
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn back_unary(&mut self, kind: Unary, a: Var, i: usize, g: &[f64]) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = self.nodes[a.0].value.data().to_vec();
        let y = self.nodes[i].value.data().to_vec();
        let ga = self.grad_buf(a).expect("requires grad");
        for k in 0..g.len() {
            let d = match kind {
                Unary::Sigmoid => y[k] * (1.0 - y[k]),
                Unary::Tanh => 1.0 - y[k] * y[k],
                Unary::Relu => {
                    if x[k] > 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Unary::Exp => y[k],
                Unary::Log => 1.0 / x[k],
                Unary::Square => 2.0 * x[k],
                Unary::Sqrt => 0.5 / y[k],
                Unary::Softplus => kernels::sigmoid(x[k]),
            };
            ga[k] += g[k] * d;
        }
    }

    fn back_binary(&mut self, kind: Binary, a: Var, b: Var, i: usize, g: &[f64]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let xa = self.nodes[a.0].value.clone();
        let xb = self.nodes[b.0].value.clone();
        let ma = Broadcast::new(&out_shape, xa.shape());
        let mb = Broadcast::new(&out_shape, xb.shape());
        let (da, db) = (xa.data(), xb.data());
        if let Some(ga) = self.grad_buf(a) {
            for (k, gv) in g.iter().enumerate() {
                let (ia, ib) = (ma.at(k), mb.at(k));
                ga[ia] += match kind {
                    Binary::Add | Binary::Sub => *gv,
                    Binary::Mul => gv * db[ib],
                    Binary::Div => gv / db[ib],
                };
            }
        }
        if let Some(gb) = self.grad_buf(b) {
            for (k, gv) in g.iter().enumerate() {
                let (ia, ib) = (ma.at(k), mb.at(k));
                gb[ib] += match kind {
                    Binary::Add => *gv,
                    Binary::Sub => -gv,
                    Binary::Mul => gv * da[ia],
                    Binary::Div => -gv * da[ia] / (db[ib] * db[ib]),
                };
            }
        }
    }

    fn back_matmul(&mut self, a: Var, b: Var, g: &[f64]) {
        let xa = self.nodes[a.0].value.clone();
        let xb = self.nodes[b.0].value.clone();
        let plan = MatmulPlan::new(xa.shape(), xb.shape()).expect("validated in forward");
        let (m, k, n) = (plan.m, plan.k, plan.n);
        if let Some(ga) = self.grad_buf(a) {
            for bi in 0..plan.batch {
                let (oa, ob) = plan.offsets(bi);
                kernels::matmul_acc_bt(
                    &g[bi * m * n..(bi + 1) * m * n],
                    &xb.data()[ob..ob + k * n],
                    &mut ga[oa..oa + m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        if let Some(gb) = self.grad_buf(b) {
            for bi in 0..plan.batch {
                let (oa, ob) = plan.offsets(bi);
                kernels::matmul_acc_at(
                    &xa.data()[oa..oa + m * k],
                    &g[bi * m * n..(bi + 1) * m * n],
                    &mut gb[ob..ob + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Unary(..) => "unary",
        Op::Binary(..) => "binary",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::SumAxis(..) => "sum_axis",
        Op::SumAll(..) => "sum",
        Op::Softmax(..) => "softmax",
    }
}

fn transpose_last2(x: &Tensor) -> Tensor {
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (rows * cols);
    let mut data = vec![0.0; x.len()];
    let src = x.data();
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                data[off + j * rows + i] = src[off + i * cols + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data).expect("same element count")
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    map_a: Broadcast,
    map_b: Broadcast,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(AmnError::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(AmnError::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_shape =
            kernels::broadcast_shape(ba, bb).ok_or_else(|| AmnError::shape("matmul", sa, sb))?;
        let batch = batch_shape.iter().product();
        let map_a = Broadcast::new(&batch_shape, ba);
        let map_b = Broadcast::new(&batch_shape, bb);
        let mut out_shape = batch_shape;
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            batch,
            map_a,
            map_b,
            out_shape,
        })
    }

    fn offsets(&self, bi: usize) -> (usize, usize) {
        (
            self.map_a.at(bi) * self.m * self.k,
            self.map_b.at(bi) * self.k * self.n,
        )
    }
}
