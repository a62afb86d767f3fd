//! Tape-based reverse-mode differentiation over row-major `f64` matrices.
//!
//! Every value lives on a [`Tape`] as a node; operations append new nodes and
//! return a [`Var`] handle. Since a node can only reference nodes created
//! before it, creation order is a topological order and [`Tape::backward`]
//! simply walks the tape in reverse.
//!
//! Broadcasting is limited to adding a `1×n` row to every row of an `m×n`
//! matrix ([`Tape::add_row`]).

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Default negative slope of [`Elementwise::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// Elementwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
}

/// Reductions to a `1×1` scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Sum,
    /// `log(mean(exp(x)))`, evaluated with a max shift.
    LogMeanExp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Abs(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
}

/// One recorded value.
#[derive(Debug, Clone)]
pub struct DiffNode {
    shape: [usize; 2],
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl DiffNode {
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Accumulated gradient; empty when the node does not require gradients.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LeakyRelu(a, _)
            | Op::Softplus(a)
            | Op::Abs(a)
            | Op::SliceCols(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogMeanExp(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

/// Ordered record of every node created during a forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<DiffNode>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `c (m×n) = alpha · a · b + beta · c`, with explicit strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose lengths cover the strided extents
    // (a: m×k, b: k×n, c: m×n row-major).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    pub fn node(&self, v: Var) -> &DiffNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].shape
    }

    /// First entry of `v`; intended for `1×1` results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: [usize; 2], data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape[0] * shape[1]);
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        let grad = if requires_grad {
            vec![0.0; data.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(DiffNode {
            shape,
            data,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::shape("leaf", &[rows, cols], &[data.len()]));
        }
        let grad = if requires_grad {
            vec![0.0; data.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(DiffNode {
            shape: [rows, cols],
            data,
            grad,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    pub fn constant_matrix(&mut self, m: &crate::matrix::Matrix) -> Var {
        self.nodes.push(DiffNode {
            shape: [m.rows, m.cols],
            data: m.data.clone(),
            grad: Vec::new(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        Ok(self.push([m, n], out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_bt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (1, k), 0.0, &mut out);
        Ok(self.push([m, n], out, Op::MatMulBt(a, b)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<([usize; 2], &[f64], &[f64])> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &sa, &sb));
        }
        Ok((sa, self.value(a), self.value(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, x, y) = self.binary("add", a, b)?;
        let out = x.iter().zip(y).map(|(p, q)| p + q).collect();
        Ok(self.push(s, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, x, y) = self.binary("sub", a, b)?;
        let out = x.iter().zip(y).map(|(p, q)| p - q).collect();
        Ok(self.push(s, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, x, y) = self.binary("mul", a, b)?;
        let out = x.iter().zip(y).map(|(p, q)| p * q).collect();
        Ok(self.push(s, out, Op::Mul(a, b)))
    }

    /// Adds the `1×n` row `row` to every row of `x: m×n`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        let rs = self.shape(row);
        if rs != [1, n] {
            return Err(Error::shape("add_row", &[m, n], &rs));
        }
        let r = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            chunk.iter_mut().zip(r).for_each(|(o, b)| *o += b);
        }
        Ok(self.push([m, n], out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x), out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        self.push(self.shape(x), out, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        self.push(self.shape(x), out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        if let Some((i, v)) = vals.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("entry {i} is {v}, expected > 0"),
            });
        }
        let out = vals.iter().map(|v| v.ln()).collect();
        Ok(self.push(self.shape(x), out, Op::Log(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x), out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x), out, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(self.shape(x), out, Op::LeakyRelu(x, slope))
    }

    /// `ln(1 + eˣ)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| softplus(v)).collect();
        self.push(self.shape(x), out, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.abs()).collect();
        self.push(self.shape(x), out, Op::Abs(x))
    }

    /// Dispatches an [`Elementwise`] kind. Binary kinds take two arguments.
    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(Error::contract(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Exp => Ok(self.exp(args[0])),
            Elementwise::Log => self.log(args[0]),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::LeakyRelu(slope) => Ok(self.leaky_relu(args[0], slope)),
        }
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_cols needs at least one part"));
        };
        let m = self.shape(first)[0];
        let mut n = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != m {
                return Err(Error::shape("concat_cols", &self.shape(first), &s));
            }
            n += s[1];
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push([m, n], out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start > end || end > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, end]));
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + end]);
        }
        Ok(self.push([m, w], out, Op::SliceCols(x, start, end)))
    }

    pub fn reduce(&mut self, kind: Reduce, x: Var) -> Result<Var> {
        let vals = self.value(x);
        if vals.is_empty() {
            return Err(Error::Domain {
                op: "reduce",
                detail: format!("{kind:?} of an empty input"),
            });
        }
        let n = vals.len() as f64;
        let (value, op) = match kind {
            Reduce::Sum => (vals.iter().sum::<f64>(), Op::Sum(x)),
            Reduce::Mean => (vals.iter().sum::<f64>() / n, Op::Mean(x)),
            Reduce::LogMeanExp => (log_mean_exp(vals), Op::LogMeanExp(x)),
        };
        Ok(self.push([1, 1], vec![value], op))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, x)
    }

    pub fn log_mean_exp(&mut self, x: Var) -> Result<Var> {
        self.reduce(Reduce::LogMeanExp, x)
    }

    /// Accumulates `d loss / d node` into the gradient of every node that
    /// requires gradients. Calling it twice without [`Tape::zero_grad`]
    /// doubles the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let count = loss.0 + 1;
        let mut adj: Vec<Vec<f64>> = self.nodes[..count]
            .iter()
            .map(|n| {
                if n.requires_grad {
                    vec![0.0; n.data.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        adj[loss.0][0] = 1.0;

        for i in (0..count).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = adj.split_at_mut(i);
            let g = &rest[0];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            self.propagate(i, g, before);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if node.requires_grad {
                node.grad.iter_mut().zip(a).for_each(|(g, d)| *g += d);
            }
        }
        Ok(())
    }

    /// Pushes the adjoint `g` of node `i` into the adjoints of its parents.
    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let out = &node.data;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                if wants(a) {
                    // dA += G · Bᵀ
                    gemm(m, n, k, g, (n, 1), self.value(*b), (1, n), 1.0, &mut adj[a.0]);
                }
                if wants(b) {
                    // dB += Aᵀ · G
                    gemm(k, m, n, self.value(*a), (1, k), g, (n, 1), 1.0, &mut adj[b.0]);
                }
            }
            Op::MatMulBt(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[0];
                if wants(a) {
                    // dA += G · B
                    gemm(m, n, k, g, (n, 1), self.value(*b), (k, 1), 1.0, &mut adj[a.0]);
                }
                if wants(b) {
                    // dB += Gᵀ · A
                    gemm(n, m, k, g, (1, n), self.value(*a), (k, 1), 1.0, &mut adj[b.0]);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    axpy(&mut adj[a.0], g, 1.0);
                }
                if wants(b) {
                    axpy(&mut adj[b.0], g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    axpy(&mut adj[a.0], g, 1.0);
                }
                if wants(b) {
                    axpy(&mut adj[b.0], g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let y = self.value(*b);
                    for ((d, gi), yi) in adj[a.0].iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                }
                if wants(b) {
                    let x = self.value(*a);
                    for ((d, gi), xi) in adj[b.0].iter_mut().zip(g).zip(x) {
                        *d += gi * xi;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if wants(x) {
                    axpy(&mut adj[x.0], g, 1.0);
                }
                if wants(row) {
                    let n = self.shape(*row)[1];
                    let dr = &mut adj[row.0];
                    for chunk in g.chunks(n.max(1)) {
                        dr.iter_mut().zip(chunk).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Scale(x, c) => axpy(&mut adj[x.0], g, *c),
            Op::AddScalar(x) => axpy(&mut adj[x.0], g, 1.0),
            Op::Exp(x) => {
                for ((d, gi), yi) in adj[x.0].iter_mut().zip(g).zip(out) {
                    *d += gi * yi;
                }
            }
            Op::Log(x) => {
                let xs = self.value(*x);
                for ((d, gi), xi) in adj[x.0].iter_mut().zip(g).zip(xs) {
                    *d += gi / xi;
                }
            }
            Op::Sigmoid(x) => {
                for ((d, gi), yi) in adj[x.0].iter_mut().zip(g).zip(out) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Tanh(x) => {
                for ((d, gi), yi) in adj[x.0].iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xs = self.value(*x);
                for ((d, gi), xi) in adj[x.0].iter_mut().zip(g).zip(xs) {
                    *d += if *xi > 0.0 { *gi } else { gi * slope };
                }
            }
            Op::Softplus(x) => {
                let xs = self.value(*x);
                for ((d, gi), &xi) in adj[x.0].iter_mut().zip(g).zip(xs) {
                    *d += gi * sigmoid(xi);
                }
            }
            Op::Abs(x) => {
                let xs = self.value(*x);
                for ((d, gi), xi) in adj[x.0].iter_mut().zip(g).zip(xs) {
                    *d += gi * xi.signum() * f64::from(*xi != 0.0);
                }
            }
            Op::ConcatCols(parts) => {
                let [m, n] = node.shape;
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    if wants(p) {
                        let dp = &mut adj[p.0];
                        for r in 0..m {
                            let src = &g[r * n + offset..r * n + offset + c];
                            dp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gi)| *d += gi);
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start, end) => {
                let [m, n] = self.shape(*x);
                let w = end - start;
                let dx = &mut adj[x.0];
                for r in 0..m {
                    dx[r * n + start..r * n + end]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Sum(x) => adj[x.0].iter_mut().for_each(|d| *d += g[0]),
            Op::Mean(x) => {
                let n = adj[x.0].len() as f64;
                adj[x.0].iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::LogMeanExp(x) => {
                // softmax weights, shifted by the max for stability
                let xs = self.value(*x);
                let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
                let total: f64 = w.iter().sum();
                for (d, wi) in adj[x.0].iter_mut().zip(w) {
                    *d += g[0] * wi / total;
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += alpha * s);
}

/// `m + ln(mean(exp(xᵢ − m)))` with `m = max xᵢ`. Returns `-inf` on empty input.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|v| (v - m).exp()).sum();
    m + (s / xs.len() as f64).ln()
}

/// Central-difference numerical gradients, for checking analytic ones.
pub mod check {
    /// Numerical gradient of `f` at `x` with step `h`.
    pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = probe[i];
                probe[i] = orig + h;
                let up = f(&probe);
                probe[i] = orig - h;
                let down = f(&probe);
                probe[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Largest entrywise error between two gradients: relative where the
    /// magnitudes are large, absolute otherwise.
    ///
    /// Entries whose magnitudes are both below `abs_floor` count as matching
    /// when their absolute difference is within `abs_floor`.
    pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let diff = (a - n).abs();
                let scale = a.abs().max(n.abs());
                if diff <= abs_floor {
                    0.0
                } else {
                    diff / scale.max(1e-300)
                }
            })
            .fold(0.0, f64::max)
    }
}
