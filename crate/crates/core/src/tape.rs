//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append nodes in topological order during the forward pass;
//! `backward` replays the reversed list once, accumulating gradients with
//! `+=` into every node. Gradients persist until `zero_grads`, so repeated
//! backward calls accumulate.
//!
//! The op set is exactly what MLPs with variational and dropout layers need:
//! matmul, bias broadcast, elementwise arithmetic and activations, row-wise
//! log-softmax, and sum/mean reductions. No general broadcasting.

use crate::tensor::{same_shape, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Exp,
    Log,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind, a: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    ClampMin { a: usize, floor: f64 },
    LogSoftmax { a: usize },
    Reduce { kind: ReduceKind, a: usize, axis: Option<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
}

/// Ordered record of operations with their values and gradient slots.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Numerically stable softplus ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`]: ln(e^y - 1) for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inv requires positive input");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Logistic sigmoid, the derivative of softplus.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    // Debug builds verify every op output is finite and surface the
    // failure as an error the trainer can turn into a numeric abort;
    // release builds skip the scan entirely.
    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { op, value, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { op: Op::Leaf, value, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: &[f64]) -> Result<Var, TensorError> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data.to_vec())?))
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Matrix product a[m,k] · b[k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::MatmulDims {
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul { a: a.0, b: b.0 }, value)
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                context: "add_bias",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let cols = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::AddBias { a: a.0, bias: bias.0 }, value)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("elementwise binary op", ta.shape(), tb.shape())?;
        let out: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::Binary { kind, a: a.0, b: b.0 }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if kind == UnaryKind::Log {
            if let Some((index, &value)) =
                ta.data().iter().enumerate().find(|(_, v)| **v <= 0.0)
            {
                return Err(TensorError::LogDomain { value, index });
            }
        }
        let out: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Tanh => x.tanh(),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Softplus => softplus(x),
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(Op::Unary { kind, a: a.0 }, value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn softplus_op(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(Op::Scale { a: a.0, factor }, value)
    }

    pub fn add_scalar(&mut self, a: Var, value_add: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| x + value_add).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(Op::AddScalar { a: a.0 }, value)
    }

    /// Elementwise max(x, floor). Gradient passes only where x > floor.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let out: Vec<f64> = ta.data().iter().map(|&x| x.max(floor)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(Op::ClampMin { a: a.0, floor }, value)
    }

    /// Row-wise log-softmax via the max-subtraction log-sum-exp trick.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 2 {
            return Err(TensorError::UnsupportedRank {
                rank: ta.rank(),
                context: "log_softmax",
            });
        }
        let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = ta.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + row
                    .iter()
                    .map(|&x| (x - max).exp())
                    .sum::<f64>()
                    .ln();
            for c in 0..cols {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::LogSoftmax { a: a.0 }, value)
    }

    /// Sum or mean over an axis, or over all elements when axis is None.
    pub fn reduce(
        &mut self,
        kind: ReduceKind,
        a: Var,
        axis: Option<usize>,
    ) -> Result<Var, TensorError> {
        let ta = &self.nodes[a.0].value;
        let rank = ta.rank();
        if let Some(ax) = axis {
            if ax >= rank {
                return Err(TensorError::AxisOutOfRange { axis: ax, rank });
            }
            if rank > 2 {
                return Err(TensorError::UnsupportedRank {
                    rank,
                    context: "axis reduction",
                });
            }
        }
        let value = match axis {
            None => {
                let s: f64 = ta.data().iter().sum();
                let v = match kind {
                    ReduceKind::Sum => s,
                    ReduceKind::Mean => s / ta.numel() as f64,
                };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if rank == 1 {
                    // axis 0 over a vector is the full reduction to a scalar
                    let s: f64 = ta.data().iter().sum();
                    let v = match kind {
                        ReduceKind::Sum => s,
                        ReduceKind::Mean => s / ta.numel() as f64,
                    };
                    Tensor::scalar(v)
                } else {
                    let (rows, cols) = (ta.shape()[0], ta.shape()[1]);
                    if ax == 0 {
                        let mut out = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                out[c] += ta.data()[r * cols + c];
                            }
                        }
                        if kind == ReduceKind::Mean {
                            out.iter_mut().for_each(|v| *v /= rows as f64);
                        }
                        Tensor::new(vec![cols], out)?
                    } else {
                        let mut out = vec![0.0; rows];
                        for r in 0..rows {
                            out[r] = ta.row(r).iter().sum();
                        }
                        if kind == ReduceKind::Mean {
                            out.iter_mut().for_each(|v| *v /= cols as f64);
                        }
                        Tensor::new(vec![rows], out)?
                    }
                }
            }
        };
        self.push(Op::Reduce { kind, a: a.0, axis }, value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(ReduceKind::Mean, a, None)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Standard backward from a scalar root with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape });
        }
        self.backward_seeded(&[(root, &[1.0])])
    }

    /// Backward from explicitly seeded output gradients.
    ///
    /// Used by the exact distributed aggregation path, where the loss
    /// derivative w.r.t. each local prediction is computed from globally
    /// reduced statistics rather than by differentiating a local loss node.
    ///
    /// Each call propagates through a scratch buffer and adds its result
    /// onto the persistent per-node gradients, so repeated calls accumulate
    /// exactly (two un-zeroed calls double every gradient).
    pub fn backward_seeded(&mut self, seeds: &[(Var, &[f64])]) -> Result<(), TensorError> {
        let mut max_id = 0;
        for (var, seed) in seeds {
            let n = self.nodes[var.0].value.numel();
            if seed.len() != n {
                return Err(TensorError::SeedLength {
                    seed_len: seed.len(),
                    len: n,
                });
            }
            max_id = max_id.max(var.0);
        }
        let mut scratch: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        for (var, seed) in seeds {
            for (g, s) in scratch[var.0].iter_mut().zip(*seed) {
                *g += s;
            }
        }
        for id in (0..=max_id).rev() {
            self.step_backward(id, &mut scratch);
        }
        for (node, local) in self.nodes.iter_mut().zip(&scratch) {
            for (g, l) in node.grad.iter_mut().zip(local) {
                *g += l;
            }
        }
        Ok(())
    }

    fn step_backward(&self, id: usize, scratch: &mut [Vec<f64>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b].value.shape()[1];
                let g = scratch[id].clone();
                // a.grad += g · bᵀ
                let bt = transpose(self.nodes[b].value.data(), k, n);
                let da = matmul_raw(&g, &bt, m, n, k);
                accumulate(&mut scratch[a], &da);
                // b.grad += aᵀ · g
                let at = transpose(self.nodes[a].value.data(), m, k);
                let db = matmul_raw(&at, &g, k, m, n);
                accumulate(&mut scratch[b], &db);
            }
            Op::AddBias { a, bias } => {
                let g = scratch[id].clone();
                accumulate(&mut scratch[a], &g);
                let cols = self.nodes[bias].value.numel();
                let bg = &mut scratch[bias];
                for (i, &gv) in g.iter().enumerate() {
                    bg[i % cols] += gv;
                }
            }
            Op::Binary { kind, a, b } => {
                let g = scratch[id].clone();
                match kind {
                    BinaryKind::Add => {
                        accumulate(&mut scratch[a], &g);
                        accumulate(&mut scratch[b], &g);
                    }
                    BinaryKind::Sub => {
                        accumulate(&mut scratch[a], &g);
                        for (gb, &gv) in scratch[b].iter_mut().zip(&g) {
                            *gb -= gv;
                        }
                    }
                    BinaryKind::Mul => {
                        let av = self.nodes[a].value.data();
                        let bv = self.nodes[b].value.data();
                        for i in 0..g.len() {
                            scratch[a][i] += g[i] * bv[i];
                        }
                        for i in 0..g.len() {
                            scratch[b][i] += g[i] * av[i];
                        }
                    }
                    BinaryKind::Div => {
                        let av = self.nodes[a].value.data();
                        let bv = self.nodes[b].value.data();
                        for i in 0..g.len() {
                            scratch[a][i] += g[i] / bv[i];
                        }
                        for i in 0..g.len() {
                            scratch[b][i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    }
                }
            }
            Op::Unary { kind, a } => {
                let g = scratch[id].clone();
                let av = self.nodes[a].value.data();
                let out = self.nodes[id].value.data();
                let ga = &mut scratch[a];
                match kind {
                    UnaryKind::Relu => {
                        for i in 0..g.len() {
                            if av[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                    UnaryKind::Tanh => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * (1.0 - out[i] * out[i]);
                        }
                    }
                    UnaryKind::Exp => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * out[i];
                        }
                    }
                    UnaryKind::Log => {
                        for i in 0..g.len() {
                            ga[i] += g[i] / av[i];
                        }
                    }
                    UnaryKind::Softplus => {
                        for i in 0..g.len() {
                            ga[i] += g[i] * logistic(av[i]);
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                let g = scratch[id].clone();
                for (ga, &gv) in scratch[a].iter_mut().zip(&g) {
                    *ga += gv * factor;
                }
            }
            Op::AddScalar { a } => {
                let g = scratch[id].clone();
                accumulate(&mut scratch[a], &g);
            }
            Op::ClampMin { a, floor } => {
                let g = scratch[id].clone();
                let av = self.nodes[a].value.data();
                for i in 0..g.len() {
                    if av[i] > floor {
                        scratch[a][i] += g[i];
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let g = scratch[id].clone();
                let out = self.nodes[id].value.data();
                let (rows, cols) = {
                    let s = self.nodes[id].value.shape();
                    (s[0], s[1])
                };
                let ga = &mut scratch[a];
                for r in 0..rows {
                    let gsum: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        ga[i] += g[i] - out[i].exp() * gsum;
                    }
                }
            }
            Op::Reduce { kind, a, axis } => {
                let g = scratch[id].clone();
                let in_shape = self.nodes[a].value.shape().to_vec();
                let in_rank = in_shape.len();
                let in_len = self.nodes[a].value.numel();
                let ga = &mut scratch[a];
                match axis {
                    None => {
                        let f = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / in_len as f64,
                        };
                        for gv in ga.iter_mut() {
                            *gv += g[0] * f;
                        }
                    }
                    Some(ax) => {
                        if in_rank == 1 {
                            let f = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / in_len as f64,
                            };
                            for gv in ga.iter_mut() {
                                *gv += g[0] * f;
                            }
                        } else {
                            let (rows, cols) = (in_shape[0], in_shape[1]);
                            if ax == 0 {
                                let f = match kind {
                                    ReduceKind::Sum => 1.0,
                                    ReduceKind::Mean => 1.0 / rows as f64,
                                };
                                for r in 0..rows {
                                    for c in 0..cols {
                                        ga[r * cols + c] += g[c] * f;
                                    }
                                }
                            } else {
                                let f = match kind {
                                    ReduceKind::Sum => 1.0,
                                    ReduceKind::Mean => 1.0 / cols as f64,
                                };
                                for r in 0..rows {
                                    for c in 0..cols {
                                        ga[r * cols + c] += g[r] * f;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Binary { .. } => "binary",
        Op::Unary { .. } => "unary",
        Op::Scale { .. } => "scale",
        Op::AddScalar { .. } => "add_scalar",
        Op::ClampMin { .. } => "clamp_min",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Reduce { .. } => "reduce",
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Row-major matrix product in ikj order for cache locality.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let (brow, orow) = (&b[p * n..(p + 1) * n], &mut out[i * n..(i + 1) * n]);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn matmul_backward_matches_hand_result() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), &[3.0, 4.0]);
        assert_eq!(tape.grad(b), &[1.0, 2.0]);
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.softplus_op(x).unwrap();
        assert!((tape.value(y).item() - 2.0_f64.ln()).abs() < 1e-12);
        tape.backward(y).unwrap();
        // derivative of softplus is the logistic; logistic(0) = 0.5
        assert_eq!(tape.grad(x), &[0.5]);
    }

    #[test]
    fn log_domain_error_reports_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(&[1.0, -2.0]));
        match tape.log(x) {
            Err(TensorError::LogDomain { value, index }) => {
                assert_eq!(value, -2.0);
                assert_eq!(index, 1);
            }
            other => panic!("expected LogDomain, got {other:?}"),
        }
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.log_softmax(x).unwrap();
        let ln2 = 2.0_f64.ln();
        for v in tape.value(y).data() {
            assert!((v + ln2).abs() < 1e-15);
        }

        let big = tape.leaf(t(&[1, 2], &[1000.0, 0.0]));
        let yb = tape.log_softmax(big).unwrap();
        let row = tape.value(yb).data();
        assert!(row.iter().all(|v| v.is_finite()));
        assert!(row[0].abs() < 1e-12);
        assert!((row[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_direct_evaluation() {
        // independent route: x_i - ln(sum exp(x_j)) computed directly
        let x = [1.0, 2.0, 3.0];
        let lse = x.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let expected: Vec<f64> = x.iter().map(|v| v - lse).collect();

        let mut tape = Tape::new();
        let xv = tape.leaf(t(&[1, 3], &x));
        let y = tape.log_softmax(xv).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
        // cross-check against hand-rounded reference values
        let rounded = [-2.4076, -1.4076, -0.4076];
        for (a, r) in tape.value(y).data().iter().zip(&rounded) {
            assert!((a - r).abs() < 1e-4);
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.3, -1.5, 2.0, 10.0, 10.0, 10.0]));
        let y = tape.log_softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]));
        let m = tape.mean(v).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);

        let mat = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s0 = tape.reduce(ReduceKind::Sum, mat, Some(0)).unwrap();
        assert_eq!(tape.value(s0).data(), &[4.0, 6.0]);

        let err = tape.reduce(ReduceKind::Sum, mat, Some(2)).unwrap_err();
        assert!(matches!(err, TensorError::AxisOutOfRange { axis: 2, rank: 2 }));
    }

    #[test]
    fn mean_backward_splits_evenly() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(&[1.0, 5.0]));
        let m = tape.mean(v).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(v), &[0.5, 0.5]);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let c = tape.leaf(Tensor::scalar(7.0));
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(
            tape.backward(a),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]));
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), &[2.0, 2.0]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a), &[1.0, 1.0]);
    }

    #[test]
    fn mul_with_shared_operand_doubles() {
        // d(x*x)/dx = 2x via per-input accumulation on the same node
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x), &[6.0]);
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t(&[2, 3], &[0.1, -0.2, 0.3, 1.7, -0.5, 0.9]));
            let b = tape.leaf(t(&[3, 2], &[0.5, 1.5, -0.25, 2.0, 0.75, -1.0]));
            let c = tape.matmul(a, b).unwrap();
            let d = tape.tanh(c).unwrap();
            let e = tape.mean(d).unwrap();
            tape.backward(e).unwrap();
            (
                tape.value(e).item().to_bits(),
                tape.grad(a).iter().map(|g| g.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    // Central finite differences over every differentiable op.
    // Inputs are seeded, so kink-adjacent samples cannot appear flakily.
    #[test]
    fn finite_difference_fuzz() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
        let h = 1e-5;
        let mut cases = 0;

        for case in 0..130 {
            let rows = 2 + (case % 2);
            let cols = 2;
            let n = rows * cols;
            let op = case % 13;
            let positive = op == 6; // log needs strictly positive inputs
            let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| {
                        if positive {
                            rng.gen_range(0.5..2.5)
                        } else {
                            rng.gen_range(-2.0..2.0)
                        }
                    })
                    .collect()
            };
            let xa = sample(&mut rng);
            let xb = sample(&mut rng);

            let eval = |xa: &[f64], xb: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let a = tape.leaf(t(&[rows, cols], xa));
                let b = tape.leaf(t(&[rows, cols], xb));
                let out = match op {
                    0 => tape.add(a, b).unwrap(),
                    1 => tape.sub(a, b).unwrap(),
                    2 => tape.mul(a, b).unwrap(),
                    3 => tape.relu(a).unwrap(),
                    4 => tape.tanh(a).unwrap(),
                    5 => tape.exp(a).unwrap(),
                    6 => tape.log(a).unwrap(),
                    7 => tape.softplus_op(a).unwrap(),
                    8 => tape.log_softmax(a).unwrap(),
                    9 => tape.reduce(ReduceKind::Sum, a, Some(0)).unwrap(),
                    10 => tape.reduce(ReduceKind::Mean, a, Some(1)).unwrap(),
                    11 => {
                        let bt = tape.leaf(t(&[cols, rows], &xb[..cols * rows]));
                        tape.matmul(a, bt).unwrap()
                    }
                    _ => {
                        let bias = tape.leaf(Tensor::vector(&xb[..cols]));
                        tape.add_bias(a, bias).unwrap()
                    }
                };
                // weighted sum makes per-element gradients distinguishable
                let out_shape = tape.value(out).shape().to_vec();
                let w: Vec<f64> = (0..tape.value(out).numel())
                    .map(|i| 0.3 + 0.1 * i as f64)
                    .collect();
                let wv = tape.leaf(t(&out_shape, &w));
                let prod = tape.mul(out, wv).unwrap();
                let root = tape.sum(prod).unwrap();
                tape.backward(root).unwrap();
                tape.value(root).item()
            };

            // analytic gradients
            let mut tape = Tape::new();
            let a = tape.leaf(t(&[rows, cols], &xa));
            let b = tape.leaf(t(&[rows, cols], &xb));
            let out = match op {
                0 => tape.add(a, b).unwrap(),
                1 => tape.sub(a, b).unwrap(),
                2 => tape.mul(a, b).unwrap(),
                3 => tape.relu(a).unwrap(),
                4 => tape.tanh(a).unwrap(),
                5 => tape.exp(a).unwrap(),
                6 => tape.log(a).unwrap(),
                7 => tape.softplus_op(a).unwrap(),
                8 => tape.log_softmax(a).unwrap(),
                9 => tape.reduce(ReduceKind::Sum, a, Some(0)).unwrap(),
                10 => tape.reduce(ReduceKind::Mean, a, Some(1)).unwrap(),
                11 => {
                    let bt = tape.leaf(t(&[cols, rows], &xb[..cols * rows]));
                    tape.matmul(a, bt).unwrap()
                }
                _ => {
                    let bias = tape.leaf(Tensor::vector(&xb[..cols]));
                    tape.add_bias(a, bias).unwrap()
                }
            };
            let out_shape = tape.value(out).shape().to_vec();
            let w: Vec<f64> = (0..tape.value(out).numel())
                .map(|i| 0.3 + 0.1 * i as f64)
                .collect();
            let wv = tape.leaf(t(&out_shape, &w));
            let prod = tape.mul(out, wv).unwrap();
            let root = tape.sum(prod).unwrap();
            tape.backward(root).unwrap();
            let analytic = tape.grad(a).to_vec();

            for i in 0..n {
                let mut xp = xa.clone();
                let mut xm = xa.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (eval(&xp, &xb) - eval(&xm, &xb)) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "op {op} case {case} idx {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
                cases += 1;
            }
        }
        assert!(cases >= 100);
    }

    #[test]
    fn softplus_helpers_are_inverses() {
        for &y in &[1e-6, 0.01, 0.5, 1.0, 7.0, 40.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() < 1e-12 * y.max(1.0));
        }
        // spec worked value: softplus_inv(1) = ln(e - 1)
        assert!((softplus_inv(1.0) - (std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
        assert!((softplus_inv(1.0) - 0.5413).abs() < 1e-4);
    }
}
