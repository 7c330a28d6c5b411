//! Reverse-mode differentiation over a linear record of primitive operations.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise primitive is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `[1, c]`, repeated over every row of the `[r, c]` lhs.
    Row,
    /// rhs holds a single element.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-owner record of a computation. Build a fresh tape per
/// gradient evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (ta, tb) = (self.value(a), self.value(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if tb.len() == 1 && sb.iter().all(|&d| d == 1) {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1] {
            Ok(Bcast::Row)
        } else if ta.len() == tb.len() && ta.rows() == tb.rows() && ta.cols() == tb.cols() {
            Ok(Bcast::Same)
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        let data: Vec<f64> = match bc {
            Bcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => {
                let y = tb.item();
                ta.data().iter().map(|&x| f(x, y)).collect()
            }
            Bcast::Row => ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % cols]))
                .collect(),
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op(a, b, bc), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| leaky_relu(x, slope), Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise clamp; the gradient is zero wherever the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let value = ta.matmul(tb)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor::new(vec![r, 1], data).expect("shape");
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Per-column sum: `[r, c] -> [1, c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, &x) in data.iter_mut().zip(&t.data()[i * c..(i + 1) * c]) {
                *d += x;
            }
        }
        let value = Tensor::new(vec![1, c], data).expect("shape");
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if t.shape().len() != 2 || start + len > c {
            return Err(Error::shape("slice_cols", t.shape(), &[start, start + len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if t.shape().len() != 2 || start + len > r {
            return Err(Error::shape("slice_rows", t.shape(), &[start, start + len]));
        }
        let value = Tensor::new(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    /// Concatenation of rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || axis > 1 {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let other = 1 - axis;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[other] != s0[other] {
                return Err(Error::shape("concat", &s0, s));
            }
        }
        let value = if axis == 0 {
            let rows = parts.iter().map(|&p| self.shape(p)[0]).sum();
            let mut data = Vec::with_capacity(rows * s0[1]);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, s0[1]], data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(s0[0] * cols);
            for i in 0..s0[0] {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![s0[0], cols], data)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Row lookup `out[i] = a[indices[i]]` (embedding table gather).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape("gather_rows", t.shape(), &[bad]));
        }
        let value = t.select_rows(indices);
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), ng))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g));
                let cols = node.value.cols();
                acc(*b, &|s| reduce_bcast(s, *bc, cols, g.iter().map(|&g| sign * g)));
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = node.value.cols();
                acc(*a, &|s| {
                    for (k, (s, &g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g * bcast_at(vb, *bc, cols, k);
                    }
                });
                acc(*b, &|s| reduce_bcast(s, *bc, cols, g.iter().zip(va).map(|(&g, &x)| g * x)));
            }
            Op::Div(a, b, bc) => {
                let vb = val(*b);
                let cols = node.value.cols();
                acc(*a, &|s| {
                    for (k, (s, &g)) in s.iter_mut().zip(g).enumerate() {
                        *s += g / bcast_at(vb, *bc, cols, k);
                    }
                });
                // d(a/b)/db = -out / b
                acc(*b, &|s| {
                    reduce_bcast(
                        s,
                        *bc,
                        cols,
                        g.iter()
                            .zip(out)
                            .enumerate()
                            .map(|(k, (&g, &o))| -g * o / bcast_at(vb, *bc, cols, k)),
                    )
                });
            }
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += c * g)),
            Op::Offset(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, &g)| *s += g)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G Bᵀ, dB = Aᵀ G
                acc(*a, &|s| gemm(m, n, k, g, false, tb.data(), true, s, true));
                acc(*b, &|s| gemm(k, m, n, ta.data(), true, g, false, s, true));
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * leaky_relu_grad(x, *slope);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &|s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * sigmoid(x);
                    }
                });
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g / x;
                    }
                });
            }
            Op::Exp(a) => acc(*a, &|s| {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out) {
                    *s += g * y;
                }
            }),
            Op::Abs(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += g * sign(x);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        *s += 2.0 * g * x;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for ((s, &g), &x) in s.iter_mut().zip(g).zip(x) {
                        if x >= *lo && x <= *hi {
                            *s += g;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::SumCols(a) => {
                let c = self.nodes[a.0].value.cols();
                acc(*a, &|s| {
                    for (k, s) in s.iter_mut().enumerate() {
                        *s += g[k / c];
                    }
                });
            }
            Op::SumRows(a) => {
                let c = self.nodes[a.0].value.cols();
                acc(*a, &|s| {
                    for (k, s) in s.iter_mut().enumerate() {
                        *s += g[k % c];
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.nodes[a.0].value.cols();
                let len = node.value.cols();
                acc(*a, &|s| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for (j, &gv) in gr.iter().enumerate() {
                            s[r * c + start + j] += gv;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = node.value.cols();
                acc(*a, &|s| {
                    for (k, &gv) in g.iter().enumerate() {
                        s[start * c + k] += gv;
                    }
                });
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        let gp = &g[offset..offset + len];
                        acc(p, &|s| s.iter_mut().zip(gp).for_each(|(s, &g)| *s += g));
                        offset += len;
                    }
                } else {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.cols();
                        acc(p, &|s| {
                            for (r, sr) in s.chunks_mut(pc).enumerate() {
                                for (j, sv) in sr.iter_mut().enumerate() {
                                    *sv += g[r * total + col + j];
                                }
                            }
                        });
                        col += pc;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let c = node.value.cols();
                acc(*a, &|s| {
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..c {
                            s[src * c + j] += g[r * c + j];
                        }
                    }
                });
            }
        }
    }
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

fn bcast_at(b: &[f64], bc: Bcast, cols: usize, k: usize) -> f64 {
    match bc {
        Bcast::Same => b[k],
        Bcast::Row => b[k % cols],
        Bcast::Scalar => b[0],
    }
}

fn reduce_bcast(s: &mut [f64], bc: Bcast, cols: usize, g: impl Iterator<Item = f64>) {
    match bc {
        Bcast::Same => s.iter_mut().zip(g).for_each(|(s, g)| *s += g),
        Bcast::Row => g.enumerate().for_each(|(k, g)| s[k % cols] += g),
        Bcast::Scalar => s[0] += g.sum::<f64>(),
    }
}
