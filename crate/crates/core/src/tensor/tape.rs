use std::sync::Arc;

use super::Tensor;
use crate::error::{contract, dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    /// `x + b` with `b` broadcast along the last axis.
    AddBias(Var, Var),
    /// `x ⊙ g` with `g` holding one factor per last-axis row of `x`.
    MulRows(Var, Var),
    Scale(Var, f64),
    /// `s · x` for a one-element `s`.
    ScaleBy(Var, Var),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Sum(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    /// Masked columns are exactly 0 in the output, so backward needs no mask.
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Conv2dSame {
        x: Var,
        kernel: Var,
        bias: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, name: &'static str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Maximum(a, b)
            | Op::Minimum(a, b)
            | Op::AddBias(a, b)
            | Op::MulRows(a, b)
            | Op::ScaleBy(a, b) => self.rg(*a) || self.rg(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::MaskedSoftmax(a)
            | Op::L2Normalize { x: a, .. } => self.rg(*a),
            Op::Concat(vs, _) => vs.iter().any(|v| self.rg(*v)),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::Conv2dSame { x, kernel, bias } => self.rg(*x) || self.rg(*kernel) || self.rg(*bias),
        };
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(op, shape, data, name)
    }

    fn same_shape(&self, a: Var, b: Var, name: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(name, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(op, shape, data, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), vec![m, n], out, "matmul")
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return dim_err("matmul_nt", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.data(a), self.data(b), &mut out, m, k, n);
        self.push(Op::MatMulNt(a, b), vec![m, n], out, "matmul_nt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return dim_err("transpose", s, &[]);
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a), vec![c, r], out, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).contains(&0.0) {
            return Err(Error::Degenerate("division by zero".into()));
        }
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), "maximum", |x, y| if x >= y { x } else { y })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Minimum(a, b), "minimum", |x, y| if x <= y { x } else { y })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let n = last_dim(sx);
        if sb.len() != 1 || sb[0] != n || sx.is_empty() {
            return dim_err("add_bias", sx, sb);
        }
        let shape = sx.to_vec();
        let bias = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        self.push(Op::AddBias(x, b), shape, data, "add_bias")
    }

    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.is_empty() || &sx[..sx.len() - 1] != sg {
            return dim_err("mul_rows", sx, sg);
        }
        let n = last_dim(sx);
        let shape = sx.to_vec();
        let gd = self.data(g);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * gd[i / n]).collect();
        self.push(Op::MulRows(x, g), shape, data, "mul_rows")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err("scale_by", self.shape(x), self.shape(s));
        }
        let c = self.data(s)[0];
        self.unary(x, Op::ScaleBy(x, s), "scale_by", |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), "add_scalar", |v| v + c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), "square", |v| v * v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Exp(x), "exp", f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::Degenerate("log of non-positive value".into()));
        }
        self.unary(x, Op::Log(x), "log", f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Tanh(x), "tanh", f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Op::LeakyRelu(x, slope), "leaky_relu", |v| if v >= 0.0 { v } else { slope * v })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Gelu(x), "gelu", gelu)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), vec![], vec![s], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return dim_err("reshape", self.shape(x), shape);
        }
        let data = self.data(x).to_vec();
        self.push(Op::Reshape(x), shape.to_vec(), data, "reshape")
    }

    /// `out[i] = x[index[i]]` reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() {
            return dim_err("gather", shape, &[index.len()]);
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return contract(format!("gather index {bad} out of range for {n} elements"));
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        self.push(Op::Gather(x, Arc::new(index)), shape.to_vec(), data, "gather")
    }

    /// Rows `rows` of a rank-2 tensor, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err("select_rows", s, &[]);
        }
        let (r, c) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return contract(format!("row {bad} out of range for {r} rows"));
        }
        let index = rows.iter().flat_map(|&i| (i * c)..(i * c + c)).collect();
        self.gather(x, index, &[rows.len(), c])
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return dim_err("slice_cols", s, &[start, end]);
        }
        let (r, c) = (s[0], s[1]);
        let index = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(x, index, &[r, end - start])
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return dim_err("diag", s, &[]);
        }
        let n = s[0];
        self.gather(x, (0..n).map(|i| i * n + i).collect(), &[n])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?).to_vec();
        if axis >= first.len() {
            return dim_err("concat", &first, &[axis]);
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let chunk = &self.data(v)[o * len * inner..(o + 1) * len * inner];
                out.extend_from_slice(chunk);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Op::Concat(xs.to_vec(), axis), shape, out, "concat")
    }

    fn check_axis(&self, x: Var, axis: usize, name: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return dim_err(name, self.shape(x), &[axis]);
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        self.push(Op::Softmax(x, axis), shape, out, "softmax")
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|l| (src[at(l)] - m).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = src[at(l)] - lse;
                }
            }
        }
        self.push(Op::LogSoftmax(x, axis), shape, out, "log_softmax")
    }

    /// Softmax over the last axis restricted to columns where `keep` is true;
    /// masked columns get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if keep.len() != n || shape.is_empty() {
            return dim_err("masked_softmax", &shape, &[keep.len()]);
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Degenerate("masked_softmax with every column masked".into()));
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let m = row_in.iter().zip(keep).filter(|(_, &k)| k).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ((o, &v), &k) in row_out.iter_mut().zip(row_in).zip(keep) {
                if k {
                    *o = (v - m).exp();
                    z += *o;
                }
            }
            row_out.iter_mut().for_each(|o| *o /= z);
        }
        self.push(Op::MaskedSoftmax(x), shape, out, "masked_softmax")
    }

    /// Layer normalization over the last axis followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        if self.shape(gain) != [n] || self.shape(bias) != [n] || shape.is_empty() {
            return dim_err("layer_norm", &shape, self.shape(gain));
        }
        if eps < 0.0 {
            return contract("layer_norm eps must be nonnegative");
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var + eps <= 0.0 {
                return Err(Error::Degenerate("layer_norm on a constant row with eps = 0".into()));
            }
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, shape, out, "layer_norm")
    }

    /// Scales every last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = last_dim(&shape);
        let src = self.data(x);
        let norms: Vec<f64> = src.chunks_exact(n).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if norms.contains(&0.0) {
            return Err(Error::Degenerate("l2_normalize of a zero vector".into()));
        }
        let out = src.iter().enumerate().map(|(i, &v)| v / norms[i / n]).collect();
        self.push(Op::L2Normalize { x, norms }, shape, out, "l2_normalize")
    }

    /// Zero-padded "same" convolution for `x: [H×W×Cin]`,
    /// `kernel: [k×k×Cin×Cout]` (odd `k`), `bias: [Cout]`.
    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[0] != sk[1] || sk[2] != sx[2] {
            return dim_err("conv2d_same", &sx, &sk);
        }
        let k = sk[0];
        if k % 2 == 0 {
            return contract(format!("convolution kernel size must be odd, got {k}"));
        }
        let cout = sk[3];
        if self.shape(bias) != [cout] {
            return dim_err("conv2d_same", &sk, self.shape(bias));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let r = (k / 2) as isize;
        let (xd, kd, bd) = (self.data(x), self.data(kernel), self.data(bias));
        let mut out = vec![0.0; h * w * cout];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
                o.copy_from_slice(bd);
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sxp = xx as isize + dx as isize - r;
                        if sxp < 0 || sxp >= w as isize {
                            continue;
                        }
                        let pix = &xd[(sy as usize * w + sxp as usize) * cin..][..cin];
                        for (c, &pv) in pix.iter().enumerate() {
                            let krow = &kd[((dy * k + dx) * cin + c) * cout..][..cout];
                            for (ov, &kv) in o.iter_mut().zip(krow) {
                                *ov += pv * kv;
                            }
                        }
                    }
                }
            }
        }
        self.push(Op::Conv2dSame { x, kernel, bias }, vec![h, w, cout], out, "conv2d_same")
    }

    /// `x · w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match g {
                    Some(g) if node.requires_grad => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                    _ => None,
                }
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let numel = |v: Var| self.nodes[v.0].value.numel();
        // Accumulate into `v` only if it participates in differentiation.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.rg(v) {
                    let len = numel(v);
                    accumulate(&mut grads[v.0], len, |$buf| $body);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g| matmul_nt_into(dy, bd, g, m, n, k));
                acc!(*b, |g| matmul_tn_into(ad, dy, g, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g| matmul_into(dy, bd, g, m, n, k));
                acc!(*b, |g| matmul_tn_into(dy, ad, g, m, n, k));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                acc!(*a, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc!(*a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc!(*b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc!(*a, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc!(*b, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bd[i];
                    }
                });
                acc!(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * ad[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc!(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / bd[i];
                    }
                });
                acc!(*b, |g| {
                    for i in 0..g.len() {
                        g[i] -= dy[i] * ad[i] / (bd[i] * bd[i]);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (ad, bd) = (self.data(*a), self.data(*b));
                let pick_a = |i: usize| if is_max { ad[i] >= bd[i] } else { ad[i] <= bd[i] };
                acc!(*a, |g| {
                    for i in 0..g.len() {
                        if pick_a(i) {
                            g[i] += dy[i];
                        }
                    }
                });
                acc!(*b, |g| {
                    for i in 0..g.len() {
                        if !pick_a(i) {
                            g[i] += dy[i];
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = numel(*b);
                acc!(*x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc!(*b, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::MulRows(x, s) => {
                let n = last_dim(self.shape(*x));
                let (xd, sd) = (self.data(*x), self.data(*s));
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sd[i / n];
                    }
                });
                acc!(*s, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i / n] += d * xd[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                acc!(*x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
            }
            Op::ScaleBy(x, s) => {
                let c = self.data(*s)[0];
                let xd = self.data(*x);
                acc!(*x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += c * d));
                acc!(*s, |g| g[0] += dy.iter().zip(xd).map(|(d, v)| d * v).sum::<f64>());
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc!(*x, |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Square(x) => {
                let xd = self.data(*x);
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * xd[i] * dy[i];
                    }
                });
            }
            Op::Exp(x) => {
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += y[i] * dy[i];
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.data(*x);
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / xd[i];
                    }
                });
            }
            Op::Tanh(x) => {
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += (1.0 - y[i] * y[i]) * dy[i];
                    }
                });
            }
            Op::Sigmoid(x) => {
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += y[i] * (1.0 - y[i]) * dy[i];
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xd = self.data(*x);
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += if xd[i] >= 0.0 { dy[i] } else { slope * dy[i] };
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gelu_grad(xd[i]) * dy[i];
                    }
                });
            }
            Op::Sum(x) => {
                acc!(*x, |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Gather(x, index) => {
                acc!(*x, |g| {
                    for (o, &i) in index.iter().enumerate() {
                        g[i] += dy[o];
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    acc!(v, |g| {
                        for o in 0..outer {
                            let src = &dy[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut g[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    });
                    offset += len;
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc!(*x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| dy[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                g[at(l)] += y[at(l)] * (dy[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc!(*x, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let total: f64 = (0..len).map(|l| dy[at(l)]).sum();
                            for l in 0..len {
                                g[at(l)] += dy[at(l)] - y[at(l)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::MaskedSoftmax(x) => {
                let n = last_dim(node.value.shape());
                acc!(*x, |g| {
                    for r in 0..y.len() / n {
                        let (yr, dr) = (&y[r * n..][..n], &dy[r * n..][..n]);
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = last_dim(node.value.shape());
                let gd = self.data(*gain);
                let rows = y.len() / n;
                acc!(*x, |g| {
                    for r in 0..rows {
                        let dh: Vec<f64> = (0..n).map(|j| dy[r * n + j] * gd[j]).collect();
                        let xh = &xhat[r * n..][..n];
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / n as f64;
                        for j in 0..n {
                            g[r * n + j] += k * (n as f64 * dh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                acc!(*gain, |g| {
                    for (i, (d, h)) in dy.iter().zip(xhat).enumerate() {
                        g[i % n] += d * h;
                    }
                });
                acc!(*bias, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % n] += d;
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let n = last_dim(node.value.shape());
                acc!(*x, |g| {
                    for (r, &nm) in norms.iter().enumerate() {
                        let (yr, dr) = (&y[r * n..][..n], &dy[r * n..][..n]);
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += (dr[j] - yr[j] * dot) / nm;
                        }
                    }
                });
            }
            Op::Conv2dSame { x, kernel, bias } => {
                let sx = self.shape(*x);
                let (h, w, cin) = (sx[0], sx[1], sx[2]);
                let sk = self.shape(*kernel);
                let (k, cout) = (sk[0], sk[3]);
                let r = (k / 2) as isize;
                let (xd, kd) = (self.data(*x), self.data(*kernel));
                let taps = |y: usize, xx: usize| {
                    (0..k).flat_map(move |dy_| (0..k).map(move |dx| (dy_, dx))).filter_map(move |(dy_, dx)| {
                        let sy = y as isize + dy_ as isize - r;
                        let sxp = xx as isize + dx as isize - r;
                        (sy >= 0 && sy < h as isize && sxp >= 0 && sxp < w as isize)
                            .then(|| (dy_, dx, sy as usize * w + sxp as usize))
                    })
                };
                acc!(*bias, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        g[i % cout] += d;
                    }
                });
                acc!(*x, |g| {
                    for y_ in 0..h {
                        for xx in 0..w {
                            let d = &dy[(y_ * w + xx) * cout..][..cout];
                            for (dy_, dx, src) in taps(y_, xx) {
                                for c in 0..cin {
                                    let krow = &kd[((dy_ * k + dx) * cin + c) * cout..][..cout];
                                    g[src * cin + c] += krow.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                });
                acc!(*kernel, |g| {
                    for y_ in 0..h {
                        for xx in 0..w {
                            let d = &dy[(y_ * w + xx) * cout..][..cout];
                            for (dy_, dx, src) in taps(y_, xx) {
                                for c in 0..cin {
                                    let pv = xd[src * cin + c];
                                    let krow = &mut g[((dy_ * k + dx) * cin + c) * cout..][..cout];
                                    krow.iter_mut().zip(d).for_each(|(g, d)| *g += pv * d);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let i3 = tape.constant(Tensor::eye(3));
        let out = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));

        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
        let zb = tape.matmul(z, b).unwrap();
        assert!(tape.value(zb).data().iter().all(|&v| v == 0.0));

        let p = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let pb = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(pb).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let s = tape.softmax(c, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

        let raw = [0.3, -1.2, 4.0, 0.0, 7.5, -3.0];
        let a = tape.constant(t(&[2, 3], &raw));
        let shifted: Vec<f64> = raw.iter().map(|v| v + 123.0).collect();
        let b = tape.constant(t(&[2, 3], &shifted));
        for axis in 0..2 {
            let sa = tape.softmax(a, axis).unwrap();
            let sb = tape.softmax(b, axis).unwrap();
            assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);
        }
        let rows = tape.softmax(a, 1).unwrap();
        for r in tape.value(rows).data().chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_bad_axis_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let e = 1.5f64.sqrt();
        let d = tape.value(y).data();
        assert!((d[0] + e).abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] - e).abs() < 1e-12);

        let c = tape.constant(t(&[3], &[4.0, 4.0, 4.0]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert!(tape.layer_norm(c, g, b, 0.0).is_err());

        let raw = [0.5, -2.0, 3.25, 1.0];
        let a = tape.constant(t(&[4], &raw));
        let g4 = tape.constant(Tensor::full(&[4], 1.0));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let scaled: Vec<f64> = raw.iter().map(|v| 3.0 * v - 7.0).collect();
        let s = tape.constant(t(&[4], &scaled));
        let ya = tape.layer_norm(a, g4, b4, 1e-12).unwrap();
        let ys = tape.layer_norm(s, g4, b4, 1e-12).unwrap();
        assert!(tape.value(ya).max_abs_diff(tape.value(ys)) < 1e-9);
        assert!(tape.value(ya).data().iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        let again = tape.l2_normalize(y).unwrap();
        assert!(tape.value(again).max_abs_diff(tape.value(y)) < 1e-15);
        let big = tape.constant(t(&[2], &[30.0, 40.0]));
        let yb = tape.l2_normalize(big).unwrap();
        assert!(tape.value(yb).max_abs_diff(tape.value(y)) < 1e-15);
        let z = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.l2_normalize(z), Err(Error::Degenerate(_))));
    }

    #[test]
    fn backward_basic_derivatives() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let g = tape.backward(xx).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 50.0, 2.0]));
        let y = tape.masked_softmax(x, &[true, false, true]).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_and_gather_layouts() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = tape.concat(&[b, b], 0).unwrap();
        assert_eq!(tape.shape(r), &[4, 2]);
        let d = tape.diag(b).unwrap();
        assert_eq!(tape.value(d).data(), &[3.0, 6.0]);
    }

    #[test]
    fn ops_never_mutate_inputs() {
        let mut tape = Tape::new();
        let raw = t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]);
        let x = tape.param(raw.clone());
        let y = tape.softmax(x, 1).unwrap();
        let z = tape.square(y).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(x), &raw);
    }
}
