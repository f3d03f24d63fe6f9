//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Every primitive pushes one node holding its forward value. `backward`
//! walks the nodes in reverse insertion order, which is a valid topological
//! order because a node can only reference nodes created before it.

use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the operands of an elementwise binary op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs shape == lhs.shape[1..]; rhs repeats along lhs's leading axis.
    Rhs,
    /// lhs shape == rhs.shape[1..].
    Lhs,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(BinKind, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LogSumExpLast(Var),
    RowNormalize(Var),
    PairwiseSqDist(Var, Var),
    CosineRows(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    PickLast(Var, Vec<usize>),
    GradReverse(Var, f64),
    WeightedPool(Var, Var),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations so gradients can be replayed backwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    (numel(shape) / last.max(1), last)
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// G[m,n] · B[k,n]ᵀ -> [m,k]
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// A[m,k]ᵀ · G[m,n] -> [k,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sums a full-size gradient down to the operand that was broadcast.
fn reduce_leading(full: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in full.chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf that tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node values are well-formed")
    }

    pub fn data(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].data.clone()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].data[0]
    }

    fn push_unchecked(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("{name} produced non-finite value {bad}")));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        Ok(self.push_unchecked(shape, data, op, requires_grad))
    }

    fn unary(&self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect())
        };
        self.push(name, shape, data, op, &[a])
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::dim("matmul", &na.shape, &nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            (vec![m, n], mm(&na.data, &nb.data, m, k, n))
        };
        self.push("matmul", shape, data, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.len() != 2 {
                return Err(Error::dim("transpose", &n.shape, &[]));
            }
            (vec![n.shape[1], n.shape[0]], transpose(&n.data, n.shape[0], n.shape[1]))
        };
        self.push("transpose", shape, data, Op::Transpose(a), &[a])
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (shape, data, bc) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let bc = if na.shape == nb.shape {
                Bcast::Same
            } else if na.shape.len() == nb.shape.len() + 1 && na.shape[1..] == nb.shape[..] {
                Bcast::Rhs
            } else if nb.shape.len() == na.shape.len() + 1 && nb.shape[1..] == na.shape[..] {
                Bcast::Lhs
            } else {
                return Err(Error::dim(name, &na.shape, &nb.shape));
            };
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            let (shape, data): (Vec<usize>, Vec<f64>) = match bc {
                Bcast::Same => (
                    na.shape.clone(),
                    na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect(),
                ),
                Bcast::Rhs => {
                    let l = nb.data.len();
                    (
                        na.shape.clone(),
                        na.data.iter().enumerate().map(|(i, &x)| f(x, nb.data[i % l])).collect(),
                    )
                }
                Bcast::Lhs => {
                    let l = na.data.len();
                    (
                        nb.shape.clone(),
                        nb.data.iter().enumerate().map(|(i, &y)| f(na.data[i % l], y)).collect(),
                    )
                }
            };
            (shape, data, bc)
        };
        self.push(name, shape, data, Op::Binary(kind, a, b, bc), &[a, b])
    }

    /// Elementwise sum; `b` may also be broadcast over `a`'s leading axis (or vice versa).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn mul_scalar_var(&self, a: Var, s: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, ns) = (&nodes[a.0], &nodes[s.0]);
            if ns.data.len() != 1 {
                return Err(Error::dim("mul_scalar_var", &na.shape, &ns.shape));
            }
            let c = ns.data[0];
            (na.shape.clone(), na.data.iter().map(|x| x * c).collect())
        };
        self.push("mul_scalar_var", shape, data, Op::MulScalarVar(a, s), &[a, s])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    /// Forward identity; backward multiplies the incoming gradient by `-scale`.
    pub fn grad_reverse(&self, a: Var, scale: f64) -> Result<Var> {
        self.unary("grad_reverse", a, Op::GradReverse(a, scale), |x| x)
    }

    // ---- row-wise ops over the last axis --------------------------------

    fn rowwise(&self, name: &'static str, a: Var, op: Op, f: impl Fn(&[f64], &mut [f64])) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let (_, last) = split_last(&n.shape);
            let mut out = vec![0.0; n.data.len()];
            for (row, o) in n.data.chunks(last).zip(out.chunks_mut(last)) {
                f(row, o);
            }
            (n.shape.clone(), out)
        };
        self.push(name, shape, data, op, &[a])
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        self.rowwise("softmax", a, Op::SoftmaxLast(a), softmax_row)
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        self.rowwise("log_softmax", a, Op::LogSoftmaxLast(a), |row, o| {
            let lse = logsumexp_row(row);
            o.iter_mut().zip(row).for_each(|(o, x)| *o = x - lse);
        })
    }

    /// Divides each row by its sum; rows summing to 0 stay zero.
    pub fn row_normalize(&self, a: Var) -> Result<Var> {
        self.rowwise("row_normalize", a, Op::RowNormalize(a), |row, o| {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                o.iter_mut().zip(row).for_each(|(o, x)| *o = x / s);
            }
        })
    }

    /// Log-sum-exp over the last axis, which is dropped.
    pub fn logsumexp(&self, a: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let (_, last) = split_last(&n.shape);
            let data: Vec<f64> = n.data.chunks(last).map(logsumexp_row).collect();
            (reduced_shape(&n.shape), data)
        };
        self.push("logsumexp", shape, data, Op::LogSumExpLast(a), &[a])
    }

    /// Sum over the last axis, which is dropped.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let (_, last) = split_last(&n.shape);
            let data: Vec<f64> = n.data.chunks(last).map(|r| r.iter().sum()).collect();
            (reduced_shape(&n.shape), data)
        };
        self.push("sum_last", shape, data, Op::SumLast(a), &[a])
    }

    /// `out[i] = a[i, index[i]]` for a matrix `a`.
    pub fn pick(&self, a: Var, index: &[usize]) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.len() != 2 || n.shape[0] != index.len() {
                return Err(Error::dim("pick", &n.shape, &[index.len()]));
            }
            let c = n.shape[1];
            if let Some(&bad) = index.iter().find(|&&j| j >= c) {
                return Err(Error::Contract(format!("pick index {bad} out of range for {c} columns")));
            }
            index.iter().enumerate().map(|(i, &j)| n.data[i * c + j]).collect::<Vec<_>>()
        };
        self.push("pick", vec![index.len()], data, Op::PickLast(a, index.to_vec()), &[a])
    }

    // ---- pairwise geometry ----------------------------------------------

    /// `out[i][j] = ‖a_i − b_j‖²` for row sets `a: [n,d]`, `b: [m,d]`.
    pub fn pairwise_sq_dist(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[1] {
                return Err(Error::dim("pairwise_sq_dist", &na.shape, &nb.shape));
            }
            let (n, m, d) = (na.shape[0], nb.shape[0], na.shape[1]);
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let ai = &na.data[i * d..(i + 1) * d];
                for j in 0..m {
                    let bj = &nb.data[j * d..(j + 1) * d];
                    out[i * m + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
            (vec![n, m], out)
        };
        self.push("pairwise_sq_dist", shape, data, Op::PairwiseSqDist(a, b), &[a, b])
    }

    /// Row-wise cosine similarity of two equal-shape matrices. A zero-norm
    /// row yields similarity 0 with zero gradient.
    pub fn cosine_rows(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || na.shape != nb.shape {
                return Err(Error::dim("cosine_rows", &na.shape, &nb.shape));
            }
            let d = na.shape[1];
            let data = na
                .data
                .chunks(d)
                .zip(nb.data.chunks(d))
                .map(|(x, y)| cosine_parts(x, y).0)
                .collect();
            (vec![na.shape[0]], data)
        };
        self.push("cosine_rows", shape, data, Op::CosineRows(a, b), &[a, b])
    }

    // ---- reductions and reshaping --------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.nodes.borrow()[a.0].data.iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let s = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.0].data;
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.push("mean", vec![1], vec![s], Op::Mean(a), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if numel(shape) != n.data.len() {
                return Err(Error::dim("reshape", &n.shape, shape));
            }
            n.data.clone()
        };
        self.push("reshape", shape.to_vec(), data, Op::Reshape(a), &[a])
    }

    /// Gathers rows (leading-axis slices) by index; indices may repeat.
    pub fn select_rows(&self, a: Var, index: &[usize]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let rows = n.shape[0];
            let stride = n.data.len() / rows;
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return Err(Error::Contract(format!("select_rows index {bad} out of range for {rows} rows")));
            }
            let mut data = Vec::with_capacity(index.len() * stride);
            for &i in index {
                data.extend_from_slice(&n.data[i * stride..(i + 1) * stride]);
            }
            let mut shape = n.shape.clone();
            shape[0] = index.len();
            (shape, data)
        };
        self.push("select_rows", shape, data, Op::SelectRows(a, index.to_vec()), &[a])
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::Contract("concat_rows needs at least one part".into()))?;
            let tail = nodes[first.0].shape[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let n = &nodes[p.0];
                if n.shape[1..] != tail[..] {
                    return Err(Error::dim("concat_rows", &nodes[first.0].shape, &n.shape));
                }
                rows += n.shape[0];
                data.extend_from_slice(&n.data);
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            (shape, data)
        };
        self.push("concat_rows", shape, data, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Mask-weighted mean of grid cells: `feats: [N,P,F]`, `mask: [N,P]`
    /// (positive), output `[N,F]` with `out[n] = Σ_p m[n,p]·feats[n,p] / Σ_p m[n,p]`.
    pub fn weighted_pool(&self, feats: Var, mask: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (nf, nm) = (&nodes[feats.0], &nodes[mask.0]);
            if nf.shape.len() != 3 || nm.shape.len() != 2 || nf.shape[..2] != nm.shape[..] {
                return Err(Error::dim("weighted_pool", &nf.shape, &nm.shape));
            }
            let (n, p, f) = (nf.shape[0], nf.shape[1], nf.shape[2]);
            let mut out = vec![0.0; n * f];
            for s in 0..n {
                let m = &nm.data[s * p..(s + 1) * p];
                let total: f64 = m.iter().sum();
                if total <= 0.0 {
                    return Err(Error::Numeric("weighted_pool mask sums to zero".into()));
                }
                let o = &mut out[s * f..(s + 1) * f];
                for (c, &w) in m.iter().enumerate() {
                    let cell = &nf.data[(s * p + c) * f..(s * p + c + 1) * f];
                    for (ov, &x) in o.iter_mut().zip(cell) {
                        *ov += w * x;
                    }
                }
                o.iter_mut().for_each(|v| *v /= total);
            }
            (vec![n, f], out)
        };
        self.push("weighted_pool", shape, data, Op::WeightedPool(feats, mask), &[feats, mask])
    }

    // ---- differentiation -------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Gradients from a previous call are discarded.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`. Nodes that
    /// track gradients but were not reached get zeros; nodes that do not
    /// track gradients return `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let data = self
            .grads
            .borrow()
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; node.data.len()]);
        Tensor::new(node.shape.clone(), data).ok()
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// Returns (cos, |x|, |y|); cos is 0 when either norm is 0.
fn cosine_parts(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return (0.0, nx, ny);
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / (nx * ny), nx, ny)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0];
    let wants = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (na, nb) = (val(*a), val(*b));
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            if wants(*a) {
                accumulate(nodes, grads, *a, mm_nt(g, &nb.data, m, n, k));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, mm_tn(&na.data, g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let na = val(*a);
            // g has shape [cols, rows] of the input
            accumulate(nodes, grads, *a, transpose(g, na.shape[1], na.shape[0]));
        }
        Op::Binary(kind, a, b, bc) => {
            let (na, nb) = (val(*a), val(*b));
            let (la, lb) = (na.data.len(), nb.data.len());
            let ai = |i: usize| if *bc == Bcast::Lhs { i % la } else { i };
            let bi = |i: usize| if *bc == Bcast::Rhs { i % lb } else { i };
            let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                BinKind::Add => (g.to_vec(), g.to_vec()),
                BinKind::Sub => (g.to_vec(), g.iter().map(|x| -x).collect()),
                BinKind::Mul => (
                    g.iter().enumerate().map(|(i, gv)| gv * nb.data[bi(i)]).collect(),
                    g.iter().enumerate().map(|(i, gv)| gv * na.data[ai(i)]).collect(),
                ),
                BinKind::Div => (
                    g.iter().enumerate().map(|(i, gv)| gv / nb.data[bi(i)]).collect(),
                    g.iter()
                        .enumerate()
                        .map(|(i, gv)| {
                            let y = nb.data[bi(i)];
                            -gv * na.data[ai(i)] / (y * y)
                        })
                        .collect(),
                ),
            };
            if wants(*a) {
                let ga = if *bc == Bcast::Lhs { reduce_leading(&ga, la) } else { ga };
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let gb = if *bc == Bcast::Rhs { reduce_leading(&gb, lb) } else { gb };
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|x| c * x).collect()),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::MulScalarVar(a, s) => {
            let (na, ns) = (val(*a), val(*s));
            let c = ns.data[0];
            if wants(*a) {
                accumulate(nodes, grads, *a, g.iter().map(|x| c * x).collect());
            }
            if wants(*s) {
                let ds: f64 = g.iter().zip(&na.data).map(|(x, y)| x * y).sum();
                accumulate(nodes, grads, *s, vec![ds]);
            }
        }
        Op::Relu(a) => {
            let na = val(*a);
            let d = g.iter().zip(&na.data).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = g.iter().zip(&node.data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Exp(a) => {
            let d = g.iter().zip(&node.data).map(|(gv, y)| gv * y).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Log(a) => {
            let na = val(*a);
            let d = g.iter().zip(&na.data).map(|(gv, x)| gv / x).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Sqrt(a) => {
            let d = g
                .iter()
                .zip(&node.data)
                .map(|(gv, &y)| if y > 0.0 { 0.5 * gv / y } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Softplus(a) => {
            let na = val(*a);
            let d = g.iter().zip(&na.data).map(|(gv, &x)| gv * sigmoid(x)).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::GradReverse(a, s) => accumulate(nodes, grads, *a, g.iter().map(|x| -s * x).collect()),
        Op::SoftmaxLast(a) => {
            let (_, last) = split_last(&node.shape);
            let mut d = vec![0.0; g.len()];
            for ((gr, yr), dr) in g.chunks(last).zip(node.data.chunks(last)).zip(d.chunks_mut(last)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = y * (gv - dot);
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::LogSoftmaxLast(a) => {
            let (_, last) = split_last(&node.shape);
            let mut d = vec![0.0; g.len()];
            for ((gr, yr), dr) in g.chunks(last).zip(node.data.chunks(last)).zip(d.chunks_mut(last)) {
                let total: f64 = gr.iter().sum();
                for ((o, gv), y) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = gv - y.exp() * total;
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::LogSumExpLast(a) => {
            let na = val(*a);
            let (_, last) = split_last(&na.shape);
            let mut d = vec![0.0; na.data.len()];
            for ((row, dr), (&gv, &lse)) in na.data.chunks(last).zip(d.chunks_mut(last)).zip(g.iter().zip(&node.data)) {
                for (o, x) in dr.iter_mut().zip(row) {
                    *o = gv * (x - lse).exp();
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::RowNormalize(a) => {
            let na = val(*a);
            let (_, last) = split_last(&na.shape);
            let mut d = vec![0.0; na.data.len()];
            for (((row, yr), gr), dr) in na
                .data
                .chunks(last)
                .zip(node.data.chunks(last))
                .zip(g.chunks(last))
                .zip(d.chunks_mut(last))
            {
                let s: f64 = row.iter().sum();
                if s == 0.0 {
                    continue;
                }
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for (o, gv) in dr.iter_mut().zip(gr) {
                    *o = (gv - dot) / s;
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::PairwiseSqDist(a, b) => {
            let (na, nb) = (val(*a), val(*b));
            let (n, m, dim) = (na.shape[0], nb.shape[0], na.shape[1]);
            let mut da = vec![0.0; n * dim];
            let mut db = vec![0.0; m * dim];
            for i in 0..n {
                for j in 0..m {
                    let gij = g[i * m + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..dim {
                        let diff = 2.0 * gij * (na.data[i * dim + k] - nb.data[j * dim + k]);
                        da[i * dim + k] += diff;
                        db[j * dim + k] -= diff;
                    }
                }
            }
            if wants(*a) {
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::CosineRows(a, b) => {
            let (na, nb) = (val(*a), val(*b));
            let dim = na.shape[1];
            let mut da = vec![0.0; na.data.len()];
            let mut db = vec![0.0; nb.data.len()];
            for (i, &gv) in g.iter().enumerate() {
                let x = &na.data[i * dim..(i + 1) * dim];
                let y = &nb.data[i * dim..(i + 1) * dim];
                let (c, nx, ny) = cosine_parts(x, y);
                if nx == 0.0 || ny == 0.0 {
                    continue;
                }
                for k in 0..dim {
                    da[i * dim + k] = gv * (y[k] / (nx * ny) - c * x[k] / (nx * nx));
                    db[i * dim + k] = gv * (x[k] / (nx * ny) - c * y[k] / (ny * ny));
                }
            }
            if wants(*a) {
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Sum(a) => {
            let len = val(*a).data.len();
            accumulate(nodes, grads, *a, vec![g[0]; len]);
        }
        Op::Mean(a) => {
            let len = val(*a).data.len();
            accumulate(nodes, grads, *a, vec![g[0] / len as f64; len]);
        }
        Op::SumLast(a) => {
            let na = val(*a);
            let (_, last) = split_last(&na.shape);
            let d = g.iter().flat_map(|&gv| std::iter::repeat(gv).take(last)).collect();
            accumulate(nodes, grads, *a, d);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::SelectRows(a, index) => {
            let na = val(*a);
            let stride = na.data.len() / na.shape[0];
            let mut d = vec![0.0; na.data.len()];
            for (r, &i) in index.iter().enumerate() {
                for k in 0..stride {
                    d[i * stride + k] += g[r * stride + k];
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).data.len();
                if wants(*p) {
                    accumulate(nodes, grads, *p, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::PickLast(a, index) => {
            let na = val(*a);
            let c = na.shape[1];
            let mut d = vec![0.0; na.data.len()];
            for (i, (&j, &gv)) in index.iter().zip(g).enumerate() {
                d[i * c + j] += gv;
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::WeightedPool(feats, mask) => {
            let (nf, nm) = (val(*feats), val(*mask));
            let (n, p, f) = (nf.shape[0], nf.shape[1], nf.shape[2]);
            let mut df = vec![0.0; nf.data.len()];
            let mut dm = vec![0.0; nm.data.len()];
            for s in 0..n {
                let m = &nm.data[s * p..(s + 1) * p];
                let total: f64 = m.iter().sum();
                let gs = &g[s * f..(s + 1) * f];
                let out = &node.data[s * f..(s + 1) * f];
                for (c, &w) in m.iter().enumerate() {
                    let base = (s * p + c) * f;
                    let cell = &nf.data[base..base + f];
                    let mut acc = 0.0;
                    for k in 0..f {
                        df[base + k] = gs[k] * w / total;
                        acc += gs[k] * (cell[k] - out[k]);
                    }
                    dm[s * p + c] = acc / total;
                }
            }
            if wants(*feats) {
                accumulate(nodes, grads, *feats, df);
            }
            if wants(*mask) {
                accumulate(nodes, grads, *mask, dm);
            }
        }
    }
}
