use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Vec<Var>, usize),
    SliceCols(Var, usize),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    /// Keeps the forward sigmoid for the backward pass.
    Silu(Var, Rc<[f64]>),
    Square(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Gather(Var, Rc<[usize]>),
    ScatterAdd(Var, Rc<[usize]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic record of a forward computation. Single-threaded; independent
/// tapes may run on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    if t.shape().len() != 2 {
        return Err(DiffError::Invalid {
            op,
            msg: format!("expected a matrix, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `c (m×n) += a (m×k) · b (k×n)` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: every caller passes buffers whose extents cover the strided
    // index ranges of an m×k, k×n and m×n matrix respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `exp` for `|x| <= 708` without branches, so slice loops vectorize.
/// Range reduction `x = k ln 2 + r` with `|r| <= ln2 / 2`, then a degree 13
/// Taylor polynomial; relative error stays within a few ulp.
#[inline(always)]
fn exp_bounded(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let k = (x * std::f64::consts::LOG2_E + ROUND) - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let scale = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    p * scale
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp_bounded((-x).clamp(-708.0, 708.0)))
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().map(|&v| f(v)).collect(),
            }
        };
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    fn binary_same(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape != y.shape {
                return Err(shape_err(name, x, y));
            }
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_same("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a (r×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, r) = (&nodes[a.0].value, &nodes[row.0].value);
            let (_, c) = require_matrix("add_row", x)?;
            if r.numel() != c {
                return Err(shape_err("add_row", x, r));
            }
            let mut data = x.data.clone();
            for chunk in data.chunks_mut(c) {
                for (d, b) in chunk.iter_mut().zip(&r.data) {
                    *d += b;
                }
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// `a (r×c) ⊙ col (r×1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, s) = (&nodes[a.0].value, &nodes[col.0].value);
            let (r, c) = require_matrix("mul_col", x)?;
            if s.numel() != r {
                return Err(shape_err("mul_col", x, s));
            }
            let mut data = x.data.clone();
            for (chunk, k) in data.chunks_mut(c.max(1)).zip(&s.data) {
                chunk.iter_mut().for_each(|d| *d *= k);
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = require_matrix("matmul", x)?;
            let (k2, n) = require_matrix("matmul", y)?;
            if k != k2 {
                return Err(shape_err("matmul", x, y));
            }
            let mut out = vec![0.0; m * n];
            gemm(
                m, k, n, &x.data, k as isize, 1, &y.data, n as isize, 1, &mut out,
            );
            Tensor {
                shape: vec![m, n],
                data: out,
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            Tensor::scalar(x.data.iter().sum::<f64>() / x.numel().max(1) as f64)
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_rows(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let x = self.value(a);
            let (r, c) = require_matrix("sum_rows", &x)?;
            let data = (0..r)
                .map(|i| x.data[i * c..(i + 1) * c].iter().sum())
                .collect();
            Tensor {
                shape: vec![r, 1],
                data,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumRows(a), rg))
    }

    /// Concatenation along `axis` (0: rows, 1: columns) of matrices.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::Invalid {
                op: "concat",
                msg: format!("{} parts along axis {axis}", parts.len()),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            let (r0, c0) = require_matrix("concat", first)?;
            let mut dims = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                let (r, c) = require_matrix("concat", t)?;
                if (axis == 1 && r != r0) || (axis == 0 && c != c0) {
                    return Err(shape_err("concat", first, t));
                }
                dims.push((r, c));
            }
            if axis == 0 {
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for p in parts {
                    data.extend_from_slice(&nodes[p.0].value.data);
                }
                Tensor {
                    shape: vec![rows, c0],
                    data,
                }
            } else {
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for (p, &(_, c)) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&nodes[p.0].value.data[i * c..(i + 1) * c]);
                    }
                }
                Tensor {
                    shape: vec![r0, cols],
                    data,
                }
            }
        };
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let value = {
            let x = self.value(a);
            let (r, c) = require_matrix("slice_cols", &x)?;
            if start + len > c {
                return Err(DiffError::Invalid {
                    op: "slice_cols",
                    msg: format!("columns {start}..{} out of {c}", start + len),
                });
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
            }
            Tensor {
                shape: vec![r, len],
                data,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Var {
        let (value, sig) = {
            let x = self.value(a);
            let mut sig = vec![0.0; x.data.len()];
            for (s, &v) in sig.iter_mut().zip(x.data.iter()) {
                *s = sigmoid(v);
            }
            let sig: Rc<[f64]> = sig.into();
            let data = x.data.iter().zip(sig.iter()).map(|(v, s)| v * s).collect();
            (
                Tensor {
                    shape: x.shape.clone(),
                    data,
                },
                sig,
            )
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a, sig), rg)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Euclidean norm of each row, `sqrt(Σ x² + eps)`: `r×c → r×1`.
    pub fn norm_rows(&self, a: Var, eps: f64) -> Result<Var, DiffError> {
        let sq = self.square(a);
        let s = self.sum_rows(sq)?;
        let s = if eps != 0.0 { self.add_scalar(s, eps) } else { s };
        Ok(self.sqrt(s))
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let x = self.value(a);
            let (r, c) = require_matrix("softmax_rows", &x)?;
            let mut data = x.data.clone();
            for i in 0..r {
                let row = &mut data[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            Tensor {
                shape: x.shape.clone(),
                data,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Stable `log Σ_j exp(x_ij)`: `r×c → r×1`.
    pub fn logsumexp_rows(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let x = self.value(a);
            let (r, c) = require_matrix("logsumexp_rows", &x)?;
            let data = (0..r)
                .map(|i| {
                    let row = &x.data[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor {
                shape: vec![r, 1],
                data,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSumExpRows(a), rg))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var, DiffError> {
        let lse = self.logsumexp_rows(a)?;
        let c = self.value(a).cols();
        let ones = self.constant(Tensor::new(vec![1, c], vec![1.0; c])?);
        let spread = self.matmul(lse, ones)?;
        self.sub(a, spread)
    }

    /// Row gather: `out[i] = a[idx[i]]`.
    pub fn gather_rows(&self, a: Var, idx: Rc<[usize]>) -> Result<Var, DiffError> {
        let value = {
            let x = self.value(a);
            let (r, c) = require_matrix("gather_rows", &x)?;
            if let Some(bad) = idx.iter().find(|&&i| i >= r) {
                return Err(DiffError::Invalid {
                    op: "gather_rows",
                    msg: format!("index {bad} out of {r} rows"),
                });
            }
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
            }
            Tensor {
                shape: vec![idx.len(), c],
                data,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Gather(a, idx), rg))
    }

    /// Row scatter-add into `rows` output rows: `out[idx[i]] += a[i]`.
    pub fn scatter_add_rows(
        &self,
        a: Var,
        idx: Rc<[usize]>,
        rows: usize,
    ) -> Result<Var, DiffError> {
        let value = {
            let x = self.value(a);
            let (r, c) = require_matrix("scatter_add_rows", &x)?;
            if r != idx.len() {
                return Err(DiffError::Invalid {
                    op: "scatter_add_rows",
                    msg: format!("{r} rows but {} indices", idx.len()),
                });
            }
            let mut data = vec![0.0; rows * c];
            for (i, &t) in idx.iter().enumerate() {
                if t >= rows {
                    return Err(DiffError::Invalid {
                        op: "scatter_add_rows",
                        msg: format!("index {t} out of {rows} rows"),
                    });
                }
                for j in 0..c {
                    data[t * c + j] += x.data[i * c + j];
                }
            }
            Tensor {
                shape: vec![rows, c],
                data,
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::ScatterAdd(a, idx), rg))
    }

    /// `x W + b` for `x: r×i`, `W: i×o`, `b: 1×o`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let nodes = self.nodes.borrow();
        grads.get(v.0).and_then(|g| {
            g.as_ref().map(|g| Tensor {
                shape: nodes[v.0].value.shape.clone(),
                data: g.clone(),
            })
        })
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Propagates d(loss)/d(·) to every differentiable leaf, adding into the
    /// accumulated leaf gradients.
    pub fn backward(&self, loss: Var) -> Result<(), DiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(root.value.shape.clone()));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);

        fn acc(g: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: Vec<f64>) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut g[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = &node.value;
            match &node.op {
                Op::Leaf => {
                    g[i] = Some(gout);
                }
                Op::Add(a, b) => {
                    acc(&mut g, &nodes, *b, gout.clone());
                    acc(&mut g, &nodes, *a, gout);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, &nodes, *b, gout.iter().map(|x| -x).collect());
                    acc(&mut g, &nodes, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                    let ga = gout.iter().zip(y).map(|(g, y)| g * y).collect();
                    let gb = gout.iter().zip(x).map(|(g, x)| g * x).collect();
                    acc(&mut g, &nodes, *a, ga);
                    acc(&mut g, &nodes, *b, gb);
                }
                Op::Div(a, b) => {
                    let y = &nodes[b.0].value.data;
                    let ga = gout.iter().zip(y).map(|(g, y)| g / y).collect();
                    let gb = gout
                        .iter()
                        .zip(&val.data)
                        .zip(y)
                        .map(|((g, q), y)| -g * q / y)
                        .collect();
                    acc(&mut g, &nodes, *a, ga);
                    acc(&mut g, &nodes, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let c = val.cols();
                    let mut gr = vec![0.0; c];
                    for chunk in gout.chunks(c.max(1)) {
                        gr.iter_mut().zip(chunk).for_each(|(s, x)| *s += x);
                    }
                    acc(&mut g, &nodes, *row, gr);
                    acc(&mut g, &nodes, *a, gout);
                }
                Op::MulCol(a, col) => {
                    let c = val.cols().max(1);
                    let x = &nodes[a.0].value.data;
                    let s = &nodes[col.0].value.data;
                    let gc = gout
                        .chunks(c)
                        .zip(x.chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(p, q)| p * q).sum())
                        .collect();
                    let mut ga = gout;
                    for (chunk, k) in ga.chunks_mut(c).zip(s) {
                        chunk.iter_mut().for_each(|d| *d *= k);
                    }
                    acc(&mut g, &nodes, *col, gc);
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Scale(a, s) => {
                    acc(&mut g, &nodes, *a, gout.iter().map(|x| x * s).collect());
                }
                Op::AddScalar(a) => acc(&mut g, &nodes, *a, gout),
                Op::MatMul(a, b) => {
                    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (x.shape[0], x.shape[1]);
                    let n = y.shape[1];
                    if nodes[a.0].requires_grad {
                        // dA = G Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, &gout, n as isize, 1, &y.data, 1, n as isize, &mut ga);
                        acc(&mut g, &nodes, *a, ga);
                    }
                    if nodes[b.0].requires_grad {
                        // dB = Aᵀ G
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, &x.data, 1, k as isize, &gout, n as isize, 1, &mut gb);
                        acc(&mut g, &nodes, *b, gb);
                    }
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.numel();
                    acc(&mut g, &nodes, *a, vec![gout[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.numel();
                    acc(&mut g, &nodes, *a, vec![gout[0] / n.max(1) as f64; n]);
                }
                Op::SumRows(a) => {
                    let c = nodes[a.0].value.cols();
                    let ga = gout
                        .iter()
                        .flat_map(|&x| std::iter::repeat(x).take(c))
                        .collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let cols = val.cols();
                    let mut offset = 0;
                    for p in parts {
                        let t = &nodes[p.0].value;
                        let (r, c) = (t.shape[0], t.shape[1]);
                        let gp = if *axis == 0 {
                            gout[offset * cols..(offset + r) * cols].to_vec()
                        } else {
                            let mut d = Vec::with_capacity(r * c);
                            for i in 0..r {
                                d.extend_from_slice(
                                    &gout[i * cols + offset..i * cols + offset + c],
                                );
                            }
                            d
                        };
                        offset += if *axis == 0 { r } else { c };
                        acc(&mut g, &nodes, *p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[a.0].value;
                    let (r, c) = (src.shape[0], src.shape[1]);
                    let len = val.cols();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .copy_from_slice(&gout[i * len..(i + 1) * len]);
                    }
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = gout.iter().zip(&val.data).map(|(g, y)| g * y).collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Log(a) => {
                    let x = &nodes[a.0].value.data;
                    let ga = gout.iter().zip(x).map(|(g, x)| g / x).collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = gout
                        .iter()
                        .zip(&val.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Silu(a, sig) => {
                    let x = &nodes[a.0].value.data;
                    let ga = gout
                        .iter()
                        .zip(x)
                        .zip(sig.iter())
                        .map(|((g, &x), &s)| g * s * (1.0 + x * (1.0 - s)))
                        .collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Square(a) => {
                    let x = &nodes[a.0].value.data;
                    let ga = gout.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = gout
                        .iter()
                        .zip(&val.data)
                        .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                        .collect();
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let c = val.cols().max(1);
                    let mut ga = Vec::with_capacity(gout.len());
                    for (gr, yr) in gout.chunks(c).zip(val.data.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        ga.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = &nodes[a.0].value;
                    let c = x.cols().max(1);
                    let mut ga = Vec::with_capacity(x.numel());
                    for ((xr, l), gr) in x.data.chunks(c).zip(&val.data).zip(&gout) {
                        ga.extend(xr.iter().map(|xi| gr * (xi - l).exp()));
                    }
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let src = &nodes[a.0].value;
                    let c = src.cols();
                    let mut ga = vec![0.0; src.numel()];
                    for (i, &s) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[s * c + j] += gout[i * c + j];
                        }
                    }
                    acc(&mut g, &nodes, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let c = val.cols();
                    let mut ga = Vec::with_capacity(idx.len() * c);
                    for &t in idx.iter() {
                        ga.extend_from_slice(&gout[t * c..(t + 1) * c]);
                    }
                    acc(&mut g, &nodes, *a, ga);
                }
            }
        }

        let mut store = self.grads.borrow_mut();
        if store.len() < nodes.len() {
            store.resize(nodes.len(), None);
        }
        for (i, gi) in g.into_iter().enumerate() {
            if let (Some(gi), Op::Leaf) = (gi, &nodes[i].op) {
                match &mut store[i] {
                    Some(s) => s.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }
}
