//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! A [`Graph`] records each primitive as it is evaluated. Leaves are either
//! owned tensors or borrowed parameters; only leaves marked `requires_grad`
//! (and nodes depending on them) receive gradient storage during
//! [`Graph::backward`].

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::gradcore::kernels;
use crate::gradcore::tensor::Tensor;
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon added to the variance inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Pick { .. } => "pick",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a 2-D operand, got {s:?}"))),
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Row count and width of the last axis, for row-wise ops on vectors or matrices.
fn row_view(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_C);
    let k = T::lit(GELU_K);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

pub(crate) fn softmax_rows<T: Real>(data: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Real>(data: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = src.iter().map(|&s| (s - max).exp()).sum();
        let lse = max + total.ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s - lse;
        }
    }
    out
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// An owned leaf. Marked leaves get gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// A borrowed leaf, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = two_d("matmul", ta)?;
        let (k2, m) = two_d("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", ta.shape(), tb.shape())));
        }
        let out = Tensor::new(vec![n, m], kernels::matmul(ta.data(), tb.data(), n, k, m))?;
        self.derived(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`; with `b` a `d_out × d_in` weight this is the row-major linear map.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = two_d("matmul_bt", ta)?;
        let (m, k2) = two_d("matmul_bt", tb)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} · {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::new(vec![n, m], kernels::matmul_bt(ta.data(), tb.data(), n, k, m))?;
        self.derived(out, Op::MatMulBt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.derived(out, Op::Add(a, b), &[a, b])
    }

    /// Adds the vector `row` to every row of the 2-D `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, c) = two_d("add_row", ta)?;
        if tr.shape() != [c] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, &b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.derived(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.derived(out, Op::Scale(a, c), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.derived(out, Op::Mul(a, b), &[a, b])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, c) = two_d("gather", tt)?;
        if ids.is_empty() {
            return Err(Error::shape("gather", "no ids"));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "gather",
                format!("id {bad} out of range for {:?}", tt.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        self.derived(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, w) = row_view(tx.shape());
        if tg.shape() != [w] || tb.shape() != [w] {
            return Err(Error::shape(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let eps = T::lit(LAYERNORM_EPS);
        let wn = T::from_usize(w).expect("width");
        let mut xhat = vec![T::zero(); tx.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let src = &tx.data()[r * w..(r + 1) * w];
            let mean = src.iter().copied().sum::<T>() / wn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..w {
                let h = (src[j] - mean) * is;
                xhat[r * w + j] = h;
                data[r * w + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.derived(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Tanh-form GeLU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.derived(out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, w) = row_view(tx.shape());
        let out = Tensor::new(tx.shape().to_vec(), softmax_rows(tx.data(), w))?;
        self.derived(out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, w) = row_view(tx.shape());
        let out = Tensor::new(tx.shape().to_vec(), log_softmax_rows(tx.data(), w))?;
        self.derived(out, Op::LogSoftmax(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.ln());
        self.derived(out, Op::Log(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::from_usize(t.len()).expect("len");
        self.derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Concatenates two 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = two_d("concat", ta)?;
        let (rb, cb) = two_d("concat", tb)?;
        let out = match axis {
            0 if ca == cb => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::new(vec![ra + rb, ca], d)?
            }
            1 if ra == rb => {
                let mut d = Vec::with_capacity(ta.len() + tb.len());
                for r in 0..ra {
                    d.extend_from_slice(ta.row(r));
                    d.extend_from_slice(tb.row(r));
                }
                Tensor::new(vec![ra, ca + cb], d)?
            }
            _ => {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} ‖ {:?} along axis {axis}", ta.shape(), tb.shape()),
                ))
            }
        };
        self.derived(out, Op::Concat { a, b, axis }, &[a, b])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = two_d("slice_rows", tx)?;
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let out = Tensor::new(vec![len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        self.derived(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = two_d("slice_cols", tx)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let mut d = Vec::with_capacity(r * len);
        for i in 0..r {
            d.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], d)?;
        self.derived(out, Op::SliceCols { x, start }, &[x])
    }

    /// Replaces entries where `mask` is true by `fill` (which must be finite).
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: T) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} for {:?}", mask.len(), tx.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.derived(out, Op::MaskedFill { x, mask: mask.to_vec() }, &[x])
    }

    /// `out[i] = x[i, idx[i]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = two_d("pick", tx)?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::shape(
                "pick",
                format!("{} indices into {:?}", idx.len(), tx.shape()),
            ));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| tx.at(i, j)).collect();
        let out = Tensor::new(vec![r], data)?;
        self.derived(out, Op::Pick { x, idx: idx.to_vec() }, &[x])
    }

    /// `Σ w_i x_i` with constant weights (no gradient flows into `w`).
    pub fn weighted_sum(&mut self, x: Var, w: &[T]) -> Result<Var> {
        let tx = self.value(x);
        if w.len() != tx.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {:?}", w.len(), tx.shape()),
            ));
        }
        let s = tx.data().iter().zip(w).map(|(&a, &b)| a * b).sum();
        self.derived(Tensor::scalar(s), Op::WeightedSum { x, w: w.to_vec() }, &[x])
    }

    /// Gradients of the scalar `out` with respect to every node that requires one.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        let tout = self.value(out);
        if tout.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", tout.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[out.0] = Some(Tensor::full(tout.shape(), T::one()));

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
            } else {
                self.propagate(node, &dy, &mut grads)?;
            }
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a, T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                if self.wants(*a) {
                    let da = kernels::matmul_bt(dy.data(), tb.data(), n, m, k);
                    acc(grads, *a, Tensor::new(vec![n, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * m];
                    kernels::matmul_at_acc(&mut db, ta.data(), dy.data(), n, k, m);
                    acc(grads, *b, Tensor::new(vec![k, m], db)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.rows();
                if self.wants(*a) {
                    let da = kernels::matmul(dy.data(), tb.data(), n, m, k);
                    acc(grads, *a, Tensor::new(vec![n, k], da)?)?;
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); m * k];
                    kernels::matmul_at_acc(&mut db, dy.data(), ta.data(), n, m, k);
                    acc(grads, *b, Tensor::new(vec![m, k], db)?)?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, dy.clone())?;
                }
                if self.wants(*b) {
                    acc(grads, *b, dy.clone())?;
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(grads, *a, dy.clone())?;
                }
                if self.wants(*row) {
                    let c = dy.cols();
                    let mut g = vec![T::zero(); c];
                    for chunk in dy.data().chunks(c) {
                        for (s, &d) in g.iter_mut().zip(chunk) {
                            *s += d;
                        }
                    }
                    acc(grads, *row, Tensor::vector(g))?;
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    acc(grads, *a, dy.map(|d| d * *c))?;
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let g = dy.data().iter().zip(tb.data()).map(|(&d, &v)| d * v).collect();
                    acc(grads, *a, Tensor::new(dy.shape().to_vec(), g)?)?;
                }
                if self.wants(*b) {
                    let g = dy.data().iter().zip(ta.data()).map(|(&d, &v)| d * v).collect();
                    acc(grads, *b, Tensor::new(dy.shape().to_vec(), g)?)?;
                }
            }
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let tt = self.value(*table);
                    let c = tt.cols();
                    let mut g = Tensor::zeros(tt.shape());
                    let gd = g.data_mut();
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..c {
                            gd[i * c + j] += dy.data()[r * c + j];
                        }
                    }
                    acc(grads, *table, g)?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let tg = self.value(*gamma);
                let (rows, w) = row_view(dy.shape());
                let wn = T::from_usize(w).expect("width");
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for (r, &s) in inv_std.iter().enumerate().take(rows) {
                        let base = r * w;
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..w {
                            let dh = dy.data()[base + j] * tg.data()[j];
                            mean_d += dh;
                            mean_dh += dh * xhat[base + j];
                        }
                        mean_d /= wn;
                        mean_dh /= wn;
                        for j in 0..w {
                            let dh = dy.data()[base + j] * tg.data()[j];
                            dx[base + j] = s * (dh - mean_d - xhat[base + j] * mean_dh);
                        }
                    }
                    acc(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?)?;
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); w];
                    let mut db = vec![T::zero(); w];
                    for r in 0..rows {
                        for j in 0..w {
                            let d = dy.data()[r * w + j];
                            dg[j] += d * xhat[r * w + j];
                            db[j] += d;
                        }
                    }
                    if self.wants(*gamma) {
                        acc(grads, *gamma, Tensor::vector(dg))?;
                    }
                    if self.wants(*beta) {
                        acc(grads, *beta, Tensor::vector(db))?;
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let g = dy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&d, &v)| d * gelu_grad_scalar(v))
                    .collect();
                acc(grads, *x, Tensor::new(dy.shape().to_vec(), g)?)?;
            }
            Op::Softmax(x) => {
                let (_, w) = row_view(dy.shape());
                let mut g = vec![T::zero(); dy.len()];
                for ((dr, yr), gr) in dy.data().chunks(w).zip(y.data().chunks(w)).zip(g.chunks_mut(w)) {
                    let dot: T = dr.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                    for ((o, &d), &p) in gr.iter_mut().zip(dr).zip(yr) {
                        *o = p * (d - dot);
                    }
                }
                acc(grads, *x, Tensor::new(dy.shape().to_vec(), g)?)?;
            }
            Op::LogSoftmax(x) => {
                let (_, w) = row_view(dy.shape());
                let mut g = vec![T::zero(); dy.len()];
                for ((dr, yr), gr) in dy.data().chunks(w).zip(y.data().chunks(w)).zip(g.chunks_mut(w)) {
                    let total: T = dr.iter().copied().sum();
                    for ((o, &d), &l) in gr.iter_mut().zip(dr).zip(yr) {
                        *o = d - l.exp() * total;
                    }
                }
                acc(grads, *x, Tensor::new(dy.shape().to_vec(), g)?)?;
            }
            Op::Log(x) => {
                let tx = self.value(*x);
                let g = dy.data().iter().zip(tx.data()).map(|(&d, &v)| d / v).collect();
                acc(grads, *x, Tensor::new(dy.shape().to_vec(), g)?)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(grads, *x, Tensor::full(&shape, dy.item()))?;
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let n = T::from_usize(tx.len()).expect("len");
                acc(grads, *x, Tensor::full(tx.shape(), dy.item() / n))?;
            }
            Op::Concat { a, b, axis } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (ga, gb) = if *axis == 0 {
                    let split = ta.len();
                    (dy.data()[..split].to_vec(), dy.data()[split..].to_vec())
                } else {
                    let (ca, cb) = (ta.cols(), tb.cols());
                    let mut ga = Vec::with_capacity(ta.len());
                    let mut gb = Vec::with_capacity(tb.len());
                    for r in 0..ta.rows() {
                        let row = dy.row(r);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..ca + cb]);
                    }
                    (ga, gb)
                };
                if self.wants(*a) {
                    acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?)?;
                }
                if self.wants(*b) {
                    acc(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?)?;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut g = Tensor::zeros(tx.shape());
                g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                acc(grads, *x, g)?;
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), dy.cols());
                let mut g = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    g.data_mut()[r * c + start..r * c + start + len].copy_from_slice(dy.row(r));
                }
                acc(grads, *x, g)?;
            }
            Op::MaskedFill { x, mask } => {
                let g = dy
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&d, &m)| if m { T::zero() } else { d })
                    .collect();
                acc(grads, *x, Tensor::new(dy.shape().to_vec(), g)?)?;
            }
            Op::Pick { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut g = Tensor::zeros(tx.shape());
                for (i, &j) in idx.iter().enumerate() {
                    g.data_mut()[i * c + j] = dy.data()[i];
                }
                acc(grads, *x, g)?;
            }
            Op::WeightedSum { x, w } => {
                let tx = self.value(*x);
                let d = dy.item();
                let g = w.iter().map(|&wi| wi * d).collect();
                acc(grads, *x, Tensor::new(tx.shape().to_vec(), g)?)?;
            }
        }
        Ok(())
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    /// The gradient of a leaf, or `None` if it did not participate or is unmarked.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradients for each of `vars`, substituting zeros (with a warning) for any
    /// leaf that received none.
    pub fn wrt(&self, graph: &Graph<'_, T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|&v| match self.get(v) {
                Some(g) => g.clone(),
                None => {
                    log::warn!("node {} received no gradient; returning zeros", v.0);
                    Tensor::zeros(graph.value(v).shape())
                }
            })
            .collect()
    }
}
