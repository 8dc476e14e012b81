//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in construction order. [`Graph::backward`]
//! walks the tape in reverse, so gradient accumulation order is fixed by
//! construction order and two runs over the same graph are bit-identical.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to every `log` input.
pub const LOG_EPS: f64 = 1e-7;

/// Smallest and largest values a sigmoid output may take.
const SIGMOID_LO: f64 = f64::MIN_POSITIVE;
const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable operation kinds, used in diagnostics and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    MatMul,
    Conv2d,
    Upsample2x,
    MaxPool2x,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Sum,
    Mean,
    GatherRows,
    PairwiseDistance,
    Concat,
    Slice,
    Reshape,
    Transpose,
    RowLogSumExp,
    NormalizeRows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var },
    Upsample2x(Var),
    MaxPool2x { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    PairwiseDistance(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    RowLogSumExp { x: Var, mask: Option<Vec<bool>> },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Affine { .. } => OpKind::Affine,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::MaxPool2x { .. } => OpKind::MaxPool2x,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Log(_) => OpKind::Log,
            Op::Exp(_) => OpKind::Exp,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::PairwiseDistance(..) => OpKind::PairwiseDistance,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::RowLogSumExp { .. } => OpKind::RowLogSumExp,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn expect_ndim(op: &'static str, t: &Tensor, ndim: usize) -> Result<()> {
    if t.ndim() != ndim {
        return Err(Error::dim(
            op,
            format!("expected {ndim}-d operand, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_LO, SIGMOID_HI)
}

fn clamp_prob(x: f64) -> f64 {
    x.clamp(LOG_EPS, 1.0 - LOG_EPS)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Operation kinds of every recorded node, in construction order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    /// Leaf node. Trainable leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, make(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
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

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Logistic function; outputs lie strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Natural log of the input clamped to `[LOG_EPS, 1 - LOG_EPS]`.
    ///
    /// The backward pass divides by the same clamped value.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| clamp_prob(v).ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_ndim("matmul", ta, 2)?;
        expect_ndim("matmul", tb, 2)?;
        let (n, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, m) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                for (o, &bv) in orow.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1, zero-padded ("same") 2-d convolution.
    ///
    /// `x`: `[C, H, W]`, `w`: `[O, C, K, K]` with odd `K`, `b`: `[O]`; output `[O, H, W]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        expect_ndim("conv2d", tx, 3)?;
        expect_ndim("conv2d", tw, 4)?;
        let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (o, ci, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if ci != c || kh != kw || kh % 2 == 0 || tb.shape() != [o] {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?} are incompatible",
                    tx.shape(),
                    tw.shape(),
                    tb.shape()
                ),
            ));
        }
        let out = conv2d_forward(tx.data(), tw.data(), tb.data(), c, h, wd, o, kh);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![o, h, wd], out)?, Op::Conv2d { x, w, b }, rg))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_ndim("upsample2x", tx, 3)?;
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (h2, w2) = (2 * h, 2 * w);
        let src = tx.data();
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let orow = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
                for (xx, o) in orow.iter_mut().enumerate() {
                    *o = srow[xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, h2, w2], out)?, Op::Upsample2x(x), rg))
    }

    /// 2x2 max pooling of `[C, H, W]` with even `H` and `W`. Ties pick the first maximum.
    pub fn maxpool2x(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_ndim("maxpool2x", tx, 3)?;
        let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(
                "maxpool2x",
                format!("spatial extents must be even, got {:?}", tx.shape()),
            ));
        }
        let (h2, w2) = (h / 2, w / 2);
        let src = tx.data();
        let mut out = Vec::with_capacity(c * h2 * w2);
        let mut argmax = Vec::with_capacity(c * h2 * w2);
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let base = (ch * h + 2 * y) * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, h2, w2], out)?,
            Op::MaxPool2x { x, argmax },
            rg,
        ))
    }

    /// Selects rows of a `[R, E]` matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        expect_ndim("gather_rows", tx, 2)?;
        let (r, e) = (tx.shape()[0], tx.shape()[1]);
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} outside {:?}", tx.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * e);
        for &i in rows {
            out.extend_from_slice(&tx.data()[i * e..(i + 1) * e]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), e], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Euclidean distances between every row of `a: [P, E]` and every row of `b: [Q, E]`.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_ndim("pairwise_distance", ta, 2)?;
        expect_ndim("pairwise_distance", tb, 2)?;
        let (p, e) = (ta.shape()[0], ta.shape()[1]);
        let (q, e2) = (tb.shape()[0], tb.shape()[1]);
        if e != e2 {
            return Err(Error::dim(
                "pairwise_distance",
                format!("row widths differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            let ra = &ta.data()[i * e..(i + 1) * e];
            for j in 0..q {
                let rb = &tb.data()[j * e..(j + 1) * e];
                let d2: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                out.push(d2.sqrt());
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![p, q], out)?,
            Op::PairwiseDistance(a, b),
            rg,
        ))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("trailing extents {:?} vs {:?}", &t.shape()[1..], tail),
                ));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Range `[start, end)` along the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_leading(start, end)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape).map_err(|_| {
            Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.value(x).shape()),
            )
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_ndim("transpose", tx, 2)?;
        let (r, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tx.data()[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    /// Numerically stable `log Σ_j exp(x[i, j])` per row of `[R, S]`, restricted
    /// to entries where `mask[i * S + j]` is true. Every row needs one live entry.
    pub fn row_logsumexp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let tx = self.value(x);
        expect_ndim("row_logsumexp", tx, 2)?;
        let (r, s) = (tx.shape()[0], tx.shape()[1]);
        if let Some(m) = &mask {
            if m.len() != r * s {
                return Err(Error::dim(
                    "row_logsumexp",
                    format!("mask has {} entries for {:?}", m.len(), tx.shape()),
                ));
            }
        }
        let live = |i: usize, j: usize| mask.as_ref().is_none_or(|m| m[i * s + j]);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &tx.data()[i * s..(i + 1) * s];
            let max = (0..s)
                .filter(|&j| live(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::dim(
                    "row_logsumexp",
                    format!("row {i} has no unmasked entries"),
                ));
            }
            let acc: f64 = (0..s)
                .filter(|&j| live(i, j))
                .map(|j| (row[j] - max).exp())
                .sum();
            out.push(max + acc.ln());
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(out), Op::RowLogSumExp { x, mask }, rg))
    }

    /// Scales each row of `[R, E]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        expect_ndim("normalize_rows", tx, 2)?;
        let (r, e) = (tx.shape()[0], tx.shape()[1]);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * e);
        for i in 0..r {
            let row = &tx.data()[i * e..(i + 1) * e];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, e], out)?,
            Op::NormalizeRows { x, norms },
            rg,
        ))
    }

    /// Gradients of the scalar `root` with respect to all nodes that require one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad).map(|g| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g)
                        .expect("gradient matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                }
            }
            Op::Affine { x, scale } => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += scale * s);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Log(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] / clamp_prob(vx[i]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * out[i];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[i * m + j] * bd[p * m + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..n {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..m {
                                gb[p * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (o, k) = (tw.shape()[0], tw.shape()[2]);
                if let Some(gb) = self.acc(grads, *b) {
                    for oc in 0..o {
                        gb[oc] += g[oc * h * wd..(oc + 1) * h * wd].iter().sum::<f64>();
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    conv2d_grad_weight(tx.data(), g, gw, c, h, wd, o, k);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    conv2d_grad_input(tw.data(), g, gx, c, h, wd, o, k);
                }
            }
            Op::Upsample2x(x) => {
                let tx = self.value(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (h2, w2) = (2 * h, 2 * w);
                if let Some(gx) = self.acc(grads, *x) {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                }
            }
            Op::MaxPool2x { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &src) in argmax.iter().enumerate() {
                        gx[src] += g[i];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let e = self.value(*x).shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..e {
                            gx[r * e + j] += g[k * e + j];
                        }
                    }
                }
            }
            Op::PairwiseDistance(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (p, e, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                let (ad, bd) = (ta.data(), tb.data());
                let mut ga = vec![0.0; p * e];
                let mut gb = vec![0.0; q * e];
                for i in 0..p {
                    for j in 0..q {
                        let d = out[i * q + j];
                        if d <= 0.0 {
                            continue;
                        }
                        let coef = g[i * q + j] / d;
                        for t in 0..e {
                            let diff = coef * (ad[i * e + t] - bd[j * e + t]);
                            ga[i * e + t] += diff;
                            gb[j * e + t] -= diff;
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *a) {
                    acc.iter_mut().zip(&ga).for_each(|(d, s)| *d += s);
                }
                if let Some(acc) = self.acc(grads, *b) {
                    acc.iter_mut().zip(&gb).for_each(|(d, s)| *d += s);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, &s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, start } => {
                let tx = self.value(*x);
                let inner: usize = tx.shape()[1..].iter().product();
                let off = start * inner;
                if let Some(gx) = self.acc(grads, *x) {
                    gx[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &s)| *d += s);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Transpose(x) => {
                let tx = self.value(*x);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::RowLogSumExp { x, mask } => {
                let tx = self.value(*x);
                let s = tx.shape()[1];
                let xd = tx.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &lse) in out.iter().enumerate() {
                        for j in 0..s {
                            if mask.as_ref().is_none_or(|m| m[i * s + j]) {
                                gx[i * s + j] += g[i] * (xd[i * s + j] - lse).exp();
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let e = self.value(*x).shape()[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &n) in norms.iter().enumerate() {
                        let y = &out[i * e..(i + 1) * e];
                        let gr = &g[i * e..(i + 1) * e];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for t in 0..e {
                            gx[i * e + t] += (gr[t] - y[t] * dot) / n;
                        }
                    }
                }
            }
        }
    }
}

/// Copies of `planes` (each `h × w`, row-major) for every column shift
/// `dx` in `-pad..=pad`. Reading a flattened plane at `p + dy·w + dx` runs
/// off a row's edge into the neighbouring row; the copy for `dx` zeroes the
/// columns such reads land on, so whole planes can be processed as single
/// contiguous spans.
fn shifted_copies(planes: &[f64], w: usize, pad: usize) -> Vec<Vec<f64>> {
    (0..=2 * pad)
        .map(|i| {
            let dx = i as isize - pad as isize;
            let mut v = planes.to_vec();
            if dx != 0 {
                let (lo, hi) = if dx > 0 { (0, dx as usize) } else { (w.saturating_sub((-dx) as usize), w) };
                for row in v.chunks_exact_mut(w) {
                    row[lo..hi.min(w)].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            v
        })
        .collect()
}

/// Flattened offset of kernel tap `(ky, kx)` and the range of output
/// positions whose source `p + off` lies inside a plane of `plane` values.
#[inline]
fn tap(ky: usize, kx: usize, pad: usize, wd: usize, plane: usize) -> (isize, usize, usize) {
    let off = (ky as isize - pad as isize) * wd as isize + (kx as isize - pad as isize);
    let lo = (-off).max(0) as usize;
    let hi = (plane as isize - off.max(0)).max(0) as usize;
    (off, lo.min(hi), hi)
}

/// Dot product with four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let plane = h * wd;
    let shifted = shifted_copies(x, wd, pad);
    let mut out = vec![0.0; o * plane];
    for oc in 0..o {
        let oplane = &mut out[oc * plane..(oc + 1) * plane];
        oplane.iter_mut().for_each(|v| *v = b[oc]);
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (off, lo, hi) = tap(ky, kx, pad, wd, plane);
                    let src = &shifted[kx][ic * plane..(ic + 1) * plane];
                    let s0 = (lo as isize + off) as usize;
                    axpy(&mut oplane[lo..hi], wv, &src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_weight(
    x: &[f64],
    g: &[f64],
    gw: &mut [f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
) {
    let pad = k / 2;
    let plane = h * wd;
    let shifted = shifted_copies(x, wd, pad);
    for oc in 0..o {
        let gplane = &g[oc * plane..(oc + 1) * plane];
        for ic in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let (off, lo, hi) = tap(ky, kx, pad, wd, plane);
                    let src = &shifted[kx][ic * plane..(ic + 1) * plane];
                    let s0 = (lo as isize + off) as usize;
                    gw[((oc * c + ic) * k + ky) * k + kx] += dot(&gplane[lo..hi], &src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_grad_input(
    w: &[f64],
    g: &[f64],
    gx: &mut [f64],
    c: usize,
    h: usize,
    wd: usize,
    o: usize,
    k: usize,
) {
    // gx[q] gathers g[q - off] over taps: a correlation with the mirrored
    // kernel, so the shifted copies of g use the mirrored column shift.
    let pad = k / 2;
    let plane = h * wd;
    let shifted = shifted_copies(g, wd, pad);
    for oc in 0..o {
        for ic in 0..c {
            let xplane = &mut gx[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((oc * c + ic) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (mky, mkx) = (k - 1 - ky, k - 1 - kx);
                    let (off, lo, hi) = tap(mky, mkx, pad, wd, plane);
                    let src = &shifted[mkx][oc * plane..(oc + 1) * plane];
                    let s0 = (lo as isize + off) as usize;
                    axpy(&mut xplane[lo..hi], wv, &src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}
