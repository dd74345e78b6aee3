//! Tape-based reverse-mode differentiation over the tensor kernels in
//! [`super::ops`].
//!
//! Nodes are appended in evaluation order, so every operand of a node has a
//! smaller index than the node itself. Walking the tape from the loss down to
//! index zero therefore visits each operation once, in reverse topological
//! order.

use super::ops::{self, gemm, gemm_nt, gemm_tn, valid_range};
use super::param::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulConst(Var, Tensor),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Powi(Var, i32),
    Clamp(Var, f64, f64),
    Softmax(Var),
    MaskedSoftmax(Var),
    Sum(Var),
    MeanLast(Var),
    Normalize(Var, f64),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    IndexRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    PatchEmbed { feats: Var, weight: Var, cells: Vec<usize>, subpos: Vec<usize> },
    Conv2d(Var, Var, Option<Var>),
    Unfold(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single forward evaluation. Parameters are read from the borrowed store;
/// [`Graph::backward`] returns their gradients.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let src = t.data();
    if nd == 0 || t.is_empty() {
        return Tensor::new(&out_shape, src.to_vec()).expect("permute preserves element count");
    }
    let (inner, inner_stride) = (out_shape[nd - 1], strides[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..t.len() / inner {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a parameter. Repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).tensor.clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::BatchMatMul(a, b)))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tb.len();
        if tb.ndim() != 1 || tx.shape().last() != Some(&n) {
            return Err(mismatch("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Elementwise product with a non-differentiable tensor of equal shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = self.value(x).zip_map(c, |a, b| a * b)?;
        Ok(self.push(out, Op::MulConst(x, c.clone())))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * ops::sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x))
    }

    pub fn powi(&mut self, x: Var, n: i32) -> Var {
        let out = self.value(x).map(|v| v.powi(n));
        self.push(out, Op::Powi(x, n))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp(x, lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = ops::softmax(t, t.ndim() - 1);
        self.push(out, Op::Softmax(x))
    }

    /// Softmax over the last axis restricted to nonzero entries of `valid`.
    pub fn masked_softmax(&mut self, x: Var, valid: &Tensor) -> Result<Var> {
        let t = self.value(x);
        let out = ops::masked_softmax(t, valid, t.ndim() - 1)?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over the last axis, which is dropped from the shape.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let Some((&n, rest)) = t.shape().split_last() else {
            return Err(Error::invalid("mean_last", "scalar input"));
        };
        if n == 0 {
            return Err(Error::invalid("mean_last", "empty axis"));
        }
        let data = t.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let out = Tensor::new(rest, data)?;
        Ok(self.push(out, Op::MeanLast(x)))
    }

    /// Zero mean, unit variance over the last axis: `(x - μ) / sqrt(σ² + eps)`.
    pub fn normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = match t.shape().last() {
            Some(&n) if n > 0 => n,
            _ => return Err(Error::invalid("normalize_last", "empty last axis")),
        };
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::Normalize(x, eps)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let mut seen = vec![false; t.ndim()];
        if perm.len() != t.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {:?}", t.shape())));
        }
        let out = permute_tensor(t, perm);
        Ok(self.push(out, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(Error::invalid("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(mismatch("concat", self.value(first), self.value(x)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis)))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() || start + len > t.shape()[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("{start}..{} along axis {axis} of {:?}", start + len, t.shape()),
            ));
        }
        let (outer, n, inner) = t.split_at_axis(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Narrow(x, axis, start)))
    }

    /// Gathers rows of a 2D tensor.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::invalid("index_rows", format!("bad rows for {:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(&[rows.len(), d], data)?;
        Ok(self.push(out, Op::IndexRows(x, rows.to_vec())))
    }

    /// Column-wise maximum of the rows of `x: [n, d]` sharing a segment id.
    /// Empty segments produce zeros.
    pub fn segment_max(&mut self, x: Var, segment: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 2 || segment.len() != t.shape()[0] || segment.iter().any(|&s| s >= n_segments) {
            return Err(Error::invalid("segment_max", format!("bad segments for {:?}", t.shape())));
        }
        let d = t.shape()[1];
        let mut out = vec![0.0; n_segments * d];
        let mut arg = vec![usize::MAX; n_segments * d];
        for (row, &s) in segment.iter().enumerate() {
            for j in 0..d {
                let v = t.data()[row * d + j];
                let k = s * d + j;
                if arg[k] == usize::MAX || v > out[k] {
                    out[k] = v;
                    arg[k] = row;
                }
            }
        }
        let out = Tensor::new(&[n_segments, d], out)?;
        Ok(self.push(out, Op::SegmentMax(x, arg)))
    }

    /// Strided convolution with kernel = stride over a sparse input.
    ///
    /// Row `p` of `feats: [P, D]` sits at kernel position `subpos[p]` inside
    /// output cell `cells[p]`; `weight` is `[S, D, C]` with `S` kernel
    /// positions. Output is `[n_cells, C]`. Each (cell, position) pair must
    /// occur at most once.
    pub fn patch_embed(
        &mut self,
        feats: Var,
        weight: Var,
        cells: &[usize],
        subpos: &[usize],
        n_cells: usize,
    ) -> Result<Var> {
        let (tf, tw) = (self.value(feats), self.value(weight));
        if tf.ndim() != 2 || tw.ndim() != 3 || tf.shape()[1] != tw.shape()[1] {
            return Err(mismatch("patch_embed", tf, tw));
        }
        let (p, d) = (tf.shape()[0], tf.shape()[1]);
        let (s, c) = (tw.shape()[0], tw.shape()[2]);
        if cells.len() != p
            || subpos.len() != p
            || cells.iter().any(|&x| x >= n_cells)
            || subpos.iter().any(|&x| x >= s)
        {
            return Err(Error::invalid("patch_embed", "cell or kernel position out of range"));
        }
        let mut out = vec![0.0; n_cells * c];
        for i in 0..p {
            let f = &tf.data()[i * d..(i + 1) * d];
            let w = &tw.data()[subpos[i] * d * c..(subpos[i] + 1) * d * c];
            gemm(f, w, &mut out[cells[i] * c..(cells[i] + 1) * c], 1, d, c);
        }
        let out = Tensor::new(&[n_cells, c], out)?;
        Ok(self.push(out, Op::PatchEmbed { feats, weight, cells: cells.to_vec(), subpos: subpos.to_vec() }))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(kernel), bias.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Conv2d(x, kernel, bias)))
    }

    /// `[C, H, W]` → `[H·W, k·k, C]`: the zero-padded `k×k` neighbourhood of
    /// each cell, in row-major window order.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() != 3 || k.is_multiple_of(2) {
            return Err(Error::invalid("unfold", format!("need [C,H,W] and odd k, got {:?}, {k}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * w * k * k * c];
        for y in 0..h {
            for x0 in 0..w {
                for (j, (dy, dx)) in window(r).enumerate() {
                    let (yy, xx) = (y as isize + dy, x0 as isize + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let base = ((y * w + x0) * k * k + j) * c;
                    for ch in 0..c {
                        out[base + ch] = t.data()[(ch * h + yy as usize) * w + xx as usize];
                    }
                }
            }
        }
        let out = Tensor::new(&[h * w, k * k, c], out)?;
        Ok(self.push(out, Op::Unfold(x, k)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        let mut out = Gradients { grads: vec![None; self.params.len()] };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let unary = |x: Var, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            // f(input, output) -> local derivative
            let xi = val(x).data();
            let yo = node.value.data();
            Tensor::new(g.shape(), g.data().iter().zip(xi).zip(yo).map(|((gv, &a), &y)| gv * f(a, y)).collect())
                .expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(e) => e.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn(ta.data(), g.data(), &mut gb, m, k, n);
                acc(*a, Tensor::new(&[m, k], ga).unwrap());
                acc(*b, Tensor::new(&[k, n], gb).unwrap());
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for s in 0..bs {
                    let gs = &g.data()[s * m * n..(s + 1) * m * n];
                    gemm_nt(gs, &tb.data()[s * k * n..(s + 1) * k * n], &mut ga[s * m * k..(s + 1) * m * k], m, n, k);
                    gemm_tn(&ta.data()[s * m * k..(s + 1) * m * k], gs, &mut gb[s * k * n..(s + 1) * k * n], m, k, n);
                }
                acc(*a, Tensor::new(&[bs, m, k], ga).unwrap());
                acc(*b, Tensor::new(&[bs, k, n], gb).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                acc(*b, g.zip_map(val(*a), |x, y| x * y).unwrap());
            }
            Op::AddBias(x, b) => {
                let n = val(*b).len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                acc(*b, Tensor::new(&[n], gb).unwrap());
                acc(*x, g);
            }
            Op::MulConst(x, c) => acc(*x, g.zip_map(c, |a, b| a * b).unwrap()),
            Op::Affine(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Sigmoid(x) => acc(*x, unary(*x, &|_, y| y * (1.0 - y))),
            Op::Tanh(x) => acc(*x, unary(*x, &|_, y| 1.0 - y * y)),
            Op::Silu(x) => acc(
                *x,
                unary(*x, &|a, _| {
                    let s = ops::sigmoid(a);
                    s + a * s * (1.0 - s)
                }),
            ),
            Op::Exp(x) => acc(*x, unary(*x, &|_, y| y)),
            Op::Log(x) => acc(*x, unary(*x, &|a, _| 1.0 / a)),
            Op::Abs(x) => acc(
                *x,
                unary(*x, &|a, _| {
                    if a > 0.0 {
                        1.0
                    } else if a < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Powi(x, n) => {
                let n = *n;
                acc(*x, unary(*x, &|a, _| n as f64 * a.powi(n - 1)))
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(*x, unary(*x, &|a, _| if a >= lo && a <= hi { 1.0 } else { 0.0 }))
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape(), gx).unwrap());
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::MeanLast(x) => {
                let tx = val(*x);
                let n = *tx.shape().last().unwrap();
                let mut gx = Vec::with_capacity(tx.len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / n as f64, n));
                }
                acc(*x, Tensor::new(tx.shape(), gx).unwrap());
            }
            Op::Normalize(x, eps) => {
                let (tx, y) = (val(*x), &node.value);
                let n = *y.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.len());
                for ((xr, yr), gr) in tx.data().chunks(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let mean = xr.iter().sum::<f64>() / n as f64;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n as f64;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| inv * (gv - g_mean - yv * gy_mean)));
                }
                acc(*x, Tensor::new(y.shape(), gx).unwrap());
            }
            Op::Reshape(x) => acc(*x, g.reshaped_unchecked(val(*x).shape())),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*x, permute_tensor(&g, &inv));
            }
            Op::Concat(xs, axis) => {
                let axis = *axis;
                let shape = g.shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[axis];
                let mut offset = 0;
                for &x in xs {
                    let tx = val(x);
                    let n = tx.shape()[axis];
                    let mut gx = Vec::with_capacity(tx.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    acc(x, Tensor::new(tx.shape(), gx).unwrap());
                    offset += n;
                }
            }
            Op::Narrow(x, axis, start) => {
                let tx = val(*x);
                let (outer, n, inner) = tx.split_at_axis(*axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(tx.shape());
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                acc(*x, gx);
            }
            Op::IndexRows(x, rows) => {
                let tx = val(*x);
                let d = tx.shape()[1];
                let mut gx = Tensor::zeros(tx.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx.data_mut()[r * d + j] += g.data()[i * d + j];
                    }
                }
                acc(*x, gx);
            }
            Op::SegmentMax(x, arg) => {
                let tx = val(*x);
                let d = tx.shape()[1];
                let mut gx = Tensor::zeros(tx.shape());
                for (k, &row) in arg.iter().enumerate() {
                    if row != usize::MAX {
                        gx.data_mut()[row * d + k % d] += g.data()[k];
                    }
                }
                acc(*x, gx);
            }
            Op::PatchEmbed { feats, weight, cells, subpos } => {
                let (tf, tw) = (val(*feats), val(*weight));
                let d = tf.shape()[1];
                let c = tw.shape()[2];
                let mut gf = vec![0.0; tf.len()];
                let mut gw = vec![0.0; tw.len()];
                for i in 0..cells.len() {
                    let gc = &g.data()[cells[i] * c..(cells[i] + 1) * c];
                    let w = &tw.data()[subpos[i] * d * c..(subpos[i] + 1) * d * c];
                    gemm_nt(gc, w, &mut gf[i * d..(i + 1) * d], 1, c, d);
                    let f = &tf.data()[i * d..(i + 1) * d];
                    gemm_tn(f, gc, &mut gw[subpos[i] * d * c..(subpos[i] + 1) * d * c], 1, d, c);
                }
                acc(*feats, Tensor::new(tf.shape(), gf).unwrap());
                acc(*weight, Tensor::new(tw.shape(), gw).unwrap());
            }
            Op::Conv2d(x, kernel, bias) => {
                let (tx, tk) = (val(*x), val(*kernel));
                let (gx, gk) = conv2d_backward(tx, tk, &g);
                if let Some(b) = bias {
                    let hw = g.shape()[1] * g.shape()[2];
                    let gb = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    acc(*b, Tensor::new(&[g.shape()[0]], gb).unwrap());
                }
                acc(*x, gx);
                acc(*kernel, gk);
            }
            Op::Unfold(x, k) => {
                let tx = val(*x);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let r = (*k / 2) as isize;
                let mut gx = Tensor::zeros(tx.shape());
                for y in 0..h {
                    for x0 in 0..w {
                        for (j, (dy, dx)) in window(r).enumerate() {
                            let (yy, xx) = (y as isize + dy, x0 as isize + dx);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let base = ((y * w + x0) * k * k + j) * c;
                            for ch in 0..c {
                                gx.data_mut()[(ch * h + yy as usize) * w + xx as usize] += g.data()[base + ch];
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
        }
    }
}

/// Offsets of a `(2r+1)²` window in row-major order.
pub(crate) fn window(r: isize) -> impl Iterator<Item = (isize, isize)> {
    (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| (dy, dx)))
}

fn conv2d_backward(x: &Tensor, kernel: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (kernel.shape()[0], kernel.shape()[2]);
    let pad = (k / 2) as isize;
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let xd = x.data();
    let kd = kernel.data();
    let gd = g.data();
    for co in 0..cout {
        let gp = &gd[co * h * w..(co + 1) * h * w];
        for ci in 0..cin {
            let src = &xd[ci * h * w..(ci + 1) * h * w];
            for dy in 0..k {
                for dx in 0..k {
                    let kidx = ((co * cin + ci) * k + dy) * k + dx;
                    let wv = kd[kidx];
                    let oy = dy as isize - pad;
                    let ox = dx as isize - pad;
                    let (r0, r1) = valid_range(h, oy);
                    let (c0, c1) = valid_range(w, ox);
                    let mut gw = 0.0;
                    let gxd = gx.data_mut();
                    for r in r0..r1 {
                        let sr = (r as isize + oy) as usize;
                        let sc0 = (c0 as isize + ox) as usize;
                        let grow = &gp[r * w + c0..r * w + c1];
                        let srow = &src[sr * w + sc0..sr * w + sc0 + (c1 - c0)];
                        for (gv, sv) in grow.iter().zip(srow) {
                            gw += gv * sv;
                        }
                        if wv != 0.0 {
                            let dst = &mut gxd[ci * h * w + sr * w + sc0..ci * h * w + sr * w + sc0 + (c1 - c0)];
                            for (d, gv) in dst.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    gk.data_mut()[kidx] += gw;
                }
            }
        }
    }
    (gx, gk)
}
