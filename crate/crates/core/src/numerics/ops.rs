//! Built-in differentiable operations and their vector-Jacobian products.
//!
//! Binary element-wise ops broadcast only by leading-axis expansion: the
//! right operand's shape must be a suffix of the left operand's shape.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::scalar::{gemm, MatView};
use super::tape::{CustomOp, Node, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};

/// Target id excluded from [`Tape::cross_entropy`].
pub const IGNORE_INDEX: u32 = u32::MAX;

pub(crate) enum Op<S: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Pow(Var, S),
    Sigmoid(Var),
    Silu(Var),
    Clamp(Var, S, S),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Softmax(Var, usize),
    L2Normalize(Var, usize, S),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Where(Vec<bool>, Var, Var),
    MulRows(Var, Var),
    CrossEntropy(Var, Vec<u32>, Tensor<S>, S),
    Custom(Vec<Var>, Box<dyn CustomOp<S>>),
}

fn check_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    Ok(())
}

/// Sums `g` (shaped like the broadcast output) down to a suffix of `len` elements.
fn reduce_to_suffix<S: Scalar>(g: &[S], len: usize, shape: &[usize]) -> Tensor<S> {
    let mut out = vec![S::zero(); len];
    if len > 0 {
        for chunk in g.chunks_exact(len) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("suffix reduction shape")
}

fn zip_bcast<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let nb = b.numel();
    let bd = b.data();
    let data = if nb == a.numel() {
        a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % nb])).collect()
    };
    Tensor::new(a.shape().to_vec(), data).expect("broadcast output shape")
}

pub(crate) fn softmax_values<S: Scalar>(x: &[S], outer: usize, n: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut mx = S::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[at(j)]);
            }
            let mut z = S::zero();
            for j in 0..n {
                let e = (x[at(j)] - mx).exp();
                out[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                out[at(j)] /= z;
            }
        }
    }
    out
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: fn(Var, Var) -> Op<S>,
    ) -> Result<Var> {
        check_suffix(name, self.shape(a), self.shape(b))?;
        let out = zip_bcast(self.value(a), self.value(b), f);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, op(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(out, rg, op)
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

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `c - a`, element-wise.
    pub fn rsub_scalar(&mut self, c: S, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn pow(&mut self, a: Var, e: S) -> Var {
        self.unary(a, |x| x.powf(e), Op::Pow(a, e))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    /// Element-wise clamp to `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Result<Var> {
        if lo > hi {
            return Err(invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        Ok(self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi)))
    }

    /// `a @ b` for `a: [.., m, k]` and `b: [k, n]` (shared across the leading
    /// axes of `a`) or `b: [.., k, n]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![S::zero(); batch * m * n];
        if sb.len() == 2 {
            gemm(
                S::one(),
                av.data(),
                MatView::row_major(batch * m, k, 0),
                bv.data(),
                MatView::row_major(k, n, 0),
                S::zero(),
                &mut out,
                MatView::row_major(batch * m, n, 0),
            );
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            for i in 0..batch {
                gemm(
                    S::one(),
                    av.data(),
                    MatView::row_major(m, k, i * m * k),
                    bv.data(),
                    MatView::row_major(k, n, i * k * n),
                    S::zero(),
                    &mut out,
                    MatView::row_major(m, n, i * m * n),
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::MatMul(a, b)))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.len() < 2 {
            return Err(invalid("transpose", format!("needs rank >= 2, got {s:?}")));
        }
        let out = transpose_last2(x);
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split(if mean { "mean" } else { "sum" }, axis)?;
        let mut out = vec![S::zero(); outer * inner];
        let d = x.data();
        for o in 0..outer {
            for j in 0..n {
                let base = o * n * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean && n > 0 {
            let inv = S::one() / S::of(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.requires_grad(a);
        let op = if mean { Op::Mean(a, axis) } else { Op::Sum(a, axis) };
        Ok(self.push(Tensor::new(shape, out)?, rg, op))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::of(n as f64))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split("softmax", axis)?;
        let out = Tensor::new(x.shape().to_vec(), softmax_values(x.data(), outer, n, inner))?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::Softmax(a, axis)))
    }

    /// `x / max(||x||, eps)` along `axis`; the zero vector maps to zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: S) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split("l2_normalize", axis)?;
        let d = x.data();
        let mut out = vec![S::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let norm = (0..n).map(|j| d[at(j)] * d[at(j)]).sum::<S>().sqrt().max(eps);
                for j in 0..n {
                    out[at(j)] = d[at(j)] / norm;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.requires_grad(a);
        Ok(self.push(out, rg, Op::L2Normalize(a, axis, eps)))
    }

    /// Selects rows (axis 0) by index.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.is_empty() {
            return Err(invalid("gather", "cannot index a scalar"));
        }
        let stride: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(index.len() * stride);
        for &r in index {
            if r >= s[0] {
                return Err(invalid("gather", format!("index {r} out of range for {s:?}")));
            }
            out.extend_from_slice(&x.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = s.to_vec();
        shape[0] = index.len();
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Gather(a, index.to_vec())))
    }

    /// Accumulates row `i` of `a` into row `index[i]` of an `n`-row zero tensor.
    pub fn scatter_add(&mut self, a: Var, index: &[usize], n: usize) -> Result<Var> {
        let x = self.value(a);
        let s = x.shape();
        if s.is_empty() || s[0] != index.len() {
            return Err(Error::ShapeMismatch { op: "scatter_add", lhs: s.to_vec(), rhs: vec![index.len()] });
        }
        let stride: usize = s[1..].iter().product();
        let mut out = vec![S::zero(); n * stride];
        for (i, &r) in index.iter().enumerate() {
            if r >= n {
                return Err(invalid("scatter_add", format!("index {r} out of range for {n} rows")));
            }
            let src = &x.data()[i * stride..(i + 1) * stride];
            for (o, &v) in out[r * stride..(r + 1) * stride].iter_mut().zip(src) {
                *o += v;
            }
        }
        let mut shape = s.to_vec();
        shape[0] = n;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::ScatterAdd(a, index.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::ShapeMismatch { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let x = self.value(*p);
                let n = x.shape()[axis];
                out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Concat(parts.to_vec(), axis)))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner) = x.axis_split("slice", axis)?;
        if start > end || end > n {
            return Err(invalid("slice", format!("range {start}..{end} for extent {n}")));
        }
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::Slice(a, axis, start)))
    }

    /// Element-wise select: `mask ? a : b`.
    pub fn where_(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() || mask.len() != x.numel() {
            return Err(Error::ShapeMismatch { op: "where", lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
        }
        let data = mask.iter().zip(x.data().iter().zip(y.data())).map(|(&m, (&p, &q))| if m { p } else { q }).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Where(mask.to_vec(), a, b)))
    }

    /// Scales row `r` of `a: [R, ..]` by `s[r]`, `s: [R]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, w) = (self.value(a), self.value(s));
        if x.rank() == 0 || w.rank() != 1 || w.shape()[0] != x.shape()[0] {
            return Err(Error::ShapeMismatch { op: "mul_rows", lhs: x.shape().to_vec(), rhs: w.shape().to_vec() });
        }
        let stride = x.numel() / x.shape()[0].max(1);
        let data = x.data().iter().enumerate().map(|(i, &v)| v * w.data()[i / stride]).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, s]);
        Ok(self.push(out, rg, Op::MulRows(a, s)))
    }

    /// Mean token cross-entropy of `logits: [R, V]` against `targets`,
    /// skipping [`IGNORE_INDEX`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::ShapeMismatch { op: "cross_entropy", lhs: s.to_vec(), rhs: vec![targets.len()] });
        }
        let (r, v) = (s[0], s[1]);
        let probs = softmax_values(x.data(), r, v, 1);
        let mut loss = S::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            let t = t as usize;
            if t >= v {
                return Err(invalid("cross_entropy", format!("target {t} >= vocab {v}")));
            }
            // log-sum-exp form keeps tiny probabilities exact.
            let row = x.row(i);
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<S>().ln() + mx;
            loss += lse - row[t];
            count += 1;
        }
        let inv = if count == 0 { S::zero() } else { S::one() / S::of(count as f64) };
        let probs = Tensor::new(vec![r, v], probs)?;
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss * inv), rg, Op::CrossEntropy(logits, targets.to_vec(), probs, inv)))
    }
}

fn transpose_last2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = x.numel() / (m * n).max(1);
    let d = x.data();
    let mut out = vec![S::zero(); d.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out).expect("transpose shape")
}

fn elementwise<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("elementwise shape")
}

/// Vector-Jacobian products of node `i` given its upstream gradient `g`.
pub(crate) fn vjp<S: Scalar>(nodes: &[Node<S>], i: usize, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let out = &nodes[i].value;
    let mut res: Vec<(Var, Tensor<S>)> = Vec::new();
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if rg(a) {
                res.push((a, g.clone()));
            }
            if rg(b) {
                let vb = val(b);
                res.push((b, reduce_to_suffix(g.data(), vb.numel(), vb.shape())));
            }
        }
        &Op::Sub(a, b) => {
            if rg(a) {
                res.push((a, g.clone()));
            }
            if rg(b) {
                let vb = val(b);
                let r = reduce_to_suffix(g.data(), vb.numel(), vb.shape());
                res.push((b, r.map(|x| -x)));
            }
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if rg(a) {
                res.push((a, zip_bcast(g, vb, |x, y| x * y)));
            }
            if rg(b) {
                let prod = elementwise(g, va, |x, y| x * y);
                res.push((b, reduce_to_suffix(prod.data(), vb.numel(), vb.shape())));
            }
        }
        &Op::Div(a, b) => {
            let vb = val(b);
            if rg(a) {
                res.push((a, zip_bcast(g, vb, |x, y| x / y)));
            }
            if rg(b) {
                // d(a/b)/db = -a/b^2 = -out/b
                let t = elementwise(g, out, |x, y| x * y);
                let t = zip_bcast(&t, vb, |x, y| -x / y);
                res.push((b, reduce_to_suffix(t.data(), vb.numel(), vb.shape())));
            }
        }
        &Op::Neg(a) => res.push((a, g.map(|x| -x))),
        &Op::Scale(a, c) => res.push((a, g.map(|x| x * c))),
        &Op::AddScalar(a) => res.push((a, g.clone())),
        &Op::Exp(a) => res.push((a, elementwise(g, out, |x, y| x * y))),
        &Op::Log(a) => res.push((a, elementwise(g, val(a), |x, y| x / y))),
        &Op::Pow(a, e) => {
            let em1 = e - S::one();
            res.push((a, elementwise(g, val(a), |x, y| x * e * y.powf(em1))));
        }
        &Op::Sigmoid(a) => res.push((a, elementwise(g, out, |x, y| x * y * (S::one() - y)))),
        &Op::Silu(a) => res.push((
            a,
            elementwise(g, val(a), |x, y| {
                let s = sigmoid(y);
                x * s * (S::one() + y * (S::one() - s))
            }),
        )),
        &Op::Clamp(a, lo, hi) => {
            res.push((a, elementwise(g, val(a), |x, y| if y >= lo && y <= hi { x } else { S::zero() })))
        }
        &Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let sa = va.shape();
            let sb = vb.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let batch = va.numel() / (m * k).max(1);
            if sb.len() == 2 {
                if rg(a) {
                    let mut da = vec![S::zero(); va.numel()];
                    gemm(
                        S::one(),
                        g.data(),
                        MatView::row_major(batch * m, n, 0),
                        vb.data(),
                        MatView::row_major(k, n, 0).t(),
                        S::zero(),
                        &mut da,
                        MatView::row_major(batch * m, k, 0),
                    );
                    res.push((a, Tensor::new(sa.to_vec(), da).unwrap()));
                }
                if rg(b) {
                    let mut db = vec![S::zero(); vb.numel()];
                    gemm(
                        S::one(),
                        va.data(),
                        MatView::row_major(batch * m, k, 0).t(),
                        g.data(),
                        MatView::row_major(batch * m, n, 0),
                        S::zero(),
                        &mut db,
                        MatView::row_major(k, n, 0),
                    );
                    res.push((b, Tensor::new(sb.to_vec(), db).unwrap()));
                }
            } else {
                if rg(a) {
                    let mut da = vec![S::zero(); va.numel()];
                    for bi in 0..batch {
                        gemm(
                            S::one(),
                            g.data(),
                            MatView::row_major(m, n, bi * m * n),
                            vb.data(),
                            MatView::row_major(k, n, bi * k * n).t(),
                            S::zero(),
                            &mut da,
                            MatView::row_major(m, k, bi * m * k),
                        );
                    }
                    res.push((a, Tensor::new(sa.to_vec(), da).unwrap()));
                }
                if rg(b) {
                    let mut db = vec![S::zero(); vb.numel()];
                    for bi in 0..batch {
                        gemm(
                            S::one(),
                            va.data(),
                            MatView::row_major(m, k, bi * m * k).t(),
                            g.data(),
                            MatView::row_major(m, n, bi * m * n),
                            S::zero(),
                            &mut db,
                            MatView::row_major(k, n, bi * k * n),
                        );
                    }
                    res.push((b, Tensor::new(sb.to_vec(), db).unwrap()));
                }
            }
        }
        &Op::Transpose(a) => res.push((a, transpose_last2(g))),
        &Op::Reshape(a) => {
            let gt = g.clone().reshape(val(a).shape().to_vec()).unwrap();
            res.push((a, gt));
        }
        &Op::Sum(a, axis) | &Op::Mean(a, axis) => {
            let va = val(a);
            let (outer, n, inner) = va.axis_split("sum", axis).unwrap();
            let scale =
                if matches!(nodes[i].op, Op::Mean(..)) && n > 0 { S::one() / S::of(n as f64) } else { S::one() };
            let mut da = vec![S::zero(); va.numel()];
            for o in 0..outer {
                for j in 0..n {
                    for ii in 0..inner {
                        da[o * n * inner + j * inner + ii] = g.data()[o * inner + ii] * scale;
                    }
                }
            }
            res.push((a, Tensor::new(va.shape().to_vec(), da).unwrap()));
        }
        &Op::SumAll(a) => {
            let gs = g.item();
            res.push((a, Tensor::full(val(a).shape().to_vec(), gs)));
        }
        &Op::Softmax(a, axis) => {
            let (outer, n, inner) = out.axis_split("softmax", axis).unwrap();
            let y = out.data();
            let gd = g.data();
            let mut da = vec![S::zero(); y.len()];
            for o in 0..outer {
                for ii in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + ii;
                    let dot: S = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        da[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            res.push((a, Tensor::new(out.shape().to_vec(), da).unwrap()));
        }
        &Op::L2Normalize(a, axis, eps) => {
            let va = val(a);
            let (outer, n, inner) = va.axis_split("l2_normalize", axis).unwrap();
            let (x, y, gd) = (va.data(), out.data(), g.data());
            let mut da = vec![S::zero(); x.len()];
            for o in 0..outer {
                for ii in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + ii;
                    let norm = (0..n).map(|j| x[at(j)] * x[at(j)]).sum::<S>().sqrt();
                    if norm > eps {
                        let dot: S = (0..n).map(|j| y[at(j)] * gd[at(j)]).sum();
                        for j in 0..n {
                            da[at(j)] = (gd[at(j)] - y[at(j)] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            da[at(j)] = gd[at(j)] / eps;
                        }
                    }
                }
            }
            res.push((a, Tensor::new(va.shape().to_vec(), da).unwrap()));
        }
        Op::Gather(a, index) => {
            let va = val(*a);
            let stride: usize = va.shape()[1..].iter().product();
            let mut da = vec![S::zero(); va.numel()];
            for (k, &r) in index.iter().enumerate() {
                let src = &g.data()[k * stride..(k + 1) * stride];
                for (o, &v) in da[r * stride..(r + 1) * stride].iter_mut().zip(src) {
                    *o += v;
                }
            }
            res.push((*a, Tensor::new(va.shape().to_vec(), da).unwrap()));
        }
        Op::ScatterAdd(a, index) => {
            let va = val(*a);
            let stride: usize = va.shape()[1..].iter().product();
            let mut da = Vec::with_capacity(va.numel());
            for &r in index {
                da.extend_from_slice(&g.data()[r * stride..(r + 1) * stride]);
            }
            res.push((*a, Tensor::new(va.shape().to_vec(), da).unwrap()));
        }
        Op::Concat(parts, axis) => {
            let axis = *axis;
            let s = out.shape();
            let outer: usize = s[..axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total = s[axis];
            let mut offset = 0;
            for &p in parts {
                let vp = val(p);
                let n = vp.shape()[axis];
                if rg(p) {
                    let mut dp = Vec::with_capacity(vp.numel());
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        dp.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    res.push((p, Tensor::new(vp.shape().to_vec(), dp).unwrap()));
                }
                offset += n;
            }
        }
        &Op::Slice(a, axis, start) => {
            let va = val(a);
            let (outer, n, inner) = va.axis_split("slice", axis).unwrap();
            let len = out.shape()[axis];
            let mut da = vec![S::zero(); va.numel()];
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                da[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            res.push((a, Tensor::new(va.shape().to_vec(), da).unwrap()));
        }
        Op::Where(mask, a, b) => {
            let pick = |keep: bool| {
                let data = mask.iter().zip(g.data()).map(|(&m, &x)| if m == keep { x } else { S::zero() }).collect();
                Tensor::new(g.shape().to_vec(), data).unwrap()
            };
            if rg(*a) {
                res.push((*a, pick(true)));
            }
            if rg(*b) {
                res.push((*b, pick(false)));
            }
        }
        &Op::MulRows(a, s) => {
            let (va, vs) = (val(a), val(s));
            let rows = vs.numel();
            let stride = va.numel() / rows.max(1);
            if rg(a) {
                let data = g.data().iter().enumerate().map(|(k, &x)| x * vs.data()[k / stride]).collect();
                res.push((a, Tensor::new(va.shape().to_vec(), data).unwrap()));
            }
            if rg(s) {
                let ds = (0..rows)
                    .map(|r| {
                        let span = r * stride..(r + 1) * stride;
                        g.data()[span.clone()].iter().zip(&va.data()[span]).map(|(&x, &y)| x * y).sum()
                    })
                    .collect();
                res.push((s, Tensor::vector(ds)));
            }
        }
        Op::CrossEntropy(logits, targets, probs, inv) => {
            let scale = g.item() * *inv;
            let v = probs.shape()[1];
            let mut d = probs.data().to_vec();
            for (r, &t) in targets.iter().enumerate() {
                let row = &mut d[r * v..(r + 1) * v];
                if t == IGNORE_INDEX {
                    row.iter_mut().for_each(|x| *x = S::zero());
                    continue;
                }
                row[t as usize] -= S::one();
                row.iter_mut().for_each(|x| *x *= scale);
            }
            res.push((*logits, Tensor::new(probs.shape().to_vec(), d).unwrap()));
        }
        Op::Custom(inputs, op) => {
            let vals: Vec<&Tensor<S>> = inputs.iter().map(|v| val(*v)).collect();
            let grads = op.backward(&vals, out, g);
            debug_assert_eq!(grads.len(), inputs.len(), "{} returned wrong arity", op.name());
            for (&v, gi) in inputs.iter().zip(grads) {
                if let Some(gi) = gi {
                    if rg(v) {
                        res.push((v, gi));
                    }
                }
            }
        }
    }
    res
}
