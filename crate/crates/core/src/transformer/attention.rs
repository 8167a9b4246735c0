//! Segmented causal multi-head attention with rotary positions and the
//! optional concept-conditioned query/key/value terms used for joint decoding.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use super::{init_matrix, Segments};
use crate::error::{invalid, Result};
use crate::numerics::{gemm, CustomOp, MatView, Scalar, Tape, Tensor, Var};

/// Extra projections `W_q^c, W_k^c, W_v^c` that inject token-aligned
/// concepts into a decoder attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptProjectors<W> {
    pub wq: W,
    pub wk: W,
    pub wv: W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<W> {
    pub wq: W,
    pub wk: W,
    pub wv: W,
    pub wo: W,
    pub concept: Option<ConceptProjectors<W>>,
    pub n_heads: usize,
}

impl<W> AttentionWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            wq: f(&format!("{prefix}.wq"), &self.wq),
            wk: f(&format!("{prefix}.wk"), &self.wk),
            wv: f(&format!("{prefix}.wv"), &self.wv),
            wo: f(&format!("{prefix}.wo"), &self.wo),
            concept: self.concept.as_ref().map(|c| ConceptProjectors {
                wq: f(&format!("{prefix}.concept_wq"), &c.wq),
                wk: f(&format!("{prefix}.concept_wk"), &c.wk),
                wv: f(&format!("{prefix}.concept_wv"), &c.wv),
            }),
            n_heads: self.n_heads,
        }
    }
}

impl<S: Scalar> AttentionWeights<Tensor<S>> {
    /// Random projections; concept projectors, when requested, start at zero.
    pub fn init(rng: &mut impl Rng, d: usize, n_heads: usize, concept: bool, std: f64) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(invalid("attention", format!("d={d} not divisible by n_heads={n_heads}")));
        }
        if !(d / n_heads).is_multiple_of(2) {
            return Err(invalid("attention", format!("head dim {} must be even for rotary", d / n_heads)));
        }
        Ok(Self {
            wq: init_matrix(rng, d, d, std),
            wk: init_matrix(rng, d, d, std),
            wv: init_matrix(rng, d, d, std),
            wo: init_matrix(rng, d, d, std),
            concept: concept.then(|| ConceptProjectors {
                wq: Tensor::zeros([d, d]),
                wk: Tensor::zeros([d, d]),
                wv: Tensor::zeros([d, d]),
            }),
            n_heads,
        })
    }
}

fn project<S: Scalar>(tape: &mut Tape<S>, x: Var, w: Var, concepts: Option<(Var, Var)>) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match concepts {
        Some((c, wc)) => {
            let extra = tape.matmul(c, wc)?;
            tape.add(base, extra)
        }
        None => Ok(base),
    }
}

/// `softmax((XW_q + CW_q^c)(XW_k + CW_k^c)^T / sqrt(d_head) + mask)(XW_v + CW_v^c) W_o`
/// per head, with rotary positions on queries and keys and attention
/// confined to each segment's causal prefix.
///
/// Without `concepts` the concept terms vanish and this is standard causal
/// attention. Supplying `concepts` to weights without projectors is an error.
pub fn causal_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: &AttentionWeights<Var>,
    concepts: Option<Var>,
    segs: &Segments,
    rope_base: f64,
) -> Result<Var> {
    let proj = match (concepts, &w.concept) {
        (Some(c), Some(p)) => Some((c, p)),
        (Some(_), None) => {
            return Err(invalid("causal_attention", "concepts supplied but layer has no concept projectors"))
        }
        (None, _) => None,
    };
    if let Some((c, _)) = proj {
        if tape.shape(c) != tape.shape(x) {
            return Err(crate::Error::ShapeMismatch {
                op: "causal_attention",
                lhs: tape.shape(x).to_vec(),
                rhs: tape.shape(c).to_vec(),
            });
        }
    }
    let q = project(tape, x, w.wq, proj.map(|(c, p)| (c, p.wq)))?;
    let k = project(tape, x, w.wk, proj.map(|(c, p)| (c, p.wk)))?;
    let v = project(tape, x, w.wv, proj.map(|(c, p)| (c, p.wv)))?;
    let positions = segs.positions();
    let q = rope(tape, q, &positions, w.n_heads, rope_base)?;
    let k = rope(tape, k, &positions, w.n_heads, rope_base)?;
    let o = attention_core(tape, q, k, v, segs, w.n_heads)?;
    tape.matmul(o, w.wo)
}

/// Rotary position embedding on `x: [T, d]`, rotating the two halves of
/// every head by `pos * base^(-2i / d_head)`.
pub fn rope<S: Scalar>(tape: &mut Tape<S>, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
    let xv = tape.value(x);
    let s = xv.shape();
    if s.len() != 2 || s[0] != positions.len() || n_heads == 0 || !s[1].is_multiple_of(2 * n_heads) {
        return Err(invalid("rope", format!("shape {s:?} with {} positions, {n_heads} heads", positions.len())));
    }
    let (t, d) = (s[0], s[1]);
    let dh = d / n_heads;
    let half = dh / 2;
    let mut cos = vec![S::zero(); t * half];
    let mut sin = vec![S::zero(); t * half];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = Float::powf(base, -2.0 * i as f64 / dh as f64);
            let ang = p as f64 * freq;
            cos[r * half + i] = S::of(Float::cos(ang));
            sin[r * half + i] = S::of(Float::sin(ang));
        }
    }
    let op = Rope { cos, sin, n_heads, half };
    let out = op.apply(xv, false);
    Ok(tape.custom(&[x], out, Box::new(op)))
}

struct Rope<S> {
    cos: Vec<S>,
    sin: Vec<S>,
    n_heads: usize,
    half: usize,
}

impl<S: Scalar> Rope<S> {
    fn apply(&self, x: &Tensor<S>, inverse: bool) -> Tensor<S> {
        let d = x.last_dim();
        let mut out = x.clone();
        let o = out.data_mut();
        for r in 0..x.rows() {
            for h in 0..self.n_heads {
                let base = r * d + h * 2 * self.half;
                for i in 0..self.half {
                    let (c, mut s) = (self.cos[r * self.half + i], self.sin[r * self.half + i]);
                    if inverse {
                        s = -s;
                    }
                    let a = x.data()[base + i];
                    let b = x.data()[base + i + self.half];
                    o[base + i] = a * c - b * s;
                    o[base + i + self.half] = a * s + b * c;
                }
            }
        }
        out
    }
}

impl<S: Scalar> CustomOp<S> for Rope<S> {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, g: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        vec![Some(self.apply(g, true))]
    }
}

/// Scaled dot-product attention of already-projected `q, k, v: [T, d]`,
/// causal within each segment.
pub fn attention_core<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    segs: &Segments,
    n_heads: usize,
) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    if s.len() != 2 || tape.shape(k) != s.as_slice() || tape.shape(v) != s.as_slice() {
        return Err(crate::Error::ShapeMismatch { op: "attention", lhs: s, rhs: tape.shape(k).to_vec() });
    }
    if segs.total() != s[0] || n_heads == 0 || !s[1].is_multiple_of(n_heads) {
        return Err(invalid("attention", format!("{} segment rows for shape {s:?}", segs.total())));
    }
    let (t, d) = (s[0], s[1]);
    let dh = d / n_heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let (qd, kd, vd) = (tape.value(q).data(), tape.value(k).data(), tape.value(v).data());
    let mut out = vec![S::zero(); t * d];
    let mut probs = Vec::with_capacity(segs.lens().iter().map(|n| n * n * n_heads).sum());
    for (off, n) in segs.spans() {
        for h in 0..n_heads {
            let col = off * d + h * dh;
            let view = MatView { rows: n, cols: dh, row_stride: d, col_stride: 1, offset: col };
            let mut p = vec![S::zero(); n * n];
            gemm(scale, qd, view, kd, view.t(), S::zero(), &mut p, MatView::row_major(n, n, 0));
            for i in 0..n {
                let row = &mut p[i * n..(i + 1) * n];
                let mx = row[..=i].iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for e in row[..=i].iter_mut() {
                    *e = (*e - mx).exp();
                    z += *e;
                }
                for e in row[..=i].iter_mut() {
                    *e /= z;
                }
                row[i + 1..].iter_mut().for_each(|e| *e = S::zero());
            }
            gemm(S::one(), &p, MatView::row_major(n, n, 0), vd, view, S::zero(), &mut out, view);
            probs.extend_from_slice(&p);
        }
    }
    let op = AttentionCore { probs, spans: segs.spans().collect(), n_heads, scale };
    Ok(tape.custom(&[q, k, v], Tensor::new(s, out)?, Box::new(op)))
}

struct AttentionCore<S> {
    probs: Vec<S>,
    spans: Vec<(usize, usize)>,
    n_heads: usize,
    scale: S,
}

impl<S: Scalar> CustomOp<S> for AttentionCore<S> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, g: &Tensor<S>) -> Vec<Option<Tensor<S>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let d = q.last_dim();
        let dh = d / self.n_heads;
        let mut dq = vec![S::zero(); q.numel()];
        let mut dk = vec![S::zero(); q.numel()];
        let mut dv = vec![S::zero(); q.numel()];
        let mut at = 0;
        for &(off, n) in &self.spans {
            for h in 0..self.n_heads {
                let p = &self.probs[at..at + n * n];
                at += n * n;
                let view = MatView { rows: n, cols: dh, row_stride: d, col_stride: 1, offset: off * d + h * dh };
                let sq = MatView::row_major(n, n, 0);
                // dV = P^T dO
                gemm(S::one(), p, sq.t(), g.data(), view, S::zero(), &mut dv, view);
                // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
                let mut ds = vec![S::zero(); n * n];
                gemm(S::one(), g.data(), view, v.data(), view.t(), S::zero(), &mut ds, sq);
                for i in 0..n {
                    let (pr, dr) = (&p[i * n..(i + 1) * n], &mut ds[i * n..(i + 1) * n]);
                    let dot: S = pr[..=i].iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = if j <= i { pr[j] * (dr[j] - dot) } else { S::zero() };
                    }
                }
                gemm(self.scale, &ds, sq, k.data(), view, S::zero(), &mut dq, view);
                gemm(self.scale, &ds, sq.t(), q.data(), view, S::zero(), &mut dk, view);
            }
        }
        let shape = q.shape().to_vec();
        vec![
            Some(Tensor::new(shape.clone(), dq).unwrap()),
            Some(Tensor::new(shape.clone(), dk).unwrap()),
            Some(Tensor::new(shape, dv).unwrap()),
        ]
    }
}
