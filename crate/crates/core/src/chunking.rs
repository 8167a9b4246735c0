//! Boundary scoring, boundary sampling, the compression auxiliary loss and
//! token-to-concept merging.
//!
//! Position 0 of every packed sequence is always a boundary with `p = 1`,
//! so every sequence owns at least one concept.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dechunking::IndexMaps;
use crate::error::{invalid, Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var, NORM_EPS};
use crate::transformer::{init_matrix, Segments};

/// Cosine router projections.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterWeights<W> {
    pub wq: W,
    pub wk: W,
}

impl<W> RouterWeights<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> RouterWeights<U> {
        RouterWeights { wq: f(&format!("{prefix}.wq"), &self.wq), wk: f(&format!("{prefix}.wk"), &self.wk) }
    }
}

impl<S: Scalar> RouterWeights<Tensor<S>> {
    pub fn init(rng: &mut impl Rng, d: usize, std: f64) -> Self {
        Self { wq: init_matrix(rng, d, d, std), wk: init_matrix(rng, d, d, std) }
    }
}

/// Linear router: `p = sigmoid(h . v + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRouter<W> {
    /// `[d, 1]`
    pub v: W,
    /// `[1, 1]`
    pub bias: W,
}

impl<W> LinearRouter<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> LinearRouter<U> {
        LinearRouter { v: f(&format!("{prefix}.v"), &self.v), bias: f(&format!("{prefix}.bias"), &self.bias) }
    }
}

impl<S: Scalar> LinearRouter<Tensor<S>> {
    pub fn init(rng: &mut impl Rng, d: usize, std: f64) -> Self {
        Self { v: init_matrix(rng, d, 1, std), bias: Tensor::zeros([1, 1]) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterKind {
    Cosine,
    Linear,
    /// Boundary at every `stride`-th position of each sequence, starting at 0.
    Fixed {
        stride: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    None,
    /// `b ~ Bernoulli(sharpen(p, tau))`.
    Bernoulli {
        tau: f64,
    },
    /// `b = clamp(p + N(0, sigma^2), 0, 1) >= 0.5`.
    Gaussian {
        sigma: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { kind: NoiseKind::Bernoulli { tau: 6.0 }, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Bernoulli { tau } if !(tau >= 1.0) => Err(Error::Config(format!("noise tau {tau} < 1"))),
            NoiseKind::Gaussian { sigma } if !(sigma >= 0.0) => Err(Error::Config(format!("noise sigma {sigma} < 0"))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    /// The boundary token's hidden state.
    LastToken,
    /// Sum over `(phi(m-1), phi(m)]`: each chunk ends at its boundary.
    Sum,
    /// Sum over `[phi(m), phi(m+1))`. Reads tokens after the boundary, so it
    /// is not causal.
    SumForward,
}

/// Boundary probabilities and the mask actually used.
#[derive(Clone, Debug)]
pub struct ChunkDecision {
    /// `[N]` boundary probabilities.
    pub p: Var,
    pub b: Vec<bool>,
    /// `[N]`, `p` where `b` else `1 - p`.
    pub selected_prob: Var,
    /// `p >= 0.5`; equals `b` when no noise was applied.
    pub thresholded: Vec<bool>,
}

impl ChunkDecision {
    pub fn n(&self) -> usize {
        self.b.len()
    }

    pub fn m(&self) -> usize {
        self.b.iter().filter(|&&x| x).count()
    }

    /// Fraction of positions where the sampled mask differs from the threshold.
    pub fn flip_rate(&self) -> f64 {
        let flips = self.b.iter().zip(&self.thresholded).filter(|(a, b)| a != b).count();
        flips as f64 / self.n().max(1) as f64
    }
}

fn force_starts<S: Scalar>(tape: &mut Tape<S>, p: Var, segs: &Segments) -> Result<Var> {
    let n = segs.total();
    let mut mask = vec![false; n];
    for s in segs.starts() {
        mask[s] = true;
    }
    let ones = tape.leaf(Tensor::ones([n]));
    tape.where_(&mask, ones, p)
}

/// `p_n = clamp((1 - cos(W_q h_n, W_k h_{n-1})) / 2, 0, 1)`, with `p = 1` at
/// every sequence start.
pub fn boundary_scores<S: Scalar>(tape: &mut Tape<S>, h: Var, w: &RouterWeights<Var>, segs: &Segments) -> Result<Var> {
    let n = tape.shape(h)[0];
    if n == 0 || segs.total() != n {
        return Err(invalid("boundary_scores", format!("{n} rows for segments {:?}", segs.lens())));
    }
    if n == 1 {
        return Ok(tape.leaf(Tensor::ones([1])));
    }
    let q = tape.matmul(h, w.wq)?;
    let k = tape.matmul(h, w.wk)?;
    let q = tape.l2_normalize(q, 1, S::of(NORM_EPS))?;
    let k = tape.l2_normalize(k, 1, S::of(NORM_EPS))?;
    let cur = tape.slice(q, 0, 1, n)?;
    let prev = tape.slice(k, 0, 0, n - 1)?;
    let prod = tape.mul(cur, prev)?;
    let cos = tape.sum(prod, 1)?;
    let half = S::of(0.5);
    let p = tape.scale(cos, -half);
    let p = tape.add_scalar(p, half);
    let p = tape.clamp(p, S::zero(), S::one())?;
    let first = tape.leaf(Tensor::ones([1]));
    let p = tape.concat(&[first, p], 0)?;
    force_starts(tape, p, segs)
}

/// `p_n = sigmoid(h_n . v + bias)`, with `p = 1` at every sequence start.
pub fn linear_router_scores<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    w: &LinearRouter<Var>,
    segs: &Segments,
) -> Result<Var> {
    let n = tape.shape(h)[0];
    if segs.total() != n {
        return Err(invalid("linear_router_scores", format!("{n} rows for segments {:?}", segs.lens())));
    }
    let logit = tape.matmul(h, w.v)?;
    let ones = tape.leaf(Tensor::ones([n, 1]));
    let bias = tape.matmul(ones, w.bias)?;
    let logit = tape.add(logit, bias)?;
    let p = tape.sigmoid(logit);
    let p = tape.reshape(p, &[n])?;
    force_starts(tape, p, segs)
}

/// One-hot boundary probabilities for a fixed stride within each sequence.
pub fn fixed_scores<S: Scalar>(tape: &mut Tape<S>, segs: &Segments, stride: usize) -> Result<Var> {
    if stride == 0 {
        return Err(invalid("fixed_scores", "stride must be positive"));
    }
    let p: Vec<S> = segs.positions().iter().map(|&i| if i % stride == 0 { S::one() } else { S::zero() }).collect();
    Ok(tape.leaf(Tensor::vector(p)))
}

/// `p^(1/tau)` for `p >= 0.5`, else `1 - (1-p)^(1/tau)`.
pub fn sharpen(p: f64, tau: f64) -> f64 {
    if p >= 0.5 {
        Float::powf(p, 1.0 / tau)
    } else {
        1.0 - Float::powf(1.0 - p, 1.0 / tau)
    }
}

/// `b_n = p_n >= 0.5`.
pub fn threshold(p: &[f64]) -> Vec<bool> {
    p.iter().map(|&x| x >= 0.5).collect()
}

/// `b_n ~ Bernoulli(p_sharp_n)`, then position 0 and every `forced` index
/// set to true.
pub fn sample_boundaries(p_sharp: &[f64], forced: &[usize], rng: &mut impl Rng) -> Vec<bool> {
    let mut b: Vec<bool> = p_sharp.iter().map(|&q| rng.random::<f64>() < q).collect();
    force(&mut b, forced);
    b
}

/// `b_n = clamp(p_n + eps_n, 0, 1) >= 0.5` with `eps ~ N(0, sigma^2)`.
pub fn gaussian_boundaries(p: &[f64], sigma: f64, forced: &[usize], rng: &mut impl Rng) -> Vec<bool> {
    let mut b: Vec<bool> = p
        .iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            (x + sigma * e).clamp(0.0, 1.0) >= 0.5
        })
        .collect();
    force(&mut b, forced);
    b
}

fn force(b: &mut [bool], forced: &[usize]) {
    if let Some(first) = b.first_mut() {
        *first = true;
    }
    for &i in forced {
        b[i] = true;
    }
}

/// Draws the boundary mask for `p` and records the selected probabilities.
/// `rng = None` means evaluation: plain thresholding, no noise.
pub fn decide<S: Scalar, G: Rng>(
    tape: &mut Tape<S>,
    p: Var,
    noise: NoiseKind,
    rng: Option<&mut G>,
    segs: &Segments,
) -> Result<ChunkDecision> {
    let pv: Vec<f64> = tape.value(p).data().iter().map(|x| x.as_f64()).collect();
    let thresholded = threshold(&pv);
    let starts = segs.starts();
    let b = match (rng, noise) {
        (Some(rng), NoiseKind::Bernoulli { tau }) => {
            let ps: Vec<f64> = pv.iter().map(|&x| sharpen(x, tau)).collect();
            sample_boundaries(&ps, &starts, rng)
        }
        (Some(rng), NoiseKind::Gaussian { sigma }) => gaussian_boundaries(&pv, sigma, &starts, rng),
        _ => {
            let mut b = thresholded.clone();
            force(&mut b, &starts);
            b
        }
    };
    let inv = tape.rsub_scalar(S::one(), p);
    let selected_prob = tape.where_(&b, p, inv)?;
    Ok(ChunkDecision { p, b, selected_prob, thresholded })
}

/// `R F1 G1 + R/(R-1) (1 - F1)(1 - G1)` evaluated directly.
pub fn aux_loss_value(f1: f64, g1: f64, r: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(invalid("aux_loss", format!("target ratio {r} must exceed 1")));
    }
    Ok(r * f1 * g1 + r / (r - 1.0) * (1.0 - f1) * (1.0 - g1))
}

/// Compression loss over every position of the batch jointly: `G1` is the
/// mean of `p`, `F1` the boundary fraction of `b`. Only `p` carries gradient.
pub fn aux_loss<S: Scalar>(tape: &mut Tape<S>, p: Var, b: &[bool], r: f64) -> Result<Var> {
    if !(r > 1.0) {
        return Err(invalid("aux_loss", format!("target ratio {r} must exceed 1")));
    }
    let n = tape.value(p).numel();
    if n == 0 || b.len() != n {
        return Err(Error::ShapeMismatch { op: "aux_loss", lhs: tape.shape(p).to_vec(), rhs: vec![b.len()] });
    }
    let f1 = b.iter().filter(|&&x| x).count() as f64 / n as f64;
    let c = r / (r - 1.0) * (1.0 - f1);
    let g1 = tape.mean_all(p);
    // Linear in G1: (R F1 - c) G1 + c.
    let y = tape.scale(g1, S::of(r * f1 - c));
    Ok(tape.add_scalar(y, S::of(c)))
}

/// Concept for each boundary of `b`, per `strategy`. Sum spans never cross
/// a sequence start; tokens after a sequence's last boundary belong to no
/// concept under [`MergeStrategy::Sum`].
pub fn merge<S: Scalar>(
    tape: &mut Tape<S>,
    h: Var,
    b: &[bool],
    strategy: MergeStrategy,
    segs: &Segments,
) -> Result<Var> {
    let n = tape.shape(h)[0];
    if b.len() != n || segs.total() != n {
        return Err(Error::ShapeMismatch { op: "merge", lhs: tape.shape(h).to_vec(), rhs: vec![b.len()] });
    }
    let maps = IndexMaps::build(b)?;
    match strategy {
        MergeStrategy::LastToken => tape.gather(h, maps.phi()),
        MergeStrategy::Sum | MergeStrategy::SumForward => {
            let (rows, dest) = sum_spans(b, strategy, segs, &maps);
            let picked = tape.gather(h, &rows)?;
            tape.scatter_add(picked, &dest, maps.m())
        }
    }
}

/// `(token row, concept index)` pairs making up each summed chunk.
fn sum_spans(b: &[bool], strategy: MergeStrategy, segs: &Segments, maps: &IndexMaps) -> (Vec<usize>, Vec<usize>) {
    let (mut rows, mut dest) = (Vec::with_capacity(b.len()), Vec::with_capacity(b.len()));
    for (off, len) in segs.spans() {
        match strategy {
            MergeStrategy::SumForward => {
                for r in off..off + len {
                    rows.push(r);
                    dest.push(maps.psi()[r]);
                }
            }
            _ => {
                let mut pending = Vec::new();
                for r in off..off + len {
                    pending.push(r);
                    if b[r] {
                        let m = maps.psi()[r];
                        for &t in &pending {
                            rows.push(t);
                            dest.push(m);
                        }
                        pending.clear();
                    }
                }
            }
        }
    }
    (rows, dest)
}

/// `R = N / M`.
pub fn compression_ratio(n: usize, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(invalid("compression_ratio", "no concepts"));
    }
    Ok(n as f64 / m as f64)
}

/// Number of boundaries falling in each packed sequence.
pub fn concept_segments(b: &[bool], segs: &Segments) -> Result<Segments> {
    Segments::new(segs.spans().map(|(o, n)| b[o..o + n].iter().filter(|&&x| x).count()).collect())
}
