//! Pre-norm transformer blocks: RMSNorm, rotary causal attention with
//! optional concept conditioning, and top-k mixture-of-experts FFNs.
//!
//! Every block operates on a packed `[T, d]` matrix holding one or more
//! independent sequences; [`Segments`] records where each one starts so
//! attention and positions never cross a sequence boundary.

mod attention;
mod moe;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use attention::{attention_core, causal_attention, rope, AttentionWeights, ConceptProjectors};
pub use moe::{moe_forward, moe_forward_routed, route_top_k, Expert, MoEBlock, MoeOutput};

use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;

/// Lengths of the sequences packed row-wise into one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    lens: Vec<usize>,
}

impl Segments {
    /// Zero-length segments are rejected.
    pub fn new(lens: Vec<usize>) -> Result<Self> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(invalid("segments", format!("segment lengths {lens:?} must be non-empty and positive")));
        }
        Ok(Self { lens })
    }

    pub fn single(n: usize) -> Self {
        Self { lens: alloc::vec![n] }
    }

    pub fn uniform(count: usize, len: usize) -> Self {
        Self { lens: alloc::vec![len; count] }
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn count(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// `(row offset, length)` per segment.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lens.iter().scan(0, |off, &n| {
            let s = *off;
            *off += n;
            Some((s, n))
        })
    }

    /// Row offsets where segments begin.
    pub fn starts(&self) -> Vec<usize> {
        self.spans().map(|(o, _)| o).collect()
    }

    /// Position of each row within its own segment.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&n| 0..n).collect()
    }
}

/// Pre-norm block: `x + attn(norm(x))`, then `x + moe(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<W> {
    pub attn_norm: W,
    pub attn: AttentionWeights<W>,
    pub moe_norm: W,
    pub moe: MoEBlock<W>,
}

impl<W> Layer<W> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> Layer<U> {
        Layer {
            attn_norm: f(&format!("{prefix}.attn_norm"), &self.attn_norm),
            attn: self.attn.map(&format!("{prefix}.attn"), f),
            moe_norm: f(&format!("{prefix}.moe_norm"), &self.moe_norm),
            moe: self.moe.map(&format!("{prefix}.moe"), f),
        }
    }
}

/// Shape of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerShape {
    pub d: usize,
    pub n_heads: usize,
    pub n_experts: usize,
    pub k_active: usize,
    pub d_ff: usize,
    pub concept_projectors: bool,
}

impl<S: Scalar> Layer<Tensor<S>> {
    pub fn init(rng: &mut impl Rng, shape: LayerShape, std: f64) -> Result<Self> {
        Ok(Self {
            attn_norm: Tensor::ones([shape.d]),
            attn: AttentionWeights::init(rng, shape.d, shape.n_heads, shape.concept_projectors, std)?,
            moe_norm: Tensor::ones([shape.d]),
            moe: MoEBlock::init(rng, shape.d, shape.d_ff, shape.n_experts, shape.k_active, std)?,
        })
    }
}

/// Output of one layer plus its MoE balance loss.
pub struct LayerOutput {
    pub x: Var,
    pub balance: Var,
}

pub fn layer_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    layer: &Layer<Var>,
    concepts: Option<Var>,
    segs: &Segments,
) -> Result<LayerOutput> {
    let h = rmsnorm(tape, x, layer.attn_norm)?;
    let a = causal_attention(tape, h, &layer.attn, concepts, segs, ROPE_BASE)?;
    let x = tape.add(x, a)?;
    let h = rmsnorm(tape, x, layer.moe_norm)?;
    let m = moe_forward(tape, h, &layer.moe)?;
    let x = tape.add(x, m.out)?;
    Ok(LayerOutput { x, balance: m.balance })
}

/// `x / sqrt(mean(x^2) + eps) * gain` over the last axis of `x: [T, d]`.
pub fn rmsnorm<S: Scalar>(tape: &mut Tape<S>, x: Var, gain: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let ms = tape.mean(sq, 1)?;
    let ms = tape.add_scalar(ms, S::of(RMS_EPS));
    let inv = tape.pow(ms, S::of(-0.5));
    let y = tape.mul_rows(x, inv)?;
    tape.mul(y, gain)
}

/// Rows of `table: [V, d]` selected by token id.
pub fn embed<S: Scalar>(tape: &mut Tape<S>, table: Var, ids: &[u32]) -> Result<Var> {
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    tape.gather(table, &rows)
}

/// `x: [T, d]` times the untied head `[d, V]`.
pub fn lm_head<S: Scalar>(tape: &mut Tape<S>, x: Var, head: Var) -> Result<Var> {
    tape.matmul(x, head)
}

/// `rows x cols` matrix with i.i.d. `N(0, std^2)` entries.
pub fn init_matrix<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<S> {
    Tensor::from_fn([rows, cols], |_| {
        let z: f64 = StandardNormal.sample(rng);
        S::of(z * std)
    })
}

#[cfg(test)]
mod tests;
