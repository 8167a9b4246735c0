//! Top-k routed SwiGLU experts with a load-balancing loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::init_matrix;
use crate::error::{invalid, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// `down(silu(x W_gate) * (x W_up))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert<W> {
    pub w_gate: W,
    pub w_up: W,
    pub w_down: W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoEBlock<W> {
    /// `[d, n_experts]` router projection.
    pub router: W,
    pub experts: Vec<Expert<W>>,
    pub k_active: usize,
}

impl<W> MoEBlock<W> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a W) -> U) -> MoEBlock<U> {
        MoEBlock {
            router: f(&format!("{prefix}.router"), &self.router),
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(i, e)| Expert {
                    w_gate: f(&format!("{prefix}.expert{i}.w_gate"), &e.w_gate),
                    w_up: f(&format!("{prefix}.expert{i}.w_up"), &e.w_up),
                    w_down: f(&format!("{prefix}.expert{i}.w_down"), &e.w_down),
                })
                .collect(),
            k_active: self.k_active,
        }
    }
}

impl<S: Scalar> MoEBlock<Tensor<S>> {
    pub fn init(
        rng: &mut impl Rng,
        d: usize,
        d_ff: usize,
        n_experts: usize,
        k_active: usize,
        std: f64,
    ) -> Result<Self> {
        if k_active == 0 || k_active > n_experts {
            return Err(invalid("moe", format!("k_active={k_active} outside 1..={n_experts}")));
        }
        let router = init_matrix(rng, d, n_experts, std);
        let experts = (0..n_experts)
            .map(|_| Expert {
                w_gate: init_matrix(rng, d, d_ff, std),
                w_up: init_matrix(rng, d, d_ff, std),
                w_down: init_matrix(rng, d_ff, d, std),
            })
            .collect();
        Ok(Self { router, experts, k_active })
    }
}

pub struct MoeOutput {
    pub out: Var,
    /// `n_experts * sum_e f_e g_e`.
    pub balance: Var,
    /// `[T, k]` chosen expert ids, highest probability first.
    pub selection: Vec<usize>,
}

/// Indices of the `k` largest entries of each row of `probs: [T, E]`,
/// ordered by descending value; equal values resolve to the lower index.
pub fn route_top_k<S: Scalar>(probs: &Tensor<S>, k: usize) -> Vec<usize> {
    let e = probs.last_dim();
    let mut sel = Vec::with_capacity(probs.rows() * k);
    let mut idx: Vec<usize> = Vec::with_capacity(e);
    for r in 0..probs.rows() {
        let row = probs.row(r);
        idx.clear();
        idx.extend(0..e);
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
        sel.extend_from_slice(&idx[..k]);
    }
    sel
}

pub fn moe_forward<S: Scalar>(tape: &mut Tape<S>, x: Var, block: &MoEBlock<Var>) -> Result<MoeOutput> {
    let logits = tape.matmul(x, block.router)?;
    let probs = tape.softmax(logits, 1)?;
    let selection = route_top_k(tape.value(probs), block.k_active);
    finish(tape, x, block, probs, selection)
}

/// As [`moe_forward`] but with the expert choice fixed by the caller, so the
/// result is a smooth function of every weight.
pub fn moe_forward_routed<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    block: &MoEBlock<Var>,
    selection: Vec<usize>,
) -> Result<MoeOutput> {
    let logits = tape.matmul(x, block.router)?;
    let probs = tape.softmax(logits, 1)?;
    let t = tape.shape(x)[0];
    if selection.len() != t * block.k_active || selection.iter().any(|&e| e >= block.n_experts()) {
        return Err(invalid("moe", "selection does not match [T, k_active] expert ids"));
    }
    finish(tape, x, block, probs, selection)
}

fn finish<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    block: &MoEBlock<Var>,
    probs: Var,
    selection: Vec<usize>,
) -> Result<MoeOutput> {
    let (t, n_e, k) = (tape.shape(x)[0], block.n_experts(), block.k_active);

    let flat = tape.reshape(probs, &[t * n_e, 1])?;
    let picks: Vec<usize> = selection.iter().enumerate().map(|(i, &e)| (i / k) * n_e + e).collect();
    let chosen = tape.gather(flat, &picks)?;
    let chosen = tape.reshape(chosen, &[t, k])?;
    let norm = tape.sum(chosen, 1)?;
    let inv = tape.pow(norm, -S::one());
    let gates = tape.mul_rows(chosen, inv)?;
    let gates = tape.reshape(gates, &[t * k])?;

    let mut rows_of: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    let mut slots_of: Vec<Vec<usize>> = vec![Vec::new(); n_e];
    for (i, &e) in selection.iter().enumerate() {
        rows_of[e].push(i / k);
        slots_of[e].push(i);
    }

    let mut out: Option<Var> = None;
    for (e, ex) in block.experts.iter().enumerate() {
        if rows_of[e].is_empty() {
            continue;
        }
        let xe = tape.gather(x, &rows_of[e])?;
        let g = tape.matmul(xe, ex.w_gate)?;
        let g = tape.silu(g);
        let u = tape.matmul(xe, ex.w_up)?;
        let h = tape.mul(g, u)?;
        let y = tape.matmul(h, ex.w_down)?;
        let ge = tape.gather(gates, &slots_of[e])?;
        let y = tape.mul_rows(y, ge)?;
        let y = tape.scatter_add(y, &rows_of[e], t)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    let out = out.ok_or_else(|| invalid("moe", "no tokens routed"))?;

    let frac = Tensor::from_fn([n_e], |e| S::of((rows_of[e].len() * n_e) as f64 / (t * k) as f64));
    let frac = tape.leaf(frac);
    let mean_p = tape.mean(probs, 0)?;
    let fg = tape.mul(mean_p, frac)?;
    let balance = tape.sum_all(fg);
    Ok(MoeOutput { out, balance, selection })
}
