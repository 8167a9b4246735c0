use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, ModelConfig, Router, Weights};
use crate::chunking::{
    aux_loss, boundary_scores, compression_ratio, concept_segments, decide, fixed_scores, linear_router_scores, merge,
    ChunkDecision, RouterKind,
};
use crate::dechunking::{boundary_probs, dechunk, ema, IndexMaps};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::transformer::{embed, layer_forward, lm_head, rmsnorm, Layer, Segments};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Thresholded boundaries, no noise.
    Eval,
    /// Boundary noise drawn from a stream keyed by the noise seed and `step`.
    Train { step: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    /// `ce + lambda_aux * aux + balance_weight * balance`
    pub total: Var,
    pub ce: Var,
    pub aux: Var,
    pub balance: Var,
}

pub struct ForwardTrace {
    /// `[N, vocab]`
    pub logits: Var,
    /// Absent for the baseline architecture.
    pub decision: Option<ChunkDecision>,
    pub n_tokens: usize,
    pub n_concepts: usize,
    pub losses: Option<Losses>,
}

impl ForwardTrace {
    /// `N / M` over the whole batch.
    pub fn r_achieved(&self) -> f64 {
        compression_ratio(self.n_tokens, self.n_concepts).unwrap_or(f64::NAN)
    }

    /// Mean boundary probability over every position; 1 for the baseline.
    pub fn p_mean<S: Scalar>(&self, tape: &Tape<S>) -> f64 {
        match &self.decision {
            Some(d) => {
                let p = tape.value(d.p);
                p.data().iter().map(|x| x.as_f64()).sum::<f64>() / p.numel() as f64
            }
            None => 1.0,
        }
    }

    pub fn p_values<S: Scalar>(&self, tape: &Tape<S>) -> Vec<f64> {
        match &self.decision {
            Some(d) => tape.value(d.p).data().iter().map(|x| x.as_f64()).collect(),
            None => alloc::vec![1.0; self.n_tokens],
        }
    }

    pub fn flip_rate(&self) -> f64 {
        self.decision.as_ref().map_or(0.0, ChunkDecision::flip_rate)
    }
}

/// Concept-layer visiting order: the first `l_loop` layers run twice, then
/// the rest once.
pub fn concept_order(l_c: usize, l_loop: usize) -> Vec<usize> {
    (0..l_loop).chain(0..l_c).collect()
}

fn run_stack<S: Scalar>(
    tape: &mut Tape<S>,
    mut x: Var,
    layers: &[Layer<Var>],
    order: impl IntoIterator<Item = usize>,
    concepts: Option<Var>,
    segs: &Segments,
    balance: &mut Vec<Var>,
) -> Result<Var> {
    for i in order {
        let l = &layers[i];
        let c = if l.attn.concept.is_some() { concepts } else { None };
        let o = layer_forward(tape, x, l, c, segs)?;
        x = o.x;
        balance.push(o.balance);
    }
    Ok(x)
}

/// Full pipeline over the packed sequences `ids` laid out by `segs`.
/// Losses are computed when `targets` is given.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    ids: &[u32],
    targets: Option<&[u32]>,
    segs: &Segments,
    mode: Mode,
) -> Result<ForwardTrace> {
    let n = ids.len();
    if n == 0 || segs.total() != n {
        return Err(Error::Config(alloc::format!("{n} ids for segments {:?}", segs.lens())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab) {
        return Err(Error::Config(alloc::format!("token id {bad} outside vocab {}", cfg.vocab)));
    }
    let mut balance = Vec::new();
    let x = embed(tape, w.embed, ids)?;
    let h = run_stack(tape, x, &w.encoder, 0..w.encoder.len(), None, segs, &mut balance)?;

    let (z, aligned, decision, n_concepts) = match cfg.architecture {
        Architecture::Baseline => {
            let x =
                run_stack(tape, h, &w.concept, concept_order(w.concept.len(), cfg.l_loop), None, segs, &mut balance)?;
            (x, None, None, n)
        }
        Architecture::Concept => {
            let p = match (cfg.router, &w.router) {
                (RouterKind::Fixed { stride }, _) => fixed_scores(tape, segs, stride)?,
                (RouterKind::Cosine, Some(Router::Cosine(r))) => boundary_scores(tape, h, r, segs)?,
                (RouterKind::Linear, Some(Router::Linear(r))) => linear_router_scores(tape, h, r, segs)?,
                _ => return Err(Error::Config("router weights do not match router kind".into())),
            };
            let mut rng = match (mode, cfg.router) {
                (_, RouterKind::Fixed { .. }) | (Mode::Eval, _) => None,
                (Mode::Train { step }, _) => {
                    let mut r = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
                    r.set_stream(step);
                    Some(r)
                }
            };
            let dec = decide(tape, p, cfg.noise.kind, rng.as_mut(), segs)?;
            let maps = IndexMaps::build(&dec.b)?;
            let c = merge(tape, h, &dec.b, cfg.merge, segs)?;
            let c_segs = concept_segments(&dec.b, segs)?;
            let c_in = match w.proj_in {
                Some(pi) => tape.matmul(c, pi)?,
                None => c,
            };
            let order = concept_order(w.concept.len(), cfg.l_loop);
            let c_out = run_stack(tape, c_in, &w.concept, order, None, &c_segs, &mut balance)?;
            // The concept stack contributes its residual update.
            let delta = tape.sub(c_out, c_in)?;
            let delta = match w.proj_out {
                Some(po) => tape.matmul(delta, po)?,
                None => delta,
            };
            let pb = boundary_probs(tape, dec.p, &maps)?;
            let e = ema(tape, delta, pb, cfg.ema)?;
            let out = dechunk(tape, e, &maps, h, dec.selected_prob)?;
            let m = maps.m();
            (out.z, Some(out.aligned), Some(dec), m)
        }
    };

    let x = run_stack(tape, z, &w.decoder, 0..w.decoder.len(), aligned, segs, &mut balance)?;
    let x = rmsnorm(tape, x, w.final_norm)?;
    let logits = lm_head(tape, x, w.head)?;

    let losses = match targets {
        None => None,
        Some(t) => {
            if t.len() != n {
                return Err(Error::ShapeMismatch { op: "forward", lhs: alloc::vec![n], rhs: alloc::vec![t.len()] });
            }
            let ce = tape.cross_entropy(logits, t)?;
            let aux = match (&decision, cfg.router) {
                (Some(d), RouterKind::Cosine | RouterKind::Linear) => aux_loss(tape, d.p, &d.b, cfg.r_target)?,
                _ => tape.leaf(Tensor::scalar(S::zero())),
            };
            let bal = match balance.split_first() {
                Some((&first, rest)) => {
                    let mut acc = first;
                    for &b in rest {
                        acc = tape.add(acc, b)?;
                    }
                    tape.scale(acc, S::of(1.0 / balance.len() as f64))
                }
                None => tape.leaf(Tensor::scalar(S::zero())),
            };
            let wa = tape.scale(aux, S::of(cfg.lambda_aux));
            let wb = tape.scale(bal, S::of(cfg.balance_weight));
            let total = tape.add(ce, wa)?;
            let total = tape.add(total, wb)?;
            Some(Losses { total, ce, aux, balance: bal })
        }
    };

    Ok(ForwardTrace { logits, decision, n_tokens: n, n_concepts, losses })
}

/// Forward of `ids` as a single sequence with constant weights, returning
/// the logits.
pub fn logits_of<S: Scalar>(cfg: &ModelConfig, w: &Weights<Tensor<S>>, ids: &[u32]) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let wv = w.bind_consts(&mut tape);
    let tr = forward(&mut tape, cfg, &wv, ids, None, &Segments::single(ids.len()), Mode::Eval)?;
    Ok(tape.value(tr.logits).clone())
}
