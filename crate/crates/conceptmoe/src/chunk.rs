//! Boundary rendering for a checkpoint applied to raw text.

use conceptmoe_core::data::tokenize;
use conceptmoe_core::model::{forward, Architecture, Mode, ModelConfig, Weights};
use conceptmoe_core::numerics::{Tape, Tensor};
use conceptmoe_core::transformer::Segments;
use serde::Serialize;

use crate::error::{AppError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Chunking {
    /// 1-based byte positions that start a chunk; always contains 1.
    pub positions: Vec<usize>,
    /// Boundary probability of every byte.
    pub probabilities: Vec<f64>,
    #[serde(rename = "R_achieved")]
    pub r_achieved: f64,
}

/// Eval-mode boundaries of `text` read as one sequence.
pub fn chunk_text(cfg: &ModelConfig, w: &Weights<Tensor<f32>>, text: &[u8]) -> Result<Chunking> {
    if cfg.architecture != Architecture::Concept {
        return Err(AppError::Usage("baseline checkpoints have no chunk boundaries".into()));
    }
    if text.is_empty() {
        return Err(AppError::Usage("text is empty".into()));
    }
    let ids = tokenize(text);
    let mut tape = Tape::new();
    let wv = w.bind_consts(&mut tape);
    let tr = forward(&mut tape, cfg, &wv, &ids, None, &Segments::single(ids.len()), Mode::Eval)?;
    let d = tr.decision.as_ref().expect("concept architecture decides boundaries");
    Ok(Chunking {
        positions: d.b.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i + 1).collect(),
        probabilities: tr.p_values(&tape),
        r_achieved: tr.r_achieved(),
    })
}

/// `text` with `|` inserted before every boundary byte.
pub fn annotate(text: &[u8], c: &Chunking) -> Vec<u8> {
    let mut out = Vec::with_capacity(text.len() + c.positions.len());
    let mut next = c.positions.iter().peekable();
    for (i, &b) in text.iter().enumerate() {
        if next.peek() == Some(&&(i + 1)) {
            out.push(b'|');
            next.next();
        }
        out.push(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use conceptmoe_core::chunking::{MergeStrategy, RouterKind};

    use super::*;

    fn cfg(stride: usize) -> ModelConfig {
        ModelConfig {
            d: 8,
            d_c: 8,
            n_heads: 2,
            l_e: 1,
            l_c: 1,
            l_d: 1,
            n_experts: 2,
            k_active: 1,
            d_ff: 8,
            router: RouterKind::Fixed { stride },
            merge: MergeStrategy::LastToken,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn all_boundary_marks_every_byte() {
        let c = cfg(1);
        let w = Weights::init(&c, 0).unwrap();
        let ch = chunk_text(&c, &w, b"abc").unwrap();
        assert_eq!(annotate(b"abc", &ch), b"|a|b|c");
        assert_eq!(ch.r_achieved, 1.0);
        assert_eq!(ch.probabilities, vec![1.0; 3]);
    }

    #[test]
    fn stride_four() {
        let c = cfg(4);
        let w = Weights::init(&c, 0).unwrap();
        let text = b"Simple and easy";
        let ch = chunk_text(&c, &w, text).unwrap();
        assert_eq!(ch.positions, vec![1, 5, 9, 13]);
        assert_eq!(annotate(text, &ch), b"|Simp|le a|nd e|asy");
        assert_eq!(ch.r_achieved, 15.0 / 4.0);
        let json = serde_json::to_value(&ch).unwrap();
        assert!(json.get("R_achieved").is_some());
    }

    #[test]
    fn baseline_is_rejected() {
        let c = ModelConfig { architecture: Architecture::Baseline, ..cfg(1) };
        let w = Weights::init(&c, 0).unwrap();
        assert!(chunk_text(&c, &w, b"x").is_err());
    }
}
