use alloc::format;

use serde::{Deserialize, Serialize};

use crate::chunking::{MergeStrategy, NoiseConfig, NoiseKind, RouterKind};
use crate::data::VOCAB;
use crate::dechunking::EmaMode;
use crate::error::{Error, Result};
use crate::transformer::LayerShape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Plain MoE transformer with `l_e + l_c + l_d` layers.
    Baseline,
    /// Encoder, chunked concept stack, decoder.
    Concept,
}

fn default_joint_layers() -> usize {
    4
}
fn default_lambda() -> f64 {
    0.03
}
fn default_balance() -> f64 {
    0.01
}
fn default_vocab() -> usize {
    VOCAB
}
fn default_std() -> f64 {
    0.02
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub d: usize,
    /// Concept-stack width; projectors `d -> d_c -> d` exist when larger than `d`.
    pub d_c: usize,
    pub n_heads: usize,
    pub l_e: usize,
    pub l_c: usize,
    pub l_d: usize,
    /// Leading concept layers run a second time with shared weights.
    #[serde(default)]
    pub l_loop: usize,
    pub n_experts: usize,
    pub k_active: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub concept_n_experts: Option<usize>,
    #[serde(default)]
    pub concept_k_active: Option<usize>,
    #[serde(default)]
    pub concept_d_ff: Option<usize>,
    pub r_target: f64,
    pub merge: MergeStrategy,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub router: RouterKind,
    #[serde(default = "default_true")]
    pub joint_decoding: bool,
    /// Trailing decoder layers carrying concept projectors, capped at `l_d`.
    #[serde(default = "default_joint_layers")]
    pub joint_layers: usize,
    #[serde(default)]
    pub ema: EmaMode,
    #[serde(default = "default_lambda")]
    pub lambda_aux: f64,
    #[serde(default = "default_balance")]
    pub balance_weight: f64,
    pub seq_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Width-64 configuration used for desk-scale training.
    pub fn desk() -> Self {
        Self {
            architecture: Architecture::Concept,
            d: 64,
            d_c: 64,
            n_heads: 4,
            l_e: 2,
            l_c: 6,
            l_d: 2,
            l_loop: 0,
            n_experts: 4,
            k_active: 2,
            d_ff: 128,
            concept_n_experts: None,
            concept_k_active: None,
            concept_d_ff: None,
            r_target: 2.0,
            merge: MergeStrategy::Sum,
            noise: NoiseConfig { kind: NoiseKind::Bernoulli { tau: 6.0 }, seed: 0 },
            router: RouterKind::Cosine,
            joint_decoding: true,
            joint_layers: 4,
            ema: EmaMode::Recursive,
            lambda_aux: 0.03,
            balance_weight: 0.01,
            seq_len: 128,
            vocab: VOCAB,
            init_std: 0.02,
        }
    }

    pub fn concept_experts(&self) -> usize {
        self.concept_n_experts.unwrap_or(self.n_experts)
    }

    pub fn concept_k(&self) -> usize {
        self.concept_k_active.unwrap_or(self.k_active)
    }

    pub fn concept_ff(&self) -> usize {
        self.concept_d_ff.unwrap_or(self.d_ff)
    }

    /// Decoder layers with concept projectors.
    pub fn n_joint(&self) -> usize {
        match self.architecture {
            Architecture::Concept if self.joint_decoding => self.joint_layers.min(self.l_d),
            _ => 0,
        }
    }

    pub fn has_projectors(&self) -> bool {
        self.architecture == Architecture::Concept && self.d_c > self.d
    }

    pub fn outer_shape(&self, concept_projectors: bool) -> LayerShape {
        LayerShape {
            d: self.d,
            n_heads: self.n_heads,
            n_experts: self.n_experts,
            k_active: self.k_active,
            d_ff: self.d_ff,
            concept_projectors,
        }
    }

    pub fn concept_shape(&self) -> LayerShape {
        match self.architecture {
            Architecture::Baseline => self.outer_shape(false),
            Architecture::Concept => LayerShape {
                d: self.d_c,
                n_heads: self.n_heads,
                n_experts: self.concept_experts(),
                k_active: self.concept_k(),
                d_ff: self.concept_ff(),
                concept_projectors: false,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if self.d == 0
            || self.n_heads == 0
            || !self.d.is_multiple_of(self.n_heads)
            || !(self.d / self.n_heads).is_multiple_of(2)
        {
            return fail(format!("d={} must split into {} even-width heads", self.d, self.n_heads));
        }
        if self.d_c < self.d {
            return fail(format!("d_c={} must be at least d={}", self.d_c, self.d));
        }
        if self.architecture == Architecture::Concept
            && (!self.d_c.is_multiple_of(self.n_heads) || !(self.d_c / self.n_heads).is_multiple_of(2))
        {
            return fail(format!("d_c={} must split into {} even-width heads", self.d_c, self.n_heads));
        }
        if self.architecture == Architecture::Baseline && self.d_c != self.d {
            return fail("baseline requires d_c == d".into());
        }
        if self.l_loop > self.l_c {
            return fail(format!("l_loop={} exceeds l_c={}", self.l_loop, self.l_c));
        }
        for (k, e, name) in [
            (self.k_active, self.n_experts, "k_active"),
            (self.concept_k(), self.concept_experts(), "concept_k_active"),
        ] {
            if k == 0 || k > e {
                return fail(format!("{name}={k} outside 1..={e}"));
            }
        }
        if self.d_ff == 0 || self.concept_ff() == 0 {
            return fail("d_ff must be positive".into());
        }
        match self.router {
            RouterKind::Fixed { stride: 0 } => return fail("fixed router stride must be positive".into()),
            RouterKind::Fixed { .. } => {}
            _ if !(self.r_target > 1.0) => return fail(format!("r_target={} must exceed 1", self.r_target)),
            _ => {}
        }
        if self.vocab != VOCAB {
            return fail(format!("vocab must be {VOCAB}"));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be positive".into());
        }
        if !(self.init_std > 0.0) {
            return fail("init_std must be positive".into());
        }
        self.noise.validate()
    }
}
