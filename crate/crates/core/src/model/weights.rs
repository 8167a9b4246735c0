use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, ModelConfig};
use crate::chunking::{LinearRouter, RouterKind, RouterWeights};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::transformer::{init_matrix, ConceptProjectors, Layer, LayerShape};

#[derive(Clone, Debug, PartialEq)]
pub enum Router<W> {
    Cosine(RouterWeights<W>),
    Linear(LinearRouter<W>),
}

/// Every trainable tensor of a model. `W` is `Tensor` for storage, `Var`
/// once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<W> {
    pub embed: W,
    pub encoder: Vec<Layer<W>>,
    pub concept: Vec<Layer<W>>,
    pub decoder: Vec<Layer<W>>,
    pub router: Option<Router<W>>,
    /// `[d, d_c]`
    pub proj_in: Option<W>,
    /// `[d_c, d]`
    pub proj_out: Option<W>,
    pub final_norm: W,
    pub head: W,
}

impl<W> Weights<W> {
    /// Visits tensors in a fixed order with stable dotted names.
    pub fn map<'a, U>(&'a self, f: &mut dyn FnMut(&str, &'a W) -> U) -> Weights<U> {
        let stack = |layers: &'a [Layer<W>], name: &str, f: &mut dyn FnMut(&str, &'a W) -> U| {
            layers.iter().enumerate().map(|(i, l)| l.map(&format!("{name}.{i}"), f)).collect()
        };
        Weights {
            embed: f("embed", &self.embed),
            encoder: stack(&self.encoder, "encoder", f),
            router: self.router.as_ref().map(|r| match r {
                Router::Cosine(w) => Router::Cosine(w.map("router", f)),
                Router::Linear(w) => Router::Linear(w.map("router", f)),
            }),
            proj_in: self.proj_in.as_ref().map(|w| f("proj_in", w)),
            concept: stack(&self.concept, "concept", f),
            proj_out: self.proj_out.as_ref().map(|w| f("proj_out", w)),
            decoder: stack(&self.decoder, "decoder", f),
            final_norm: f("final_norm", &self.final_norm),
            head: f("head", &self.head),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        self.map(&mut |n, _| v.push(String::from(n)));
        v
    }

    pub fn flatten(&self) -> Vec<&W> {
        let mut v = Vec::new();
        self.map(&mut |_, w| v.push(w));
        v
    }
}

impl<S: Scalar> Weights<Tensor<S>> {
    /// Records every tensor as a differentiable input.
    pub fn bind_params(&self, tape: &mut Tape<S>) -> Weights<Var> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }

    /// Records every tensor as a constant.
    pub fn bind_consts(&self, tape: &mut Tape<S>) -> Weights<Var> {
        self.map(&mut |_, t| tape.leaf(t.clone()))
    }

    pub fn param_count(&self) -> usize {
        self.flatten().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds a tree shaped like `self` from tensors in visit order.
    pub fn from_flat(template: &Self, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let want = template.flatten().len();
        if tensors.len() != want {
            return Err(Error::Config(format!("expected {want} tensors, got {}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut bad = None;
        let out = template.map(&mut |name, t| {
            let x = it.next().unwrap();
            if x.shape() != t.shape() && bad.is_none() {
                bad = Some(Error::Config(format!("{name}: expected shape {:?}, found {:?}", t.shape(), x.shape())));
            }
            x
        });
        match bad {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Weights<Tensor<T>> {
        self.map(&mut |_, t| t.cast())
    }

    /// Fresh random weights for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = cfg.init_std;
        let embed = init_matrix(&mut rng, cfg.vocab, cfg.d, 1.0);
        let outer = |rng: &mut ChaCha8Rng, n: usize, joint_from: usize| -> Result<Vec<Layer<Tensor<S>>>> {
            (0..n).map(|i| Layer::init(rng, cfg.outer_shape(i >= joint_from), std)).collect()
        };
        let encoder = outer(&mut rng, cfg.l_e, usize::MAX)?;
        let concept =
            (0..cfg.l_c).map(|_| Layer::init(&mut rng, cfg.concept_shape(), std)).collect::<Result<Vec<_>>>()?;
        let decoder = outer(&mut rng, cfg.l_d, cfg.l_d - cfg.n_joint())?;
        let (router, proj_in, proj_out) = match cfg.architecture {
            Architecture::Baseline => (None, None, None),
            Architecture::Concept => {
                let router = init_router(&mut rng, cfg);
                let (pi, po) = if cfg.has_projectors() {
                    (Some(init_matrix(&mut rng, cfg.d, cfg.d_c, std)), Some(init_matrix(&mut rng, cfg.d_c, cfg.d, std)))
                } else {
                    (None, None)
                };
                (router, pi, po)
            }
        };
        Ok(Self {
            embed,
            encoder,
            concept,
            decoder,
            router,
            proj_in,
            proj_out,
            final_norm: Tensor::ones([cfg.d]),
            head: init_matrix(&mut rng, cfg.d, cfg.vocab, std),
        })
    }

    /// Checks every tensor shape against the layout `cfg` implies.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = Weights::<Tensor<f32>>::init(cfg, 0)?;
        let (a, b) = (expect.names(), self.names());
        if a != b {
            return Err(Error::Config(format!(
                "weight layout mismatch: expected {} tensors, found {}",
                a.len(),
                b.len()
            )));
        }
        for ((name, x), y) in a.iter().zip(expect.flatten()).zip(self.flatten()) {
            if x.shape() != y.shape() {
                return Err(Error::Config(format!("{name}: expected shape {:?}, found {:?}", x.shape(), y.shape())));
            }
        }
        Ok(())
    }
}

fn init_router<S: Scalar>(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Option<Router<Tensor<S>>> {
    match cfg.router {
        RouterKind::Cosine => Some(Router::Cosine(RouterWeights::init(rng, cfg.d, cfg.init_std))),
        RouterKind::Linear => Some(Router::Linear(LinearRouter::init(rng, cfg.d, cfg.init_std))),
        RouterKind::Fixed { .. } => None,
    }
}

/// Closed-form parameter count of `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let layer = |s: LayerShape| {
        let w = s.d;
        2 * w
            + 4 * w * w
            + (if s.concept_projectors { 3 * w * w } else { 0 })
            + w * s.n_experts
            + s.n_experts * 3 * w * s.d_ff
    };
    let outer = cfg.outer_shape(false);
    let joint = cfg.n_joint();
    let mut n = 2 * cfg.vocab * cfg.d + cfg.d;
    n += (cfg.l_e + cfg.l_d) * layer(outer) + joint * 3 * cfg.d * cfg.d;
    n += cfg.l_c * layer(cfg.concept_shape());
    if cfg.architecture == Architecture::Concept {
        n += match cfg.router {
            RouterKind::Cosine => 2 * cfg.d * cfg.d,
            RouterKind::Linear => cfg.d + 1,
            RouterKind::Fixed { .. } => 0,
        };
        if cfg.has_projectors() {
            n += 2 * cfg.d * cfg.d_c;
        }
    }
    n
}

/// Parameters added when a baseline of the same size is converted:
/// the cosine router plus zero-initialized concept projectors.
pub fn conversion_param_delta(cfg: &ModelConfig) -> usize {
    2 * cfg.d * cfg.d + 3 * cfg.d * cfg.d * cfg.n_joint()
}

/// Baseline MoE weights: the same layout as `cfg` with no chunking.
pub fn build_baseline_moe<S: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Weights<Tensor<S>>> {
    let mut base = cfg.clone();
    base.architecture = Architecture::Baseline;
    base.d_c = base.d;
    base.concept_n_experts = None;
    base.concept_k_active = None;
    base.concept_d_ff = None;
    Weights::init(&base, seed)
}

/// Adds a randomly initialized cosine router and zero concept projectors to
/// the last `n_joint` decoder layers; every other tensor is copied.
pub fn convert_to_conceptmoe<S: Scalar>(
    baseline: &Weights<Tensor<S>>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Weights<Tensor<S>>> {
    cfg.validate()?;
    if cfg.architecture != Architecture::Concept || cfg.d_c != cfg.d {
        return Err(Error::Config("conversion needs a concept architecture with d_c == d".into()));
    }
    if cfg.merge != crate::chunking::MergeStrategy::LastToken {
        return Err(Error::Config("conversion needs last_token merge".into()));
    }
    if cfg.concept_n_experts.is_some_and(|e| e != cfg.n_experts) || cfg.concept_d_ff.is_some_and(|f| f != cfg.d_ff) {
        return Err(Error::Config("conversion keeps the baseline expert layout".into()));
    }
    let mut base_cfg = cfg.clone();
    base_cfg.architecture = Architecture::Baseline;
    base_cfg.concept_k_active = None;
    baseline.check_layout(&base_cfg)?;

    let mut w = baseline.clone();
    let k = cfg.concept_k();
    for l in &mut w.concept {
        l.moe.k_active = k;
    }
    let d = cfg.d;
    let first_joint = cfg.l_d - cfg.n_joint();
    for l in &mut w.decoder[first_joint..] {
        l.attn.concept =
            Some(ConceptProjectors { wq: Tensor::zeros([d, d]), wk: Tensor::zeros([d, d]), wv: Tensor::zeros([d, d]) });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    w.router = Some(Router::Cosine(RouterWeights::init(&mut rng, d, cfg.init_std)));
    Ok(w)
}
