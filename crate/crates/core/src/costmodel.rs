//! Analytical cost model for the concept stack: attention-map FLOPs, KV
//! cache size and per-token FLOPs, plus solvers that spend the compute
//! saved by compression on more active experts, looped layers or a wider
//! concept stack.
//!
//! Conventions: one attention layer costs `8 d^2` FLOPs per token (Q, K, V
//! and O projections, 2 FLOPs per multiply-add) and one MoE layer
//! `6 d d_ff k`. Attention-map FLOPs are reported separately and left out
//! of per-token FLOPs. KV cache is counted in elements, `2 * layers * d * N`.
//!
//! Every quantity is exact. Widening the concept stack by `s` scales both
//! layer costs by `s^2`, so only `s^2` enters per-token FLOPs and it stays
//! rational; attention-map and KV terms carry a single `sqrt(s^2)` factor,
//! held as a [`Surd`].

use alloc::format;
use alloc::string::String;
use core::fmt;
use core::ops::{Div, Mul};
use core::str::FromStr;

use num_rational::Ratio;
use num_traits::{Float, One, Signed, Zero};

use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig};

pub type Q = Ratio<i128>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Uncompressed model; ignores `r`, `l_loop`, `scale_sq` and `k_concept`.
    Baseline,
    /// More activated experts in the concept stack.
    Moe,
    /// The first `l_loop` concept layers run twice.
    Loop,
    /// Concept stack widened by `s = sqrt(R)`.
    AttnMoe,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Moe, Strategy::Loop, Strategy::AttnMoe];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Moe => "moe",
            Strategy::Loop => "loop",
            Strategy::AttnMoe => "attn_moe",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}; expected baseline, moe, loop or attn_moe")))
    }
}

/// `coef * sqrt(radicand)` with both parts positive. Equality compares the
/// squares, so it is exact.
#[derive(Clone, Copy, Debug)]
pub struct Surd {
    pub coef: Q,
    pub radicand: Q,
}

impl Surd {
    pub fn rational(q: Q) -> Self {
        Self { coef: q, radicand: Q::one() }
    }

    pub fn sqrt(q: Q) -> Self {
        Self { coef: Q::one(), radicand: q }
    }

    pub fn square(&self) -> Q {
        self.coef * self.coef * self.radicand
    }

    /// The value as a rational when the radicand is a perfect square.
    pub fn as_rational(&self) -> Option<Q> {
        let r = exact_sqrt(*self.radicand.numer())?;
        let s = exact_sqrt(*self.radicand.denom())?;
        Some(self.coef * Q::new(r, s))
    }

    pub fn to_f64(&self) -> f64 {
        match self.as_rational() {
            Some(q) => q_to_f64(q),
            None => q_to_f64(self.coef) * Float::sqrt(q_to_f64(self.radicand)),
        }
    }
}

impl PartialEq for Surd {
    fn eq(&self, other: &Self) -> bool {
        self.square() == other.square()
    }
}

impl Mul for Surd {
    type Output = Surd;
    fn mul(self, o: Surd) -> Surd {
        Surd { coef: self.coef * o.coef, radicand: self.radicand * o.radicand }
    }
}

impl Div for Surd {
    type Output = Surd;
    fn div(self, o: Surd) -> Surd {
        Surd { coef: self.coef / o.coef, radicand: self.radicand / o.radicand }
    }
}

impl fmt::Display for Surd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.as_rational() {
            Some(q) => write!(f, "{q}"),
            None if self.coef.is_one() => write!(f, "sqrt({})", self.radicand),
            None => write!(f, "{}*sqrt({})", self.coef, self.radicand),
        }
    }
}

fn exact_sqrt(n: i128) -> Option<i128> {
    if n < 0 {
        return None;
    }
    let mut r = Float::sqrt(n as f64) as i128;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    (r * r == n).then_some(r)
}

pub fn q_to_f64(q: Q) -> f64 {
    let (n, d) = (*q.numer(), *q.denom());
    let (i, r) = (n.div_euclid(d), n.rem_euclid(d));
    i as f64 + r as f64 / d as f64
}

fn q(n: u64) -> Q {
    Q::from_integer(n as i128)
}

/// Parses `"2"`, `"1.5"` or `"16/9"` exactly.
pub fn parse_ratio(s: &str) -> Result<Q> {
    let bad = || Error::Config(format!("cannot parse {s:?} as a ratio"));
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let a: i128 = a.trim().parse().map_err(|_| bad())?;
        let b: i128 = b.trim().parse().map_err(|_| bad())?;
        if b == 0 {
            return Err(bad());
        }
        return Ok(Q::new(a, b));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() && frac.is_empty() || !frac.bytes().all(|c| c.is_ascii_digit()) || frac.len() > 18 {
        return Err(bad());
    }
    let neg = int.starts_with('-');
    let whole: i128 = match int.trim_start_matches(['-', '+']) {
        "" => 0,
        w => w.parse().map_err(|_| bad())?,
    };
    let scale = 10i128.pow(frac.len() as u32);
    let part: i128 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let v = Q::new(whole * scale + part, scale);
    Ok(if neg { -v } else { v })
}

/// Shape of a model as seen by the cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct CostInputs {
    pub l_e: u64,
    pub l_c: u64,
    pub l_d: u64,
    pub d: u64,
    pub d_ff: u64,
    pub n_experts: u64,
    /// Activated experts in encoder and decoder layers.
    pub k_active: u64,
    /// Activated experts in concept-stack layers.
    pub k_concept: u64,
    /// Sequence length in tokens.
    pub n: u64,
    /// Compression ratio, tokens per concept.
    pub r: Q,
    pub l_loop: u64,
    /// Square of the concept-stack width multiplier.
    pub scale_sq: Q,
    pub strategy: Strategy,
}

impl CostInputs {
    /// Uncompressed inputs with `k_concept = k_active`.
    #[allow(clippy::too_many_arguments)]
    pub fn baseline(l_e: u64, l_c: u64, l_d: u64, d: u64, d_ff: u64, n_experts: u64, k_active: u64, n: u64) -> Self {
        Self {
            l_e,
            l_c,
            l_d,
            d,
            d_ff,
            n_experts,
            k_active,
            k_concept: k_active,
            n,
            r: Q::one(),
            l_loop: 0,
            scale_sq: Q::one(),
            strategy: Strategy::Baseline,
        }
    }

    /// Reads layer counts, widths and routing from a model config. The
    /// strategy is `loop` when layers are looped, `attn_moe` when the
    /// concept stack is wider, otherwise `moe`; `baseline` for a baseline
    /// architecture.
    pub fn from_model(cfg: &ModelConfig) -> Result<Self> {
        let r = Q::approximate_float(cfg.r_target)
            .ok_or_else(|| Error::Config(format!("r_target {} is not a finite ratio", cfg.r_target)))?;
        let scale = Q::new(cfg.d_c as i128, cfg.d as i128);
        let strategy = match cfg.architecture {
            Architecture::Baseline => Strategy::Baseline,
            Architecture::Concept if cfg.l_loop > 0 => Strategy::Loop,
            Architecture::Concept if cfg.d_c != cfg.d => Strategy::AttnMoe,
            Architecture::Concept => Strategy::Moe,
        };
        let x = Self {
            l_e: cfg.l_e as u64,
            l_c: cfg.l_c as u64,
            l_d: cfg.l_d as u64,
            d: cfg.d as u64,
            d_ff: cfg.d_ff as u64,
            n_experts: cfg.n_experts as u64,
            k_active: cfg.k_active as u64,
            k_concept: cfg.concept_k() as u64,
            n: cfg.seq_len as u64,
            r,
            l_loop: cfg.l_loop as u64,
            scale_sq: scale * scale,
            strategy,
        };
        x.validate()?;
        Ok(x)
    }

    /// Positive counts, `r >= 1`, `k <= n_experts`, `l_loop <= l_c`.
    pub fn validate(&self) -> Result<()> {
        let counts = [self.l_c, self.d, self.d_ff, self.n_experts, self.k_active, self.k_concept, self.n];
        if counts.contains(&0) {
            return Err(Error::Config(format!("cost inputs need positive l_c, d, d_ff, experts, k and N: {self:?}")));
        }
        if self.r < Q::one() {
            return Err(Error::Config(format!("compression ratio {} is below 1", self.r)));
        }
        if !self.scale_sq.is_positive() {
            return Err(Error::Config(format!("hidden scale squared {} must be positive", self.scale_sq)));
        }
        if self.k_active > self.n_experts || self.k_concept > self.n_experts {
            return Err(Error::Config(format!("activated experts exceed {} experts", self.n_experts)));
        }
        if self.l_loop > self.l_c {
            return Err(Error::Config(format!("cannot loop {} of {} concept layers", self.l_loop, self.l_c)));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the shape each strategy implies:
    /// `moe` has no loop and no widening, `loop` no widening, `attn_moe`
    /// no loop and `s^2 = R`.
    pub fn validate_strategy(&self) -> Result<()> {
        self.validate()?;
        let one = Q::one();
        let ok = match self.strategy {
            Strategy::Baseline => true,
            Strategy::Moe => self.l_loop == 0 && self.scale_sq == one,
            Strategy::Loop => self.scale_sq == one,
            Strategy::AttnMoe => self.l_loop == 0 && self.scale_sq == self.r,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "strategy {} does not allow l_loop = {}, s^2 = {} at R = {}",
                self.strategy, self.l_loop, self.scale_sq, self.r
            )))
        }
    }

    /// `8 d^2`
    pub fn c_attn(&self) -> Q {
        q(8 * self.d * self.d)
    }

    /// `6 d d_ff k`
    pub fn c_moe(&self, k: u64) -> Q {
        q(6 * self.d * self.d_ff * k)
    }

    fn outer_flops(&self) -> Q {
        q(self.l_e + self.l_d) * (self.c_attn() + self.c_moe(self.k_active))
    }

    /// Per-token FLOPs of the concept stack alone.
    pub fn concept_flops(&self) -> Result<Q> {
        if self.strategy == Strategy::Baseline {
            return Ok(q(self.l_c) * (self.c_attn() + self.c_moe(self.k_active)));
        }
        if !self.r.is_positive() {
            return Err(Error::Config(format!("compression ratio {} must be positive", self.r)));
        }
        Ok(q(self.l_c + self.l_loop) * self.scale_sq * (self.c_attn() + self.c_moe(self.k_concept)) / self.r)
    }
}

/// `(L_E + L_D)(C_attn + C_moe) + (L_C + L_loop) s^2 (C_attn + C_moe') / R`,
/// attention maps excluded.
pub fn per_token_flops(x: &CostInputs) -> Result<Q> {
    Ok(x.outer_flops() + x.concept_flops()?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub attn_map_flops: Surd,
    /// Baseline over strategy.
    pub attn_map_reduction: Surd,
    pub kv_elems: Surd,
    /// Baseline over strategy.
    pub kv_reduction: Surd,
    pub per_token_flops: Q,
}

impl CostReport {
    pub fn kv_bytes(&self, bytes_per_elem: u64) -> f64 {
        self.kv_elems.to_f64() * bytes_per_elem as f64
    }
}

/// Concept-stack attention-map FLOPs and KV cache, `L_C d N^2` and
/// `2 L_C d N` uncompressed. A strategy runs `L_C + L_loop` layers of width
/// `s d` over `N / R` concepts.
pub fn attn_map_and_kv(x: &CostInputs) -> Result<CostReport> {
    x.validate_strategy()?;
    let (l_c, d, n) = (q(x.l_c), q(x.d), q(x.n));
    let base_attn = Surd::rational(l_c * d * n * n);
    let base_kv = Surd::rational(q(2) * l_c * d * n);
    let (attn, kv) = match x.strategy {
        Strategy::Baseline => (base_attn, base_kv),
        _ => {
            let layers = q(x.l_c + x.l_loop);
            let len = n / x.r;
            let width = Surd::rational(d) * Surd::sqrt(x.scale_sq);
            (Surd::rational(layers * len * len) * width, Surd::rational(q(2) * layers * len) * width)
        }
    };
    Ok(CostReport {
        attn_map_flops: attn,
        attn_map_reduction: base_attn / attn,
        kv_elems: kv,
        kv_reduction: base_kv / kv,
        per_token_flops: per_token_flops(x)?,
    })
}

/// The knob a solver turned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Knob {
    KConcept(u64),
    LLoop(u64),
    /// Square of the width multiplier.
    ScaleSq(Q),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reallocation {
    pub knob: Knob,
    /// `base` with `r`, `strategy` and the solved knob filled in.
    pub inputs: CostInputs,
    pub flops: Q,
    pub baseline_flops: Q,
}

impl Reallocation {
    /// `(flops - baseline) / baseline`; never negative.
    pub fn residual(&self) -> Q {
        (self.flops - self.baseline_flops) / self.baseline_flops
    }
}

/// Smallest integer knob (or exact `s^2`) at which the compressed model
/// spends at least the baseline's per-token FLOPs. `loop` keeps
/// `base.k_concept`; `attn_moe` keeps `k_active` everywhere.
pub fn solve_reallocation(base: &CostInputs, r: Q, strategy: Strategy) -> Result<Reallocation> {
    let mut b = base.clone();
    b.strategy = Strategy::Baseline;
    b.validate()?;
    if r <= Q::one() {
        return Err(Error::Config(format!("reallocation needs R > 1, got {r}")));
    }
    let target = per_token_flops(&b)?;
    // Concept-stack FLOPs the compressed model must reach.
    let budget = target - b.outer_flops();
    let mut x = CostInputs { r, strategy, l_loop: 0, scale_sq: Q::one(), ..b.clone() };
    let knob = match strategy {
        Strategy::Baseline => return Err(Error::Config("baseline has nothing to reallocate".into())),
        Strategy::Moe => {
            // l_c (A + m k') / R >= budget
            let need = (budget * r / q(x.l_c) - x.c_attn()) / x.c_moe(1);
            let k = ceil_at_least(need, 1);
            if k > x.n_experts {
                return Err(Error::Infeasible(format!("moe at R = {r} needs {k} active experts of {}", x.n_experts)));
            }
            x.k_concept = k;
            Knob::KConcept(k)
        }
        Strategy::Loop => {
            // (l_c + l) (A + m k') / R >= budget
            let need = budget * r / (x.c_attn() + x.c_moe(x.k_concept)) - q(x.l_c);
            let l = ceil_at_least(need, 0);
            if l > x.l_c {
                return Err(Error::Infeasible(format!("loop at R = {r} needs {l} looped layers of {}", x.l_c)));
            }
            x.l_loop = l;
            Knob::LLoop(l)
        }
        Strategy::AttnMoe => {
            x.k_concept = x.k_active;
            let s2 = budget * r / (q(x.l_c) * (x.c_attn() + x.c_moe(x.k_concept)));
            x.scale_sq = s2;
            Knob::ScaleSq(s2)
        }
    };
    x.validate_strategy()?;
    let flops = per_token_flops(&x)?;
    Ok(Reallocation { knob, inputs: x, flops, baseline_flops: target })
}

fn ceil_at_least(v: Q, lo: u64) -> u64 {
    let c = v.ceil().to_integer();
    if c < lo as i128 {
        lo
    } else {
        c as u64
    }
}

/// One CSV row of a cost table.
pub fn csv_header() -> &'static str {
    "strategy,R,L_loop,k_active,s,attn_map_flops,attn_reduction,kv_elems,kv_reduction,per_token_flops"
}

pub fn csv_row(x: &CostInputs, rep: &CostReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        x.strategy,
        fmt_q(x.r),
        x.l_loop,
        x.k_concept,
        fmt_f64(Surd::sqrt(x.scale_sq).to_f64()),
        fmt_f64(rep.attn_map_flops.to_f64()),
        fmt_f64(rep.attn_map_reduction.to_f64()),
        fmt_f64(rep.kv_elems.to_f64()),
        fmt_f64(rep.kv_reduction.to_f64()),
        fmt_f64(q_to_f64(rep.per_token_flops)),
    )
}

fn fmt_q(v: Q) -> String {
    fmt_f64(q_to_f64(v))
}

fn fmt_f64(v: f64) -> String {
    if v == Float::round(v) && Float::abs(v) < 1e15 {
        format!("{}", v as i128)
    } else {
        format!("{v}")
    }
}

impl Default for Surd {
    fn default() -> Self {
        Self::rational(Q::zero())
    }
}
