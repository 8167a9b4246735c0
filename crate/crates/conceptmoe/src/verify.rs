//! Invariant suites run by `conceptmoe verify` and the acceptance tests.
//!
//! Every check draws its instances from a seeded stream, so a suite run is
//! reproducible; each reports the worst observed error and the bound it
//! was held to.

use std::fmt::Write as _;

use conceptmoe_core::chunking::{aux_loss, boundary_scores, merge, MergeStrategy, RouterKind, RouterWeights};
use conceptmoe_core::dechunking::{dechunk, ema, ema_parallel, ema_sequential, EmaMode, IndexMaps};
use conceptmoe_core::model::{
    build_baseline_moe, conversion_param_delta, convert_to_conceptmoe, logits_of, Architecture, ModelConfig, Weights,
};
use conceptmoe_core::numerics::{finite_diff_grad, grad_check, max_rel_err, Tape, Tensor, Var, REL_ERR_FLOOR};
use conceptmoe_core::transformer::{
    causal_attention, moe_forward, moe_forward_routed, rmsnorm, AttentionWeights, MoEBlock, Segments, ROPE_BASE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;
pub const EMA_TOL: f64 = 1e-12;
pub const CONVERT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Grad,
    Causal,
    Ema,
    Convert,
    All,
}

/// Deliberate breakage used to show a suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Parallel EMA reads the previous concept's probability.
    Ema,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst error seen; for counting checks, the number of failures.
    pub value: f64,
    pub tol: f64,
    pub instances: usize,
    pub passed: bool,
}

impl Check {
    fn bound(name: &str, value: f64, tol: f64, instances: usize) -> Self {
        Self { name: name.into(), value, tol, instances, passed: value <= tol }
    }

    fn strict(name: &str, value: f64, tol: f64, instances: usize) -> Self {
        Self { name: name.into(), value, tol, instances, passed: value < tol }
    }
}

pub fn run(suite: Suite, fault: Option<Fault>, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Grad => grad_suite(20, seed),
        Suite::Causal => causal_suite(20, seed),
        Suite::Ema => ema_suite(100, seed, fault),
        Suite::Convert => convert_suite(10, seed),
        Suite::All => [Suite::Grad, Suite::Causal, Suite::Ema, Suite::Convert]
            .into_iter()
            .flat_map(|s| run(s, fault, seed))
            .collect(),
    }
}

/// TAP report: plan line, then one `ok` / `not ok` line per check.
pub fn tap(checks: &[Check]) -> String {
    let mut s = format!("TAP version 13\n1..{}\n", checks.len());
    for (i, c) in checks.iter().enumerate() {
        let status = if c.passed { "ok" } else { "not ok" };
        writeln!(
            s,
            "{status} {} - {} # worst {:.3e}, bound {:.0e}, {} instances",
            i + 1,
            c.name,
            c.value,
            c.tol,
            c.instances
        )
        .unwrap();
    }
    s
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|i| i == 0 || rng.random_bool(p)).collect()
}

fn segments(rng: &mut ChaCha8Rng, n: usize) -> Segments {
    let split = rng.random_range(0..n);
    if split == 0 {
        Segments::single(n)
    } else {
        Segments::new(vec![split, n - split]).expect("both parts non-empty")
    }
}

/// `sum(y * probe)` for a fixed random probe, so every output coordinate
/// carries a distinct weight.
fn probe_sum(t: &mut Tape<f64>, y: Var, probe: &Tensor<f64>) -> conceptmoe_core::Result<Var> {
    let p = t.leaf(probe.clone());
    let yp = t.mul(y, p)?;
    Ok(t.sum_all(yp))
}

fn worst(instances: usize, seed: u64, salt: u64, mut one: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..instances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (salt << 32) ^ i as u64);
            one(&mut rng)
        })
        .fold(0.0, |a: f64, e| if e.is_nan() { f64::INFINITY } else { a.max(e) })
}

fn grad_err(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> conceptmoe_core::Result<Var>) -> f64 {
    grad_check(inputs, FD_STEP, build).unwrap_or(f64::INFINITY)
}

/// Backward against central differences for every differentiable block.
pub fn grad_suite(instances: usize, seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    let mut add = |name: &str, salt: u64, f: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        out.push(Check::strict(name, worst(instances, seed, salt, f), GRAD_TOL, instances));
    };

    add("grad/router", 1, &mut |rng| {
        let (n, d) = (rng.random_range(2..9), rng.random_range(1..5));
        let segs = segments(rng, n);
        let h = rand_tensor(rng, &[n, d], 1.0);
        let wq = rand_tensor(rng, &[d, d], 1.0);
        let wk = rand_tensor(rng, &[d, d], 1.0);
        let probe = rand_tensor(rng, &[n], 1.0);
        grad_err(&[h, wq, wk], |t, v| {
            let p = boundary_scores(t, v[0], &RouterWeights { wq: v[1], wk: v[2] }, &segs)?;
            probe_sum(t, p, &probe)
        })
    });

    add("grad/aux_loss", 2, &mut |rng| {
        let n = rng.random_range(2..12);
        let b = mask(rng, n, 0.5);
        let p = Tensor::from_fn([n], |_| rng.random_range(0.02..0.98));
        let r = [1.5, 16.0 / 9.0, 2.0, 4.0][rng.random_range(0..4)];
        grad_err(&[p], |t, v| aux_loss(t, v[0], &b, r))
    });

    for (salt, s, name) in [
        (3, MergeStrategy::LastToken, "grad/merge_last_token"),
        (4, MergeStrategy::Sum, "grad/merge_sum"),
        (5, MergeStrategy::SumForward, "grad/merge_sum_forward"),
    ] {
        add(name, salt, &mut |rng| {
            let (n, d) = (rng.random_range(1..10), rng.random_range(1..4));
            let segs = segments(rng, n);
            let mut b = mask(rng, n, 0.4);
            for s in segs.starts() {
                b[s] = true;
            }
            let m = b.iter().filter(|&&x| x).count();
            let h = rand_tensor(rng, &[n, d], 1.0);
            let probe = rand_tensor(rng, &[m, d], 1.0);
            grad_err(&[h], |t, v| {
                let c = merge(t, v[0], &b, s, &segs)?;
                probe_sum(t, c, &probe)
            })
        });
    }

    for (salt, mode, name) in
        [(6, EmaMode::Recursive, "grad/ema_recursive"), (7, EmaMode::OneStep, "grad/ema_one_step")]
    {
        add(name, salt, &mut |rng| {
            let (m, d) = (rng.random_range(1..10), rng.random_range(1..4));
            let c = rand_tensor(rng, &[m, d], 1.0);
            let p = Tensor::from_fn([m], |_| rng.random_range(0.05..0.95));
            let probe = rand_tensor(rng, &[m, d], 1.0);
            grad_err(&[c, p], |t, v| {
                let e = ema(t, v[0], v[1], mode)?;
                probe_sum(t, e, &probe)
            })
        });
    }

    add("grad/dechunk_ste", 8, &mut |rng| {
        let (n, d) = (rng.random_range(1..10), rng.random_range(1..4));
        let b = mask(rng, n, 0.5);
        let maps = IndexMaps::build(&b).expect("first position is a boundary");
        let e = rand_tensor(rng, &[maps.m(), d], 1.0);
        let h = rand_tensor(rng, &[n, d], 1.0);
        let sp = Tensor::from_fn([n], |_| rng.random_range(0.0..1.0));
        let probe = rand_tensor(rng, &[n, d], 1.0);
        let through_values = grad_err(&[e.clone(), h.clone()], |t, v| {
            let s = t.leaf(sp.clone());
            let out = dechunk(t, v[0], &maps, v[1], s)?;
            probe_sum(t, out.z, &probe)
        });
        // The STE forward is constant in the selected probabilities; its
        // backward must equal central differences of the same graph with
        // the STE replaced by the identity.
        let ste_grad = {
            let mut t = Tape::new();
            let (ev, hv, sv) = (t.leaf(e.clone()), t.leaf(h.clone()), t.param(sp.clone()));
            let out = dechunk(&mut t, ev, &maps, hv, sv).expect("valid shapes");
            let l = probe_sum(&mut t, out.z, &probe).expect("valid shapes");
            t.backward(l).expect("scalar loss");
            t.grad(sv).cloned().unwrap_or_else(|| Tensor::zeros([n]))
        };
        let identity = |s: &Tensor<f64>| {
            let mut t = Tape::new();
            let (ev, hv, sv) = (t.leaf(e.clone()), t.leaf(h.clone()), t.leaf(s.clone()));
            let idx = maps.psi().to_vec();
            let aligned = t.gather(ev, &idx).expect("psi in range");
            let scaled = t.mul_rows(aligned, sv).expect("row count");
            let z = t.add(hv, scaled).expect("same shape");
            let l = probe_sum(&mut t, z, &probe).expect("valid shapes");
            t.value(l).item()
        };
        let fd = finite_diff_grad(identity, &sp, FD_STEP);
        through_values.max(max_rel_err(&ste_grad, &fd, REL_ERR_FLOOR))
    });

    add("grad/joint_attention", 9, &mut |rng| {
        let heads = rng.random_range(1..3);
        let (n, d) = (rng.random_range(1..8), 4 * heads);
        let segs = segments(rng, n);
        let w = AttentionWeights::<Tensor<f64>>::init(rng, d, heads, true, 0.5).expect("even head width");
        let mut inputs: Vec<Tensor<f64>> = Vec::new();
        w.map("", &mut |_, t| inputs.push(Tensor::from_fn(t.shape().to_vec(), |_| rng.random_range(-0.5..0.5))));
        let nw = inputs.len();
        inputs.push(rand_tensor(rng, &[n, d], 1.0));
        inputs.push(rand_tensor(rng, &[n, d], 1.0));
        let probe = rand_tensor(rng, &[n, d], 1.0);
        grad_err(&inputs, |t, v| {
            let mut it = v[..nw].iter().copied();
            let wv = w.map("", &mut |_, _| it.next().expect("one var per tensor"));
            let y = causal_attention(t, v[nw], &wv, Some(v[nw + 1]), &segs, ROPE_BASE)?;
            probe_sum(t, y, &probe)
        })
    });

    add("grad/moe_frozen_routing", 10, &mut |rng| {
        let n_e = rng.random_range(1..5);
        let k = rng.random_range(1..=n_e);
        let (n, d) = (rng.random_range(1..8), 4);
        let block = MoEBlock::<Tensor<f64>>::init(rng, d, 5, n_e, k, 0.7).expect("k <= experts");
        let x = rand_tensor(rng, &[n, d], 1.0);
        let selection = {
            let mut t = Tape::new();
            let bv = block.map("", &mut |_, w| t.leaf(w.clone()));
            let xv = t.leaf(x.clone());
            moe_forward(&mut t, xv, &bv).expect("valid shapes").selection
        };
        let mut inputs = vec![x];
        block.map("", &mut |_, w| inputs.push(w.clone()));
        let probe = rand_tensor(rng, &[n, d], 1.0);
        grad_err(&inputs, |t, v| {
            let mut it = v[1..].iter().copied();
            let bv = block.map("", &mut |_, _| it.next().expect("one var per tensor"));
            let m = moe_forward_routed(t, v[0], &bv, selection.clone())?;
            let s = probe_sum(t, m.out, &probe)?;
            t.add(s, m.balance)
        })
    });

    add("grad/rmsnorm", 11, &mut |rng| {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..8));
        let x = rand_tensor(rng, &[n, d], 1.0);
        let g = rand_tensor(rng, &[d], 1.0);
        let probe = rand_tensor(rng, &[n, d], 1.0);
        grad_err(&[x, g], |t, v| {
            let y = rmsnorm(t, v[0], v[1])?;
            probe_sum(t, y, &probe)
        })
    });
    out
}

/// Small concept model with sum merging and a trained-looking spread of
/// boundary probabilities.
pub fn causal_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_c: 24,
        n_heads: 2,
        l_e: 1,
        l_c: 2,
        l_d: 2,
        l_loop: 1,
        n_experts: 3,
        k_active: 2,
        d_ff: 16,
        merge: MergeStrategy::Sum,
        init_std: 0.3,
        ..ModelConfig::desk()
    }
}

/// Perturbing token `t` must leave every logit row before `t` bit-identical.
pub fn causal_suite(trials: usize, seed: u64) -> Vec<Check> {
    let cfg = causal_model();
    let failures = (0..trials)
        .filter(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xCA5A << 32) ^ i as u64);
            let w = Weights::<Tensor<f64>>::init(&cfg, rng.random()).expect("valid config");
            let n = rng.random_range(4..33);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..256)).collect();
            let t = rng.random_range(0..n);
            let mut moved = ids.clone();
            moved[t] = (moved[t] + rng.random_range(1..256)) % 256;
            let (a, b) = match (logits_of(&cfg, &w, &ids), logits_of(&cfg, &w, &moved)) {
                (Ok(a), Ok(b)) => (a, b),
                _ => return true,
            };
            let v = cfg.vocab;
            a.data()[..t * v].iter().zip(&b.data()[..t * v]).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .count();
    vec![Check::bound("causal/prefix_logits_bit_identical", failures as f64, 0.0, trials)]
}

/// `(c rows, p, expected rows)`.
pub type OneStepCase = (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>);

/// Crafted one-step cases with dyadic values so the expected rows are exact.
pub fn one_step_cases() -> Vec<OneStepCase> {
    vec![
        (vec![vec![1.0], vec![2.0], vec![4.0]], vec![0.5, 0.25, 1.0], vec![vec![1.0], vec![1.25], vec![4.0]]),
        (vec![vec![2.0, -2.0], vec![6.0, 0.0]], vec![0.75, 0.5], vec![vec![2.0, -2.0], vec![4.0, -1.0]]),
        (vec![vec![8.0]], vec![0.125], vec![vec![8.0]]),
        (
            vec![vec![0.0], vec![8.0], vec![-8.0], vec![16.0]],
            vec![1.0, 0.0, 0.5, 0.75],
            vec![vec![0.0], vec![0.0], vec![0.0], vec![10.0]],
        ),
        (
            vec![vec![3.0], vec![5.0], vec![7.0], vec![9.0], vec![11.0]],
            vec![0.5; 5],
            vec![vec![3.0], vec![4.0], vec![6.0], vec![8.0], vec![10.0]],
        ),
    ]
}

fn rows(r: &[Vec<f64>]) -> Tensor<f64> {
    let refs: Vec<&[f64]> = r.iter().map(Vec::as_slice).collect();
    Tensor::matrix(&refs)
}

fn broken_parallel(c: &Tensor<f64>, p: &Tensor<f64>) -> conceptmoe_core::Result<Tensor<f64>> {
    let mut shifted = p.data().to_vec();
    shifted.rotate_right(1);
    ema_parallel(c, &shifted)
}

/// Scan against loop on random instances, and the one-step rule against
/// hand-computed rows.
pub fn ema_suite(instances: usize, seed: u64, fault: Option<Fault>) -> Vec<Check> {
    let parallel = |c: &Tensor<f64>, p: &Tensor<f64>| match fault {
        Some(Fault::Ema) => broken_parallel(c, p),
        None => ema_parallel(c, p.data()),
    };
    let scan = worst(instances, seed, 0xE3A, |rng| {
        let (m, d) = (rng.random_range(1..65), rng.random_range(1..5));
        let c = rand_tensor(rng, &[m, d], 4.0);
        let p = Tensor::from_fn([m], |_| rng.random_range(0.0..=1.0));
        match (ema_sequential(&c, p.data(), EmaMode::Recursive), parallel(&c, &p)) {
            (Ok(a), Ok(b)) => a.max_abs_diff(&b),
            _ => f64::INFINITY,
        }
    });
    let cases = one_step_cases();
    let mismatches = cases
        .iter()
        .filter(|(c, p, want)| {
            let (c, p, want) = (rows(c), Tensor::vector(p.clone()), rows(want));
            let looped = ema_sequential(&c, p.data(), EmaMode::OneStep);
            let taped = {
                let mut t = Tape::new();
                let (cv, pv) = (t.leaf(c.clone()), t.leaf(p.clone()));
                ema(&mut t, cv, pv, EmaMode::OneStep).map(|e| t.value(e).clone())
            };
            !matches!((looped, taped), (Ok(a), Ok(b)) if a == want && b == want)
        })
        .count();
    vec![
        Check::bound("ema/parallel_matches_sequential", scan, EMA_TOL, instances),
        Check::bound("ema/one_step_hand_values", mismatches as f64, 0.0, cases.len()),
    ]
}

/// Baseline whose conversion is checked; every layer group is non-trivial.
pub fn convert_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_c: 16,
        n_heads: 2,
        l_e: 2,
        l_c: 2,
        l_d: 3,
        joint_layers: 2,
        n_experts: 4,
        k_active: 2,
        d_ff: 24,
        merge: MergeStrategy::LastToken,
        init_std: 0.2,
        ..ModelConfig::desk()
    }
}

/// Zero-projector conversion with every position forced to a boundary
/// must reproduce the baseline's logits.
pub fn convert_suite(inputs: usize, seed: u64) -> Vec<Check> {
    let cfg = convert_model();
    let base_cfg = ModelConfig { architecture: Architecture::Baseline, ..cfg.clone() };
    let forced = ModelConfig { router: RouterKind::Fixed { stride: 1 }, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xC0 << 32));
    let built = build_baseline_moe::<f64>(&cfg, rng.random())
        .and_then(|b| Ok((convert_to_conceptmoe(&b, &cfg, rng.random())?, b)));
    let Ok((conv, base)) = built else {
        return vec![Check::bound("convert/build", 1.0, 0.0, 1)];
    };
    let zero = conv
        .decoder
        .iter()
        .flat_map(|l| &l.attn.concept)
        .all(|p| [&p.wq, &p.wk, &p.wv].iter().all(|w| w.data().iter().all(|&x| x == 0.0)));
    let delta = conv.param_count() as i64 - base.param_count() as i64;
    let layout_ok = zero && delta == conversion_param_delta(&cfg) as i64;
    let diff = (0..inputs)
        .map(|_| {
            let n = rng.random_range(1..48);
            let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..256)).collect();
            match (logits_of(&base_cfg, &base, &ids), logits_of(&forced, &conv, &ids)) {
                (Ok(a), Ok(b)) => a.max_abs_diff(&b),
                _ => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max);
    vec![
        Check::bound("convert/zero_projectors_and_param_delta", if layout_ok { 0.0 } else { 1.0 }, 0.0, 1),
        Check::bound("convert/all_boundary_matches_baseline", diff, CONVERT_TOL, inputs),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass() {
        for s in [Suite::Causal, Suite::Ema, Suite::Convert] {
            let checks = run(s, None, 1);
            assert!(checks.iter().all(|c| c.passed), "{}", tap(&checks));
        }
        let g = grad_suite(3, 2);
        assert!(g.iter().all(|c| c.passed), "{}", tap(&g));
    }

    #[test]
    fn ema_fault_is_caught() {
        let checks = ema_suite(10, 0, Some(Fault::Ema));
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["ema/parallel_matches_sequential"]);
        let report = tap(&checks);
        assert!(report.contains("not ok 1 - ema/parallel_matches_sequential"));
        assert!(report.starts_with("TAP version 13\n1..2\n"));
    }
}
