use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::chunking::{MergeStrategy, NoiseConfig, NoiseKind, RouterKind};
use crate::numerics::{Tape, Tensor};
use crate::transformer::Segments;

fn tiny(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        d: 8,
        d_c: 8,
        n_heads: 2,
        l_e: 1,
        l_c: 2,
        l_d: 2,
        l_loop: 0,
        n_experts: 3,
        k_active: 2,
        d_ff: 8,
        concept_n_experts: None,
        concept_k_active: None,
        concept_d_ff: None,
        r_target: 2.0,
        merge: MergeStrategy::Sum,
        noise: NoiseConfig { kind: NoiseKind::Bernoulli { tau: 6.0 }, seed: 5 },
        router: RouterKind::Cosine,
        joint_decoding: true,
        joint_layers: 4,
        ema: crate::dechunking::EmaMode::Recursive,
        lambda_aux: 0.03,
        balance_weight: 0.01,
        seq_len: 16,
        vocab: 256,
        init_std: 0.3,
    }
}

fn ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    (0..n).map(|_| rng.random_range(0..256)).collect()
}

#[test]
fn identity_chunking_shapes() {
    let mut cfg = tiny(Architecture::Concept);
    cfg.router = RouterKind::Fixed { stride: 1 };
    cfg.merge = MergeStrategy::LastToken;
    let w = Weights::<Tensor<f64>>::init(&cfg, 1).unwrap();
    let mut t = Tape::new();
    let wv = w.bind_consts(&mut t);
    let x = ids(&mut ChaCha8Rng::seed_from_u64(0), 9);
    let tr = forward(&mut t, &cfg, &wv, &x, None, &Segments::single(9), Mode::Eval).unwrap();
    assert_eq!(tr.n_concepts, 9);
    assert_eq!(t.shape(tr.logits), &[9, 256]);
    assert_eq!(tr.r_achieved(), 1.0);
}

#[test]
fn fixed_stride_two_halves_the_sequence() {
    let mut cfg = tiny(Architecture::Concept);
    cfg.router = RouterKind::Fixed { stride: 2 };
    let w = Weights::<Tensor<f64>>::init(&cfg, 1).unwrap();
    let mut t = Tape::new();
    let wv = w.bind_consts(&mut t);
    let x = ids(&mut ChaCha8Rng::seed_from_u64(0), 16);
    let tr = forward(&mut t, &cfg, &wv, &x, None, &Segments::uniform(2, 8), Mode::Train { step: 3 }).unwrap();
    assert_eq!(tr.r_achieved(), 2.0);
}

#[test]
fn param_count_matches_closed_form() {
    let mut cfgs = vec![tiny(Architecture::Baseline), tiny(Architecture::Concept)];
    let mut c = tiny(Architecture::Concept);
    c.d_c = 12;
    c.concept_n_experts = Some(5);
    c.concept_k_active = Some(3);
    c.concept_d_ff = Some(6);
    c.l_d = 5;
    c.joint_layers = 3;
    cfgs.push(c.clone());
    c.router = RouterKind::Linear;
    cfgs.push(c.clone());
    c.router = RouterKind::Fixed { stride: 3 };
    c.joint_decoding = false;
    cfgs.push(c);
    cfgs.push(ModelConfig::desk());
    for cfg in cfgs {
        let w = Weights::<Tensor<f32>>::init(&cfg, 0).unwrap();
        assert_eq!(w.param_count(), param_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn looping_adds_no_parameters() {
    let mut cfg = tiny(Architecture::Concept);
    let a = param_count(&cfg);
    cfg.l_loop = 2;
    assert_eq!(param_count(&cfg), a);
    assert_eq!(concept_order(3, 2), vec![0, 1, 0, 1, 2]);
}

#[test]
fn conversion_adds_router_and_projectors_only() {
    let mut cfg = tiny(Architecture::Concept);
    cfg.merge = MergeStrategy::LastToken;
    cfg.l_d = 5;
    let base = build_baseline_moe::<f64>(&cfg, 7).unwrap();
    let conv = convert_to_conceptmoe(&base, &cfg, 8).unwrap();
    let d = cfg.d;
    assert_eq!(conv.param_count() - base.param_count(), 2 * d * d + 3 * 4 * d * d);
    assert_eq!(conversion_param_delta(&cfg), 2 * d * d + 3 * 4 * d * d);
    assert!(conv.decoder[..1].iter().all(|l| l.attn.concept.is_none()));
    assert!(conv.decoder[1..].iter().all(|l| l.attn.concept.as_ref().is_some_and(|p| p
        .wq
        .data()
        .iter()
        .all(|&x| x == 0.0))));

    cfg.merge = MergeStrategy::Sum;
    assert!(convert_to_conceptmoe(&base, &cfg, 8).is_err());
}

#[test]
fn forced_all_boundary_conversion_is_lossless() {
    let mut cfg = tiny(Architecture::Concept);
    cfg.merge = MergeStrategy::LastToken;
    let base_cfg = ModelConfig { architecture: Architecture::Baseline, ..cfg.clone() };
    let base = build_baseline_moe::<f64>(&cfg, 11).unwrap();
    let conv = convert_to_conceptmoe(&base, &cfg, 12).unwrap();
    let forced = ModelConfig { router: RouterKind::Fixed { stride: 1 }, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for n in [1, 5, 12] {
        let x = ids(&mut rng, n);
        let a = logits_of(&base_cfg, &base, &x).unwrap();
        let b = logits_of(&forced, &conv, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
    }
}

#[test]
fn zero_projectors_match_joint_decoding_off() {
    let cfg = tiny(Architecture::Concept);
    let on = Weights::<Tensor<f64>>::init(&cfg, 3).unwrap();
    let mut off = on.clone();
    for l in &mut off.decoder {
        l.attn.concept = None;
    }
    let off_cfg = ModelConfig { joint_decoding: false, ..cfg.clone() };
    let x = ids(&mut ChaCha8Rng::seed_from_u64(4), 10);
    assert_eq!(logits_of(&cfg, &on, &x).unwrap(), logits_of(&off_cfg, &off, &x).unwrap());
}

#[test]
fn eval_forward_is_causal_and_deterministic() {
    let cfg = tiny(Architecture::Concept);
    let w = Weights::<Tensor<f64>>::init(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = ids(&mut rng, 14);
    let base = logits_of(&cfg, &w, &x).unwrap();
    assert_eq!(base, logits_of(&cfg, &w, &x).unwrap());
    for t in 0..14 {
        let mut y = x.clone();
        y[t] = (y[t] + 1 + rng.random_range(0..255)) % 256;
        let out = logits_of(&cfg, &w, &y).unwrap();
        assert_eq!(&base.data()[..t * 256], &out.data()[..t * 256], "position {t}");
    }
}

#[test]
fn losses_compose() {
    let cfg = tiny(Architecture::Concept);
    let w = Weights::<Tensor<f64>>::init(&cfg, 2).unwrap();
    let mut t = Tape::new();
    let wv = w.bind_params(&mut t);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = ids(&mut rng, 12);
    let y = ids(&mut rng, 12);
    let tr = forward(&mut t, &cfg, &wv, &x, Some(&y), &Segments::uniform(2, 6), Mode::Train { step: 0 }).unwrap();
    let l = tr.losses.unwrap();
    let v = |x| t.value(x).item();
    assert!((v(l.total) - (v(l.ce) + 0.03 * v(l.aux) + 0.01 * v(l.balance))).abs() < 1e-12);
    t.backward(l.total).unwrap();
    let router = match &wv.router {
        Some(Router::Cosine(r)) => r.wq,
        _ => unreachable!(),
    };
    assert!(t.grad(router).unwrap().data().iter().any(|&g| g != 0.0));
}

#[test]
fn zero_projectors_receive_gradient() {
    let mut cfg = tiny(Architecture::Concept);
    cfg.merge = MergeStrategy::LastToken;
    let base = build_baseline_moe::<f64>(&cfg, 1).unwrap();
    let conv = convert_to_conceptmoe(&base, &cfg, 2).unwrap();
    let mut t = Tape::new();
    let wv = conv.bind_params(&mut t);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = ids(&mut rng, 10);
    let y = ids(&mut rng, 10);
    let tr = forward(&mut t, &cfg, &wv, &x, Some(&y), &Segments::single(10), Mode::Train { step: 0 }).unwrap();
    t.backward(tr.losses.unwrap().total).unwrap();
    let p = wv.decoder[1].attn.concept.as_ref().unwrap();
    for v in [p.wq, p.wk, p.wv] {
        assert!(t.grad(v).unwrap().data().iter().any(|&g| g != 0.0));
    }
}

#[test]
fn training_noise_is_keyed_by_step() {
    let cfg = tiny(Architecture::Concept);
    let w = Weights::<Tensor<f64>>::init(&cfg, 2).unwrap();
    let x = ids(&mut ChaCha8Rng::seed_from_u64(1), 64);
    let run = |step| {
        let mut t = Tape::new();
        let wv = w.bind_consts(&mut t);
        forward(&mut t, &cfg, &wv, &x, None, &Segments::single(64), Mode::Train { step }).unwrap().decision.unwrap().b
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn config_validation() {
    let mut c = tiny(Architecture::Concept);
    c.d_c = 4;
    assert!(c.validate().is_err());
    let mut c = tiny(Architecture::Concept);
    c.l_loop = 3;
    assert!(c.validate().is_err());
    let mut c = tiny(Architecture::Concept);
    c.r_target = 1.0;
    assert!(c.validate().is_err());
    c.router = RouterKind::Fixed { stride: 1 };
    assert!(c.validate().is_ok());
    let mut c = tiny(Architecture::Concept);
    c.k_active = 4;
    assert!(c.validate().is_err());
}

#[test]
fn wider_concept_stack_runs() {
    let mut cfg = tiny(Architecture::Concept);
    cfg.d_c = 12;
    cfg.l_loop = 1;
    let w = Weights::<Tensor<f64>>::init(&cfg, 2).unwrap();
    let x = ids(&mut ChaCha8Rng::seed_from_u64(1), 7);
    let l = logits_of(&cfg, &w, &x).unwrap();
    assert!(l.is_finite());
}
