use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, Tape, Tensor, Var};

const TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn bind_attn(t: &mut Tape<f64>, w: &AttentionWeights<Tensor<f64>>) -> AttentionWeights<Var> {
    w.map("attn", &mut |_, x| t.param(x.clone()))
}

fn attn_out(
    w: &AttentionWeights<Tensor<f64>>,
    x: &Tensor<f64>,
    c: Option<&Tensor<f64>>,
    segs: &Segments,
) -> Tensor<f64> {
    let mut t = Tape::new();
    let wv = bind_attn(&mut t, w);
    let xv = t.leaf(x.clone());
    let cv = c.map(|c| t.leaf(c.clone()));
    let y = causal_attention(&mut t, xv, &wv, cv, segs, ROPE_BASE).unwrap();
    t.value(y).clone()
}

fn random_projectors(rng: &mut ChaCha8Rng, w: &mut AttentionWeights<Tensor<f64>>, d: usize) {
    w.concept = Some(ConceptProjectors {
        wq: rand_tensor(rng, &[d, d], 0.5),
        wk: rand_tensor(rng, &[d, d], 0.5),
        wv: rand_tensor(rng, &[d, d], 0.5),
    });
}

#[test]
fn zero_concepts_give_standard_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d) = (6, 8);
    let mut w = AttentionWeights::<Tensor<f64>>::init(&mut rng, d, 2, false, 0.4).unwrap();
    let x = rand_tensor(&mut rng, &[n, d], 1.0);
    let base = attn_out(&w, &x, None, &Segments::single(n));
    random_projectors(&mut rng, &mut w, d);
    let zero = attn_out(&w, &x, Some(&Tensor::zeros([n, d])), &Segments::single(n));
    assert_eq!(base, zero);
}

#[test]
fn zero_projectors_give_standard_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (5, 8);
    let w = AttentionWeights::<Tensor<f64>>::init(&mut rng, d, 2, true, 0.4).unwrap();
    let x = rand_tensor(&mut rng, &[n, d], 1.0);
    let c = rand_tensor(&mut rng, &[n, d], 3.0);
    let plain = AttentionWeights { concept: None, ..w.clone() };
    assert_eq!(attn_out(&plain, &x, None, &Segments::single(n)), attn_out(&w, &x, Some(&c), &Segments::single(n)));
}

#[test]
fn single_position_is_the_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let mut w = AttentionWeights::<Tensor<f64>>::init(&mut rng, d, 2, false, 0.5).unwrap();
    random_projectors(&mut rng, &mut w, d);
    let x = rand_tensor(&mut rng, &[1, d], 1.0);
    let c = rand_tensor(&mut rng, &[1, d], 1.0);
    let got = attn_out(&w, &x, Some(&c), &Segments::single(1));
    let mut t = Tape::new();
    let (xv, cv) = (t.leaf(x), t.leaf(c));
    let p = w.concept.as_ref().unwrap();
    let (wv, wvc, wo) = (t.leaf(w.wv.clone()), t.leaf(p.wv.clone()), t.leaf(w.wo.clone()));
    let a = t.matmul(xv, wv).unwrap();
    let b = t.matmul(cv, wvc).unwrap();
    let s = t.add(a, b).unwrap();
    let want = t.matmul(s, wo).unwrap();
    assert!(got.max_abs_diff(t.value(want)) < 1e-14);
}

#[test]
fn concepts_without_projectors_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = AttentionWeights::<Tensor<f64>>::init(&mut rng, 4, 2, false, 0.5).unwrap();
    let mut t = Tape::new();
    let wv = bind_attn(&mut t, &w);
    let x = t.leaf(Tensor::zeros([2, 4]));
    let c = t.leaf(Tensor::zeros([2, 4]));
    assert!(causal_attention(&mut t, x, &wv, Some(c), &Segments::single(2), ROPE_BASE).is_err());
}

#[test]
fn heads_must_divide_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert!(AttentionWeights::<Tensor<f64>>::init(&mut rng, 6, 4, false, 0.5).is_err());
}

#[test]
fn packed_segments_match_separate_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 8;
    let w = AttentionWeights::<Tensor<f64>>::init(&mut rng, d, 2, false, 0.4).unwrap();
    let a = rand_tensor(&mut rng, &[3, d], 1.0);
    let b = rand_tensor(&mut rng, &[4, d], 1.0);
    let mut packed = a.data().to_vec();
    packed.extend_from_slice(b.data());
    let packed = Tensor::new([7, d], packed).unwrap();
    let out = attn_out(&w, &packed, None, &Segments::new(vec![3, 4]).unwrap());
    let ya = attn_out(&w, &a, None, &Segments::single(3));
    let yb = attn_out(&w, &b, None, &Segments::single(4));
    assert_eq!(&out.data()[..3 * d], ya.data());
    assert_eq!(&out.data()[3 * d..], yb.data());
}

#[test]
fn rmsnorm_of_constant_row_is_signed_gain() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(&[&[2.0f64, 2.0, 2.0], &[-0.5, -0.5, -0.5]]));
    let g = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = rmsnorm(&mut t, x, g).unwrap();
    let y = t.value(y);
    for (i, &gi) in [1.0, 2.0, 3.0].iter().enumerate() {
        assert!((y.row(0)[i] - gi).abs() < 1e-6);
        assert!((y.row(1)[i] + gi).abs() < 1e-5);
    }
}

#[test]
fn zero_head_gives_uniform_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::new();
    let table = t.leaf(rand_tensor(&mut rng, &[256, 8], 1.0));
    let head = t.leaf(Tensor::zeros([8, 256]));
    let x = embed(&mut t, table, &[1, 200, 37]).unwrap();
    let logits = lm_head(&mut t, x, head).unwrap();
    assert_eq!(t.shape(logits), &[3, 256]);
    assert!(t.value(logits).data().iter().all(|&v| v == 0.0));
}

fn bind_moe(t: &mut Tape<f64>, b: &MoEBlock<Tensor<f64>>) -> MoEBlock<Var> {
    b.map("moe", &mut |_, x| t.param(x.clone()))
}

#[test]
fn single_expert_is_the_expert() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let block = MoEBlock::<Tensor<f64>>::init(&mut rng, 4, 6, 1, 1, 0.5).unwrap();
    let x = rand_tensor(&mut rng, &[5, 4], 1.0);
    let mut t = Tape::new();
    let bv = bind_moe(&mut t, &block);
    let xv = t.leaf(x);
    let m = moe_forward(&mut t, xv, &bv).unwrap();
    assert!((t.value(m.balance).item() - 1.0).abs() < 1e-15);
    let e = &bv.experts[0];
    let g = t.matmul(xv, e.w_gate).unwrap();
    let g = t.silu(g);
    let u = t.matmul(xv, e.w_up).unwrap();
    let h = t.mul(g, u).unwrap();
    let y = t.matmul(h, e.w_down).unwrap();
    assert!(t.value(m.out).max_abs_diff(t.value(y)) < 1e-14);
}

#[test]
fn identical_router_logits_give_unit_balance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut block = MoEBlock::<Tensor<f64>>::init(&mut rng, 4, 6, 4, 2, 0.5).unwrap();
    block.router = Tensor::zeros([4, 4]);
    let mut t = Tape::new();
    let bv = bind_moe(&mut t, &block);
    let xv = t.leaf(rand_tensor(&mut rng, &[7, 4], 1.0));
    let m = moe_forward(&mut t, xv, &bv).unwrap();
    assert!((t.value(m.balance).item() - 1.0).abs() < 1e-15);
    // Ties go to the lowest expert ids.
    assert!(m.selection.chunks(2).all(|s| s == [0, 1]));
}

#[test]
fn top_k_breaks_ties_toward_low_index() {
    let p = Tensor::matrix(&[&[0.2f64, 0.4, 0.4], &[0.5, 0.1, 0.4]]);
    assert_eq!(route_top_k(&p, 2), vec![1, 2, 0, 2]);
}

#[test]
fn k_equal_to_n_is_dense_softmax_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (d, n_e) = (4, 3);
    let block = MoEBlock::<Tensor<f64>>::init(&mut rng, d, 5, n_e, n_e, 0.6).unwrap();
    let x = rand_tensor(&mut rng, &[6, d], 1.0);
    let mut t = Tape::new();
    let bv = bind_moe(&mut t, &block);
    let xv = t.leaf(x.clone());
    let m = moe_forward(&mut t, xv, &bv).unwrap();

    // Dense oracle evaluated row by row.
    let mut t2 = Tape::new();
    let bv2 = bind_moe(&mut t2, &block);
    let xv2 = t2.leaf(x);
    let logits = t2.matmul(xv2, bv2.router).unwrap();
    let probs = t2.softmax(logits, 1).unwrap();
    let probs = t2.value(probs).clone();
    let mut dense = vec![0.0; 6 * d];
    for (e, ex) in bv2.experts.iter().enumerate() {
        let g = t2.matmul(xv2, ex.w_gate).unwrap();
        let g = t2.silu(g);
        let u = t2.matmul(xv2, ex.w_up).unwrap();
        let h = t2.mul(g, u).unwrap();
        let y = t2.matmul(h, ex.w_down).unwrap();
        for r in 0..6 {
            for c in 0..d {
                dense[r * d + c] += probs.row(r)[e] * t2.value(y).row(r)[c];
            }
        }
    }
    let diff = t.value(m.out).data().iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-13, "{diff}");
}

#[test]
fn later_tokens_do_not_change_earlier_layer_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = LayerShape { d: 8, n_heads: 2, n_experts: 3, k_active: 2, d_ff: 8, concept_projectors: false };
    let layer = Layer::<Tensor<f64>>::init(&mut rng, shape, 0.4).unwrap();
    let x = rand_tensor(&mut rng, &[9, 8], 1.0);
    let run = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let lv = layer.map("l", &mut |_, w| t.leaf(w.clone()));
        let xv = t.leaf(x.clone());
        let o = layer_forward(&mut t, xv, &lv, None, &Segments::single(9)).unwrap();
        t.value(o.x).clone()
    };
    let base = run(&x);
    for p in 0..9 {
        let mut y = x.clone();
        y.data_mut()[p * 8 + 3] += 1.5;
        let out = run(&y);
        assert_eq!(&base.data()[..p * 8], &out.data()[..p * 8]);
    }
}

fn attn_weights_as_inputs(w: &AttentionWeights<Tensor<f64>>) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    w.map("", &mut |_, t| v.push(t.clone()));
    v
}

fn rebuild_attn(template: &AttentionWeights<Tensor<f64>>, vars: &[Var]) -> AttentionWeights<Var> {
    let mut it = vars.iter().copied();
    template.map("", &mut |_, _| it.next().unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn joint_attention_grads(seed in any::<u64>(), n in 1usize..7, heads in 1usize..3, split in 0usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4 * heads;
        let mut w = AttentionWeights::<Tensor<f64>>::init(&mut rng, d, heads, false, 0.5).unwrap();
        random_projectors(&mut rng, &mut w, d);
        let lens = if split > 0 && split < n { vec![split, n - split] } else { vec![n] };
        let segs = Segments::new(lens).unwrap();
        let mut inputs = attn_weights_as_inputs(&w);
        let nw = inputs.len();
        inputs.push(rand_tensor(&mut rng, &[n, d], 1.0));
        inputs.push(rand_tensor(&mut rng, &[n, d], 1.0));
        let probe = rand_tensor(&mut rng, &[n, d], 1.0);
        let err = grad_check(&inputs, H, |t, v| {
            let wv = rebuild_attn(&w, &v[..nw]);
            let y = causal_attention(t, v[nw], &wv, Some(v[nw + 1]), &segs, ROPE_BASE)?;
            let p = t.leaf(probe.clone());
            let yp = t.mul(y, p)?;
            Ok(t.sum_all(yp))
        }).unwrap();
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn moe_grads_with_frozen_routing(seed in any::<u64>(), n in 1usize..7, n_e in 1usize..5, k in 1usize..5) {
        let k = k.min(n_e);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let block = MoEBlock::<Tensor<f64>>::init(&mut rng, d, 5, n_e, k, 0.7).unwrap();
        let x = rand_tensor(&mut rng, &[n, d], 1.0);
        let selection = {
            let mut t = Tape::new();
            let bv = bind_moe(&mut t, &block);
            let xv = t.leaf(x.clone());
            moe_forward(&mut t, xv, &bv).unwrap().selection
        };
        let mut inputs = vec![x];
        block.map("", &mut |_, w| inputs.push(w.clone()));
        let probe = rand_tensor(&mut rng, &[n, d], 1.0);
        let err = grad_check(&inputs, H, |t, v| {
            let mut it = v[1..].iter().copied();
            let bv = block.map("", &mut |_, _| it.next().unwrap());
            let m = moe_forward_routed(t, v[0], &bv, selection.clone())?;
            let p = t.leaf(probe.clone());
            let yp = t.mul(m.out, p)?;
            let s = t.sum_all(yp);
            t.add(s, m.balance)
        }).unwrap();
        prop_assert!(err < TOL, "rel err {err}");
    }

    #[test]
    fn rmsnorm_grads(seed in any::<u64>(), n in 1usize..6, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, d], 1.0);
        let g = rand_tensor(&mut rng, &[d], 1.0);
        let probe = rand_tensor(&mut rng, &[n, d], 1.0);
        let err = grad_check(&[x, g], H, |t, v| {
            let y = rmsnorm(t, v[0], v[1])?;
            let p = t.leaf(probe.clone());
            let yp = t.mul(y, p)?;
            Ok(t.sum_all(yp))
        }).unwrap();
        prop_assert!(err < TOL, "rel err {err}");
    }
}
