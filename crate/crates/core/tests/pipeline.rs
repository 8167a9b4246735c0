use conceptmoe_core::chunking::{MergeStrategy, RouterKind};
use conceptmoe_core::costmodel::{per_token_flops, solve_reallocation, CostInputs, Knob, Strategy, Q};
use conceptmoe_core::data::Corpus;
use conceptmoe_core::harness::{TrainConfig, Trainer};
use conceptmoe_core::model::{build_baseline_moe, convert_to_conceptmoe, logits_of, Architecture, ModelConfig};

fn small() -> ModelConfig {
    ModelConfig { d: 16, d_c: 16, n_heads: 2, l_e: 1, l_c: 2, l_d: 1, d_ff: 16, seq_len: 32, ..ModelConfig::desk() }
}

fn text() -> Vec<u8> {
    b"the cat sat on the mat and the dog sat on the log; ".repeat(200)
}

#[test]
fn training_through_public_api_learns_and_compresses() {
    let train = TrainConfig {
        steps: 60,
        batch: 2,
        seq_len: 32,
        lr_warmup_steps: 5,
        eval_every: 0,
        eval_windows: Some(8),
        ..TrainConfig::desk()
    };
    let corpus = Corpus::new(text(), 0.1).unwrap();
    let mut t = Trainer::<f32>::new(&small(), &train).unwrap();
    let mut rows = Vec::new();
    let last = t
        .run(&corpus, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap()
        .expect("final step evaluates");
    assert_eq!(rows.len(), 60);
    assert_eq!(t.step(), 60);
    let head: f64 = rows[..5].iter().map(|r| r.ce).sum::<f64>() / 5.0;
    let tail: f64 = rows[55..].iter().map(|r| r.ce).sum::<f64>() / 5.0;
    assert!(tail < head - 1.0, "ce {head} -> {tail}");
    assert!(last.r_eval >= 1.0 && last.ce.is_finite());
    for r in &rows {
        let total = r.ce + 0.03 * r.aux + 0.01 * r.balance;
        assert!((r.loss_total - total).abs() < 1e-5, "step {}", r.step);
    }
}

#[test]
fn converted_model_matches_baseline_when_forced() {
    let cfg = ModelConfig { merge: MergeStrategy::LastToken, init_std: 0.3, ..small() };
    let base_cfg = ModelConfig { architecture: Architecture::Baseline, ..cfg.clone() };
    let forced = ModelConfig { router: RouterKind::Fixed { stride: 1 }, ..cfg.clone() };
    let base = build_baseline_moe::<f64>(&cfg, 1).unwrap();
    let conv = convert_to_conceptmoe(&base, &cfg, 2).unwrap();
    let ids: Vec<u32> = text()[..40].iter().map(|&b| u32::from(b)).collect();
    let a = logits_of(&base_cfg, &base, &ids).unwrap();
    let b = logits_of(&forced, &conv, &ids).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-9);
}

#[test]
fn reallocation_restores_baseline_budget() {
    let cfg = ModelConfig { n_experts: 16, ..small() };
    let base = CostInputs { strategy: Strategy::Baseline, ..CostInputs::from_model(&cfg).unwrap() };
    let target = per_token_flops(&base).unwrap();
    for strategy in [Strategy::Moe, Strategy::Loop, Strategy::AttnMoe] {
        let s = solve_reallocation(&base, Q::from_integer(2), strategy).unwrap();
        assert!(s.flops >= target, "{strategy}");
        assert_eq!(per_token_flops(&s.inputs).unwrap(), s.flops);
        // One notch less falls short of the budget.
        let fewer = match s.knob {
            Knob::KConcept(k) if k > 1 => Some(CostInputs { k_concept: k - 1, ..s.inputs.clone() }),
            Knob::LLoop(l) if l > 0 => Some(CostInputs { l_loop: l - 1, ..s.inputs.clone() }),
            _ => None,
        };
        if let Some(x) = fewer {
            assert!(per_token_flops(&x).unwrap() < target, "{strategy}");
        }
    }
}
