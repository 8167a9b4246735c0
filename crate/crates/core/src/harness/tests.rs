use alloc::vec::Vec;

use super::*;
use crate::chunking::{MergeStrategy, RouterKind};
use crate::model::{logits_of, Architecture};

fn small_model() -> ModelConfig {
    ModelConfig {
        d: 16,
        d_c: 16,
        n_heads: 2,
        l_e: 1,
        l_c: 1,
        l_d: 1,
        n_experts: 2,
        k_active: 1,
        d_ff: 16,
        seq_len: 16,
        ..ModelConfig::desk()
    }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig { steps, batch: 2, seq_len: 16, lr_warmup_steps: 1, eval_every: 2, ..TrainConfig::desk() }
}

fn text(n: usize) -> Vec<u8> {
    let base = b"the quick brown fox jumps over the lazy dog; pack my box with five dozen liquor jugs. ";
    base.iter().copied().cycle().take(n).collect()
}

#[test]
fn schedule_endpoints_and_shape() {
    let c = TrainConfig { steps: 1000, lr_warmup_steps: 100, lr_peak: 1e-2, lr_min: 1e-3, ..TrainConfig::desk() };
    assert_eq!(c.lr_at(0), 0.0);
    assert!((c.lr_at(50) - 5e-3).abs() < 1e-15);
    assert!((c.lr_at(100) - 1e-2).abs() < 1e-15);
    assert!((c.lr_at(1000) - 1e-3).abs() < 1e-15);
    assert!((c.lr_at(550) - 5.5e-3).abs() < 1e-15);
    let lrs: Vec<f64> = (100..=1000).map(|s| c.lr_at(s)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!((0..100).all(|s| c.lr_at(s) < c.lr_at(s + 1)));
}

#[test]
fn config_checks() {
    assert!(TrainConfig::desk().validate().is_ok());
    assert!(TrainConfig { lr_warmup_steps: 5000, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { lr_min: 1.0, ..TrainConfig::desk() }.validate().is_err());
    assert!(TrainConfig { grad_clip: Some(0.0), ..TrainConfig::desk() }.validate().is_err());
    let json = r#"{"steps":10,"batch":2,"seq_len":8,"lr_peak":0.001,"lr_warmup_steps":1,"lr_min":0.0,
        "weight_decay":0.1,"betas":[0.9,0.95],"seed":3,"eval_every":0,"R_target":1.5}"#;
    let c: TrainConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.r_target, Some(1.5));
    assert_eq!(c.grad_clip, Some(1.0));
    assert_eq!(c.apply(&ModelConfig::desk()).r_target, 1.5);
}

#[test]
fn metrics_row_round_trips() {
    let row = MetricsRow {
        step: 3,
        loss_total: 5.25,
        ce: 5.0,
        aux: 1.0,
        balance: 22.0,
        r_train: 2.0,
        r_eval: None,
        p_mean: 0.5,
        flip_rate: 0.03125,
        lr: 1e-3,
    };
    assert_eq!(row.csv_line(), "3,5.25,5,1,22,2,,0.5,0.03125,0.001");
    assert_eq!(MetricsRow::parse_csv_line(&row.csv_line()).unwrap(), row);
    let with_eval = MetricsRow { r_eval: Some(1.75), ..row };
    assert_eq!(MetricsRow::parse_csv_line(&with_eval.csv_line()).unwrap(), with_eval);
    assert_eq!(METRICS_HEADER.split(',').count(), 10);
}

#[test]
fn two_step_run_is_finite_and_repeatable() {
    let corpus = Corpus::new(text(10 * 1024), 0.1).unwrap();
    let run = || {
        let mut t = Trainer::<f32>::new(&small_model(), &small_train(2)).unwrap();
        let mut rows = Vec::new();
        t.run(&corpus, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
        rows
    };
    let a = run();
    assert_eq!(a.len(), 2);
    for r in &a {
        assert!(r.loss_total.is_finite() && r.ce.is_finite());
        assert!((r.loss_total - (r.ce + 0.03 * r.aux + 0.01 * r.balance)).abs() < 1e-6);
    }
    assert!(a[1].r_eval.is_some() && a[0].r_eval.is_none());
    let lines = |v: &[MetricsRow]| v.iter().map(MetricsRow::csv_line).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&run()));
}

#[test]
fn training_lowers_loss() {
    let corpus = Corpus::new(text(8 * 1024), 0.1).unwrap();
    let cfg = TrainConfig { lr_peak: 1e-2, ..small_train(40) };
    let mut t = Trainer::<f32>::new(&small_model(), &cfg).unwrap();
    let before = t.evaluate(corpus.eval()).unwrap().ce;
    t.run(&corpus, |_| Ok(())).unwrap();
    let after = t.evaluate(corpus.eval()).unwrap().ce;
    assert!(after < before - 0.5, "{before} -> {after}");
    assert_eq!(t.step(), 40);
}

#[test]
fn eval_ratio_follows_router() {
    let data = text(512);
    let mut m =
        ModelConfig { router: RouterKind::Fixed { stride: 1 }, merge: MergeStrategy::LastToken, ..small_model() };
    let w = Weights::<Tensor<f64>>::init(&m, 0).unwrap();
    let rep = evaluate(&m, &w, &data, 16, 4, None).unwrap();
    assert_eq!(rep.r_eval, 1.0);
    assert_eq!(rep.p_mean, 1.0);
    m.router = RouterKind::Fixed { stride: 2 };
    let rep = evaluate(&m, &w, &data, 16, 4, None).unwrap();
    assert_eq!(rep.r_eval, 2.0);
    m.router = RouterKind::Fixed { stride: 3 };
    let rep = evaluate(&m, &w, &data, 16, 4, Some(1)).unwrap();
    assert_eq!((rep.tokens, rep.concepts), (16, 6));
}

#[test]
fn eval_ce_matches_single_sequence_forward() {
    let m = ModelConfig { architecture: Architecture::Baseline, ..small_model() };
    let w = Weights::<Tensor<f64>>::init(&m, 4).unwrap();
    let data = text(40);
    let rep = evaluate(&m, &w, &data, 16, 3, None).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for s in [0usize, 16] {
        let ids: Vec<u32> = data[s..s + 16].iter().map(|&b| u32::from(b)).collect();
        let logits = logits_of(&m, &w, &ids).unwrap();
        for i in 0..16 {
            let row = logits.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln() + mx;
            total += lse - row[data[s + i + 1] as usize];
            count += 1;
        }
    }
    assert!((rep.ce - total / count as f64).abs() < 1e-12);
    assert_eq!(rep.r_eval, 1.0);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let m = small_model();
    let tc = small_train(2);
    let mut w = Weights::<Tensor<f32>>::init(&m, 0).unwrap();
    w.head.data_mut()[0] = f32::NAN;
    let mut t = Trainer::from_weights(&m, &tc, w).unwrap();
    let b = Batch::from_windows(&text(64), 16, &[0, 16]);
    match t.train_step(&b) {
        Err(Error::NonFiniteLoss { step: 0, p_mean, .. }) => assert!(p_mean.is_finite()),
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("NaN head trained"),
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let m = small_model();
    let w = Weights::<Tensor<f32>>::init(&m, 0).unwrap();
    let other = ModelConfig { d_ff: 32, ..m.clone() };
    assert!(evaluate(&other, &w, &text(64), 16, 1, None).is_err());
    assert!(Trainer::from_weights(&other, &small_train(2), w).is_err());
}
