//! Training and evaluation: AdamW with warmup plus cosine decay, per-step
//! metrics, periodic noise-free evaluation on held-out bytes.
//!
//! Runs are single-threaded and fully determined by the two configs and
//! the corpus bytes.

mod optim;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_traits::Float;
use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, AdamW};

use crate::data::{batch_iter, window_starts, Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, Losses, Mode, ModelConfig, Weights};
use crate::numerics::{Scalar, Tape, Tensor, IGNORE_INDEX};
use crate::transformer::Segments;

fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_eval_fraction() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub lr_peak: f64,
    pub lr_warmup_steps: u64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm bound; `null` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Steps between evaluations; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Tail fraction of the corpus held out for evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    /// Caps the eval windows used per evaluation.
    #[serde(default)]
    pub eval_windows: Option<usize>,
    /// Overrides the model config's aux-loss weight.
    #[serde(default)]
    pub lambda_aux: Option<f64>,
    /// Overrides the model config's target compression ratio.
    #[serde(default, rename = "R_target", alias = "r_target")]
    pub r_target: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            steps: 5000,
            batch: 4,
            seq_len: 128,
            lr_peak: 3e-3,
            lr_warmup_steps: 100,
            lr_min: 3e-4,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            grad_clip: Some(1.0),
            seed: 0,
            eval_every: 500,
            eval_fraction: 0.05,
            eval_windows: None,
            lambda_aux: Some(0.03),
            r_target: Some(2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch == 0 || self.seq_len < 2 {
            return fail(format!(
                "steps={}, batch={}, seq_len={} must be positive (seq_len >= 2)",
                self.steps, self.batch, self.seq_len
            ));
        }
        if self.lr_warmup_steps >= self.steps {
            return fail(format!("lr_warmup_steps={} must be below steps={}", self.lr_warmup_steps, self.steps));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_peak) {
            return fail(format!("need 0 <= lr_min={} <= lr_peak={}", self.lr_min, self.lr_peak));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail(format!(
                "invalid optimizer settings betas={:?} eps={} weight_decay={}",
                self.betas, self.eps, self.weight_decay
            ));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail(format!("eval_fraction={} not in [0, 1)", self.eval_fraction));
        }
        Ok(())
    }

    /// `model` with this config's overrides applied.
    pub fn apply(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if let Some(l) = self.lambda_aux {
            m.lambda_aux = l;
        }
        if let Some(r) = self.r_target {
            m.r_target = r;
        }
        m
    }

    /// Linear warmup from 0 to `lr_peak` at `lr_warmup_steps`, then cosine
    /// decay to `lr_min` at `steps`; constant afterwards.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.lr_warmup_steps;
        if step < w {
            return self.lr_peak * step as f64 / w as f64;
        }
        let t = ((step - w) as f64 / (self.steps - w) as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr_peak - self.lr_min) * (1.0 + Float::cos(PI * t))
    }
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Updates completed.
    pub step: u64,
    pub loss_total: f64,
    pub ce: f64,
    pub aux: f64,
    pub balance: f64,
    pub r_train: f64,
    /// Present on evaluation steps.
    pub r_eval: Option<f64>,
    pub p_mean: f64,
    pub flip_rate: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss_total,ce,aux,balance,R_train,R_eval,p_mean,flip_rate,lr";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let r_eval = self.r_eval.map(|r| format!("{r}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.ce,
            self.aux,
            self.balance,
            self.r_train,
            r_eval,
            self.p_mean,
            self.flip_rate,
            self.lr
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics line {line:?}"));
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 10 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            loss_total: num(f[1])?,
            ce: num(f[2])?,
            aux: num(f[3])?,
            balance: num(f[4])?,
            r_train: num(f[5])?,
            r_eval: if f[6].is_empty() { None } else { Some(num(f[6])?) },
            p_mean: num(f[7])?,
            flip_rate: num(f[8])?,
            lr: num(f[9])?,
        })
    }
}

/// Held-out metrics from a noise-free, thresholded forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean next-byte cross-entropy in nats.
    pub ce: f64,
    pub r_eval: f64,
    pub p_mean: f64,
    pub tokens: usize,
    pub concepts: usize,
}

/// Weights plus optimizer state.
pub struct Trainer<S: Scalar> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: Weights<Tensor<S>>,
    opt: AdamW<S>,
    step: u64,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh weights seeded by `train.seed`.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let model = train.apply(model);
        let weights = Weights::init(&model, train.seed)?;
        Self::from_weights(&model, train, weights)
    }

    pub fn from_weights(model: &ModelConfig, train: &TrainConfig, weights: Weights<Tensor<S>>) -> Result<Self> {
        train.validate()?;
        let model = train.apply(model);
        model.validate()?;
        weights.check_layout(&model)?;
        let names = weights.names();
        let flat = weights.flatten();
        let shapes: Vec<&[usize]> = flat.iter().map(|t| t.shape()).collect();
        let decay = names.iter().zip(&flat).map(|(n, t)| t.rank() == 2 && !n.ends_with("bias")).collect();
        let opt = AdamW::new(&shapes, decay, train.betas, train.eps, train.weight_decay)?;
        Ok(Self { model, train: train.clone(), weights, opt, step: 0 })
    }

    /// Updates completed.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Forward, backward and one AdamW update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<MetricsRow> {
        let segs = Segments::uniform(batch.batch, batch.seq_len);
        let mut tape = Tape::new();
        let wv = self.weights.bind_params(&mut tape);
        let tr = forward(
            &mut tape,
            &self.model,
            &wv,
            &batch.input_ids,
            Some(&batch.targets),
            &segs,
            Mode::Train { step: self.step },
        )?;
        let losses = tr.losses.expect("targets given");
        let row = self.row(&tape, &tr, &losses)?;
        tape.backward(losses.total)?;
        let vars = wv.flatten();
        let mut grads: Vec<Tensor<S>> =
            vars.iter().map(|&&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))).collect();
        drop(tape);
        if let Some(c) = self.train.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let mut params: Vec<Tensor<S>> = self.weights.flatten().into_iter().cloned().collect();
        {
            let mut refs: Vec<&mut Tensor<S>> = params.iter_mut().collect();
            self.opt.step(&mut refs, &grads, row.lr)?;
        }
        self.weights = Weights::from_flat(&self.weights, params)?;
        self.step += 1;
        Ok(row)
    }

    fn row(&self, tape: &Tape<S>, tr: &ForwardTrace, l: &Losses) -> Result<MetricsRow> {
        let v = |x| tape.value(x).item().as_f64();
        let (total, ce, aux, balance) = (v(l.total), v(l.ce), v(l.aux), v(l.balance));
        if !(total.is_finite() && ce.is_finite() && aux.is_finite() && balance.is_finite()) {
            let p = tr.p_values(tape);
            let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            return Err(Error::NonFiniteLoss {
                step: self.step as usize,
                p_min: lo,
                p_max: hi,
                p_mean: tr.p_mean(tape),
                ce,
                aux,
                balance,
            });
        }
        Ok(MetricsRow {
            step: self.step + 1,
            loss_total: total,
            ce,
            aux,
            balance,
            r_train: tr.r_achieved(),
            r_eval: None,
            p_mean: tr.p_mean(tape),
            flip_rate: tr.flip_rate(),
            lr: self.train.lr_at(self.step + 1),
        })
    }

    pub fn evaluate(&self, data: &[u8]) -> Result<EvalReport> {
        evaluate(&self.model, &self.weights, data, self.train.seq_len, self.train.batch, self.train.eval_windows)
    }

    /// Runs the remaining steps on `corpus`, evaluating every `eval_every`
    /// updates and after the last; each row goes to `sink` as produced.
    pub fn run(&mut self, corpus: &Corpus, sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<Option<EvalReport>> {
        self.run_until(corpus, self.train.steps, sink)
    }

    /// [`Trainer::run`] stopped once `stop` updates are done; rows match the
    /// full run's rows for the same steps.
    pub fn run_until(
        &mut self,
        corpus: &Corpus,
        stop: u64,
        mut sink: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<Option<EvalReport>> {
        let stop = stop.min(self.train.steps);
        let mut batches = batch_iter(corpus.train(), self.train.seq_len, self.train.batch, self.train.seed)?;
        for _ in 0..self.step {
            batches.next();
        }
        let mut last = None;
        while self.step < stop {
            let batch = batches.next().expect("batch stream is endless");
            let mut row = self.train_step(&batch)?;
            let due = self.train.eval_every > 0 && self.step.is_multiple_of(self.train.eval_every);
            if due || self.step == self.train.steps {
                let rep = self.evaluate(corpus.eval())?;
                row.r_eval = Some(rep.r_eval);
                last = Some(rep);
            }
            sink(&row)?;
        }
        Ok(last)
    }
}

/// Eval-mode metrics over the non-overlapping windows of `data`, packed
/// `batch` windows per forward. `max_windows` keeps the first windows only.
pub fn evaluate<S: Scalar>(
    cfg: &ModelConfig,
    weights: &Weights<Tensor<S>>,
    data: &[u8],
    seq_len: usize,
    batch: usize,
    max_windows: Option<usize>,
) -> Result<EvalReport> {
    if seq_len < 2 || batch == 0 {
        return Err(Error::Config(format!("eval needs seq_len >= 2 and batch > 0, got {seq_len}, {batch}")));
    }
    weights.check_layout(cfg)?;
    let mut starts = window_starts(data.len(), seq_len);
    if let Some(m) = max_windows {
        starts.truncate(m);
    }
    if starts.is_empty() {
        return Err(Error::CorpusTooShort { len: data.len(), seq_len });
    }
    let (mut ce_sum, mut counted, mut tokens, mut concepts, mut p_sum) = (0.0, 0usize, 0usize, 0usize, 0.0);
    for chunk in starts.chunks(batch) {
        let b = Batch::from_windows(data, seq_len, chunk);
        let segs = Segments::uniform(b.batch, seq_len);
        let mut tape = Tape::new();
        let wv = weights.bind_consts(&mut tape);
        let tr = forward(&mut tape, cfg, &wv, &b.input_ids, Some(&b.targets), &segs, Mode::Eval)?;
        let valid = b.targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        let ce = tape.value(tr.losses.expect("targets given").ce).item().as_f64();
        ce_sum += ce * valid as f64;
        counted += valid;
        tokens += tr.n_tokens;
        concepts += tr.n_concepts;
        p_sum += tr.p_values(&tape).iter().sum::<f64>();
    }
    Ok(EvalReport {
        ce: ce_sum / counted.max(1) as f64,
        r_eval: tokens as f64 / concepts as f64,
        p_mean: p_sum / tokens as f64,
        tokens,
        concepts,
    })
}

#[cfg(test)]
mod tests;
