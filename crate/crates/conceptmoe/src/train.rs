//! Training runs on disk: metrics CSV, final checkpoint and a summary.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use conceptmoe_core::data::{byte_entropy, Corpus};
use conceptmoe_core::harness::{evaluate, EvalReport, MetricsRow, TrainConfig, Trainer, METRICS_HEADER};
use conceptmoe_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{AppError, Result};
use crate::io::{read_bytes, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ce: f64,
    #[serde(rename = "R_eval")]
    pub r_eval: f64,
    pub p_mean: f64,
    pub tokens: usize,
    pub concepts: usize,
}

impl From<EvalReport> for EvalSummary {
    fn from(r: EvalReport) -> Self {
        Self { ce: r.ce, r_eval: r.r_eval, p_mean: r.p_mean, tokens: r.tokens, concepts: r.concepts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub corpus_bytes: usize,
    /// Order-0 byte entropy of the eval split, nats.
    pub eval_byte_entropy: f64,
    pub final_eval: EvalSummary,
    pub wall_seconds: f64,
}

/// Writes the header and one line per row; flushed per row so a partial
/// run leaves a readable file.
pub struct MetricsWriter {
    out: BufWriter<fs::File>,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
        let mut w = Self { out: BufWriter::new(f), path: path.to_path_buf() };
        w.line(METRICS_HEADER)?;
        Ok(w)
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.line(&row.csv_line())
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").and_then(|_| self.out.flush()).map_err(|e| AppError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = lines.next().transpose().map_err(|e| AppError::io(path, e))?;
    if header.as_deref() != Some(METRICS_HEADER) {
        return Err(AppError::Usage(format!("{}: missing metrics header", path.display())));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(|e| AppError::io(path, e))?;
        if !line.is_empty() {
            rows.push(MetricsRow::parse_csv_line(&line)?);
        }
    }
    Ok(rows)
}

/// Trains on the bytes at `corpus` and writes `metrics.csv`, `summary.json`
/// and `checkpoint/` under `out`.
pub fn train_to_dir(model: &ModelConfig, train: &TrainConfig, corpus: &Path, out: &Path) -> Result<RunSummary> {
    train.validate()?;
    let bytes = read_bytes(corpus)?;
    let corpus = Corpus::new(bytes, train.eval_fraction)?;
    train_corpus(model, train, &corpus, out)
}

pub fn train_corpus(model: &ModelConfig, train: &TrainConfig, corpus: &Corpus, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let mut trainer = Trainer::<f32>::new(model, train)?;
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.csv"))?;
    let mut sink_err = None;
    let last = trainer.run(corpus, |row| {
        metrics.write(row).map_err(|e| {
            let msg = e.to_string();
            sink_err = Some(e);
            conceptmoe_core::Error::Config(msg)
        })
    });
    if let Some(e) = sink_err {
        return Err(e);
    }
    let last = last?;
    let final_eval = match last {
        Some(r) => r,
        None => trainer.evaluate(corpus.eval())?,
    };
    checkpoint::save(&out.join("checkpoint"), &trainer.model, &trainer.weights, trainer.step())?;
    let summary = RunSummary {
        steps: trainer.step(),
        corpus_bytes: corpus.len(),
        eval_byte_entropy: byte_entropy(corpus.eval()),
        final_eval: final_eval.into(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Eval-mode metrics of the checkpoint at `dir` over the eval split of
/// `corpus` (or all of it when `eval_fraction` is `None`).
pub fn evaluate_checkpoint(
    dir: &Path,
    corpus: &Path,
    eval_fraction: Option<f64>,
    seq_len: usize,
    batch: usize,
) -> Result<EvalSummary> {
    let ck = checkpoint::load(dir)?;
    let bytes = read_bytes(corpus)?;
    let data = match eval_fraction {
        Some(f) => Corpus::new(bytes, f)?.eval().to_vec(),
        None => bytes,
    };
    Ok(evaluate(&ck.config, &ck.weights, &data, seq_len, batch, None)?.into())
}
