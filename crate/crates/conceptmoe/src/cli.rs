//! `conceptmoe` subcommands. Exit codes: 0 success, 1 failed verification
//! or aborted training, 2 usage, config or IO errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use conceptmoe_core::costmodel::{parse_ratio, CostInputs, Strategy};
use conceptmoe_core::harness::TrainConfig;
use conceptmoe_core::model::ModelConfig;

use crate::error::{AppError, Result};
use crate::verify::{Fault, Suite};
use crate::{checkpoint, chunk, cost, io, train, verify};

/// Worker-count bound read from the environment.
pub const THREADS_VAR: &str = "CONCEPT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "conceptmoe", version, about = "Train, inspect and verify concept-level MoE models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ChunkFormat {
    Annotated,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from JSON configs; writes metrics.csv, summary.json and checkpoint/.
    Train {
        #[arg(long)]
        model_config: PathBuf,
        #[arg(long)]
        train_config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the train config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Noise-free eval metrics of a checkpoint as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluate only this tail fraction of the corpus.
        #[arg(long)]
        eval_fraction: Option<f64>,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
    },
    /// Show where a checkpoint places chunk boundaries in a text.
    Chunk {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, value_enum, default_value_t = ChunkFormat::Annotated)]
        format: ChunkFormat,
    },
    /// Attention-map, KV-cache and FLOPs table for a model config.
    Cost {
        #[arg(long)]
        config: PathBuf,
        /// One strategy; all four when omitted.
        #[arg(long)]
        strategy: Option<String>,
        /// Compression ratio, e.g. 2, 1.5 or 16/9.
        #[arg(long = "R")]
        r: Option<String>,
        /// Comma-separated ratios, one row each.
        #[arg(long)]
        sweep: Option<String>,
        /// Also write the table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run invariant suites; prints TAP lines.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Break a component on purpose to exercise failure reporting.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match threads().and_then(|_| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Worker bound from the environment; 1 when unset. Execution is
/// single-threaded, which every bound admits.
pub fn threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| AppError::Usage(format!("{THREADS_VAR}={v:?} must be a positive integer"))),
    }
}

fn stdout_write(bytes: &[u8]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| AppError::io("<stdout>", e))
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { model_config, train_config, corpus, out, seed } => {
            let model: ModelConfig = io::load_json(&model_config)?;
            let mut tc: TrainConfig = io::load_json(&train_config)?;
            if let Some(s) = seed {
                tc.seed = s;
            }
            let summary = train::train_to_dir(&model, &tc, &corpus, &out)?;
            let line = serde_json::to_string(&summary).expect("summary serializes");
            stdout_write(format!("{line}\n").as_bytes())
        }
        Command::Evaluate { checkpoint, corpus, eval_fraction, seq_len, batch } => {
            let rep = train::evaluate_checkpoint(&checkpoint, &corpus, eval_fraction, seq_len, batch)?;
            let line = serde_json::to_string(&rep).expect("report serializes");
            stdout_write(format!("{line}\n").as_bytes())
        }
        Command::Chunk { checkpoint, text, format } => {
            let ck = checkpoint::load(&checkpoint)?;
            let bytes = io::read_bytes(&text)?;
            let c = chunk::chunk_text(&ck.config, &ck.weights, &bytes)?;
            match format {
                ChunkFormat::Annotated => {
                    let mut out = chunk::annotate(&bytes, &c);
                    if out.last() != Some(&b'\n') {
                        out.push(b'\n');
                    }
                    stdout_write(&out)
                }
                ChunkFormat::Json => {
                    let line = serde_json::to_string(&c).expect("chunking serializes");
                    stdout_write(format!("{line}\n").as_bytes())
                }
            }
        }
        Command::Cost { config, strategy, r, sweep, csv } => {
            let model: ModelConfig = io::load_json(&config)?;
            let base = CostInputs { strategy: Strategy::Baseline, ..CostInputs::from_model(&model)? };
            let strategies = match strategy {
                Some(s) => vec![s.parse::<Strategy>()?],
                None => Strategy::ALL.to_vec(),
            };
            let mut ratios = Vec::new();
            if let Some(r) = r {
                ratios.push(parse_ratio(&r)?);
            }
            for s in sweep.iter().flat_map(|s| s.split(',')).filter(|s| !s.trim().is_empty()) {
                ratios.push(parse_ratio(s)?);
            }
            if ratios.is_empty() {
                ratios.push(base_ratio(&model)?);
            }
            let mut table = cost::header();
            table.push('\n');
            for row in cost::rows(&base, &strategies, &ratios)? {
                table.push_str(&row);
                table.push('\n');
            }
            if let Some(p) = csv {
                std::fs::write(&p, &table).map_err(|e| AppError::io(&p, e))?;
            }
            stdout_write(table.as_bytes())
        }
        Command::Verify { suite, seed, inject_fault } => {
            let checks = verify::run(suite, inject_fault, seed);
            stdout_write(verify::tap(&checks).as_bytes())?;
            match checks.iter().find(|c| !c.passed) {
                Some(c) => Err(AppError::Verify(format!("{} (worst {:.3e}, bound {:.0e})", c.name, c.value, c.tol))),
                None => Ok(()),
            }
        }
    }
}

fn base_ratio(model: &ModelConfig) -> Result<conceptmoe_core::costmodel::Q> {
    Ok(CostInputs::from_model(model)?.r)
}
