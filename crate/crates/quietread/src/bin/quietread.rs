//! Command-line surface over the library: train, eval, generate,
//! mask-inspect, synth, and report. Exit codes are a stable contract for
//! scripts: 0 success, 2 usage/config, 3 numeric failure, 4 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use quietread::data::{self, DataError};
use quietread::eval::{self, EvalError, GenMode};
use quietread::readq::{compute_loss_mask, render_row};
use quietread::runconfig::{ConfigError, RunConfig};
use quietread::runner::{self, RunnerError};
use quietread::trainer::TrainError;

#[derive(Parser)]
#[command(name = "quietread", version, about = "Desk-scale transformer training with silent-reading loss masking and buddy-encoder fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a run from a JSON config into an output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from checkpoints/step_N instead of starting fresh.
        #[arg(long)]
        resume: Option<usize>,
    },
    /// Evaluate a checkpoint: perplexity/buckets over a corpus and/or
    /// accuracy over a task file. Writes reports/eval_step_N.json.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint step; defaults to the latest.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Generate bytes from a checkpoint, greedy by default.
    Generate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Sample with this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render the loss mask for a text packed as one document.
    #[command(visible_alias = "inspect")]
    MaskInspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        text: String,
    },
    /// Generate a synthetic corpus (and tasks for kv) deterministically.
    Synth {
        /// kv | reverse
        #[arg(long)]
        kind: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where kv tasks go; defaults to <out>.tasks.jsonl.
        #[arg(long)]
        tasks_out: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_pairs: usize,
        #[arg(long, default_value_t = 3)]
        key_len: usize,
        #[arg(long, default_value_t = 3)]
        val_len: usize,
        /// Prefix length range for reverse docs, inclusive.
        #[arg(long, num_args = 2, default_values_t = [16usize, 16usize])]
        len_range: Vec<usize>,
    },
    /// Compare runs into a CSV table plus an SVG of loss curves.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// CSV output path; the SVG lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

struct CmdError {
    code: u8,
    message: String,
}

impl CmdError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        CmdError { code, message: message.into() }
    }
}

impl From<RunnerError> for CmdError {
    fn from(e: RunnerError) -> Self {
        CmdError::new(runner_code(&e), e.to_string())
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::new(config_code(&e), e.to_string())
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        CmdError::new(data_code(&e), e.to_string())
    }
}

impl From<EvalError> for CmdError {
    fn from(e: EvalError) -> Self {
        CmdError::new(eval_code(&e), e.to_string())
    }
}

fn runner_code(e: &RunnerError) -> u8 {
    match e {
        RunnerError::Config(c) => config_code(c),
        RunnerError::NotARunDir(_) | RunnerError::NoCheckpoint { .. } => 2,
        RunnerError::Train(t) => train_code(t),
        RunnerError::Eval(v) => eval_code(v),
        RunnerError::Data(d) => data_code(d),
        RunnerError::Io(_) => 4,
    }
}

fn config_code(e: &ConfigError) -> u8 {
    match e {
        ConfigError::Read { .. } => 4,
        _ => 2,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::NonFinite { .. } | TrainError::Tensor(_) | TrainError::MissingGrad(_) | TrainError::Hook(_) => 3,
        TrainError::Io(_) | TrainError::Checkpoint(_) => 4,
        TrainError::Data(d) => data_code(d),
        _ => 2,
    }
}

fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Tensor(_) => 3,
        EvalError::Io(_) => 4,
        EvalError::Data(d) => data_code(d),
        _ => 2,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.cmd {
        Cmd::Train { config, out, resume } => {
            let cfg = RunConfig::from_file(&config)?;
            let report = runner::run_training(cfg, &out, resume)?;
            println!(
                "trained {} steps (skipped {}), final train loss {:.4}; run dir {}",
                report.steps_completed,
                report.skipped_batches,
                report.final_train_loss,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval { run, step, corpus, tasks } => {
            if corpus.is_none() && tasks.is_none() {
                return Err(CmdError::new(2, "eval requires --corpus and/or --tasks"));
            }
            let step = resolve_step(&run, step)?;
            let corpus_data = match &corpus {
                Some(path) => Some((path.display().to_string(), data::read_corpus(path)?)),
                None => None,
            };
            let task_data = match &tasks {
                Some(path) => Some((path.display().to_string(), data::read_tasks(path)?)),
                None => None,
            };
            let report = runner::run_eval(
                &run,
                step,
                corpus_data.as_ref().map(|(n, d)| (n.as_str(), d.clone())),
                task_data.as_ref().map(|(n, t)| (n.as_str(), t.clone())),
            )?;
            if let Some(p) = &report.perplexity {
                println!(
                    "step {step}: ppl {:.4}, bucket A mean {} ({} tokens), bucket B mean {} ({} tokens)",
                    p.ppl,
                    p.bucket.bucket_a_mean.map_or("n/a".into(), |m| format!("{m:.4}")),
                    p.bucket.bucket_a_count,
                    p.bucket.bucket_b_mean.map_or("n/a".into(), |m| format!("{m:.4}")),
                    p.bucket.bucket_b_count,
                );
            }
            if let Some(m) = &report.mc {
                println!(
                    "step {step}: mc accuracy {:.4} (sum {:.4}, length-norm {:.4}) over {} tasks, {} skipped",
                    m.accuracy, m.accuracy_sum, m.accuracy_length_norm, m.scored, m.skipped_overlong
                );
            }
            Ok(())
        }
        Cmd::Generate { run, step, prompt, max_new, temperature, seed } => {
            let step = resolve_step(&run, step)?;
            let bundle = runner::load_run_bundle(&run, step)?;
            let mode = match temperature {
                Some(tau) => GenMode::Temperature { tau, seed },
                None => GenMode::Greedy,
            };
            let out = eval::generate(&bundle, prompt.as_bytes(), max_new, mode)?;
            println!("{}", String::from_utf8_lossy(&out));
            Ok(())
        }
        Cmd::MaskInspect { config, text } => {
            if text.is_empty() {
                return Err(CmdError::new(2, "--text must be non-empty"));
            }
            let cfg = RunConfig::from_file(&config)?.resolved()?;
            let batch = data::pack_documents(&[text.into_bytes()], cfg.train.seq_len)?;
            let mask = compute_loss_mask(&batch, &cfg.train.readq)
                .map_err(|e| CmdError::new(2, e.to_string()))?;
            for r in 0..batch.rows() {
                let (tokens, glyphs) = render_row(&batch, &mask, r);
                println!("{tokens}");
                println!("{glyphs}");
            }
            Ok(())
        }
        Cmd::Synth { kind, seed, n, out, tasks_out, n_pairs, key_len, val_len, len_range } => match kind.as_str() {
            "kv" => {
                let (docs, tasks) = data::synth_kv_corpus(seed, n, n_pairs, key_len, val_len)?;
                data::write_corpus(&out, &docs)?;
                let tasks_path = tasks_out.unwrap_or_else(|| tasks_path_for(&out));
                data::write_tasks(&tasks_path, &tasks)?;
                println!("wrote {} docs to {} and {} tasks to {}", docs.len(), out.display(), tasks.len(), tasks_path.display());
                Ok(())
            }
            "reverse" => {
                let docs = data::synth_reverse_corpus(seed, n, (len_range[0], len_range[1]))?;
                data::write_corpus(&out, &docs)?;
                println!("wrote {} docs to {}", docs.len(), out.display());
                Ok(())
            }
            other => Err(CmdError::new(2, format!("unknown synth kind {other:?} (expected kv or reverse)"))),
        },
        Cmd::Report { runs, out } => {
            let svg = out.with_extension("svg");
            let table = eval::compare_runs(&runs, &out, &svg)?;
            println!("wrote {} rows to {} and loss curves to {}", table.rows.len(), out.display(), svg.display());
            Ok(())
        }
    }
}

fn resolve_step(run: &Path, step: Option<usize>) -> Result<usize, CmdError> {
    match step {
        Some(s) => Ok(s),
        None => runner::latest_checkpoint_step(run)
            .ok_or_else(|| CmdError::new(2, format!("no checkpoints under {}", run.display()))),
    }
}

fn tasks_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    name.push_str(".tasks.jsonl");
    out.with_file_name(name)
}
