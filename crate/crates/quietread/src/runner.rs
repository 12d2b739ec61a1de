//! Run-directory orchestration shared by the CLI and examples: resolved
//! config echo, training (fresh or resumed), evaluation reports, and bundle
//! loading with the run's fusion plan rehydrated.
//!
//! A run directory is append-only while a run executes:
//!
//! ```text
//! out/
//!   config.resolved.json   written once, never rewritten
//!   metrics.jsonl          one JSON object per step
//!   checkpoints/step_N/    generator/ buddy/ connector/ optim/ train_state.json
//!   reports/               eval_step_N.json, report.json
//! ```

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{DataError, McTask};
use crate::eval::{
    mc_eval, perplexity, EvalConfigEcho, EvalError, EvalReport, PerplexitySection,
};
use crate::fusion::ModelBundle;
use crate::runconfig::{ConfigError, RunConfig};
use crate::trainer::{self, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("run directory {0} has no resolved config; was it produced by `train`?")]
    NotARunDir(PathBuf),
    #[error("checkpoint for step {step} not found under {dir}")]
    NoCheckpoint { step: usize, dir: PathBuf },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// Trains (or resumes) a run into `out_dir`. The resolved config is echoed
/// on fresh runs and left untouched on resume. Returns the train report,
/// which is also written to `reports/report.json`.
pub fn run_training(
    config: RunConfig,
    out_dir: &Path,
    resume_step: Option<usize>,
) -> Result<TrainReport, RunnerError> {
    let resolved = config.resolved()?;
    std::fs::create_dir_all(out_dir)?;
    let echo_path = out_dir.join(RESOLVED_CONFIG);
    if !echo_path.exists() {
        std::fs::write(&echo_path, resolved.resolved_json())?;
    }
    let docs = resolved.data.docs()?;

    // With eval_every set, evaluate perplexity on the training corpus at the
    // interval; held-out evaluation goes through `run_eval` with an explicit
    // corpus.
    let docs_for_hook = docs.clone();
    let resolved_for_hook = resolved.clone();
    let out_for_hook = out_dir.to_path_buf();
    let mut hook = move |step: usize, bundle: &ModelBundle| -> Result<(), String> {
        let (ppl, bucket) = perplexity(
            bundle,
            &docs_for_hook,
            resolved_for_hook.train.seq_len,
            resolved_for_hook.eval.batch_rows,
            resolved_for_hook.bucket_k(),
        )
        .map_err(|e| e.to_string())?;
        let report = EvalReport {
            step,
            eval_config: EvalConfigEcho {
                corpus: Some(resolved_for_hook.data.fingerprint()),
                tasks: None,
                seq_len: resolved_for_hook.train.seq_len,
                k_for_buckets: resolved_for_hook.bucket_k(),
                scoring: resolved_for_hook.eval.scoring,
            },
            perplexity: Some(PerplexitySection { ppl, bucket }),
            mc: None,
        };
        write_eval_report(&out_for_hook, &report).map_err(|e| e.to_string())
    };
    let eval_hook = if resolved.train.eval_every > 0 {
        Some(&mut hook as trainer::EvalHook)
    } else {
        None
    };

    let report = match resume_step {
        None => trainer::train(&resolved.model, &resolved.train, &docs, out_dir, eval_hook)?,
        Some(step) => trainer::resume(
            &resolved.model,
            &resolved.train,
            &docs,
            out_dir,
            step,
            eval_hook,
        )?,
    };

    std::fs::create_dir_all(out_dir.join("reports"))?;
    std::fs::write(
        out_dir.join("reports/report.json"),
        serde_json::to_string_pretty(&report).map_err(std::io::Error::other)? + "\n",
    )?;
    Ok(report)
}

/// Reads a run's resolved config back.
pub fn load_run_config(run_dir: &Path) -> Result<RunConfig, RunnerError> {
    let path = run_dir.join(RESOLVED_CONFIG);
    if !path.is_file() {
        return Err(RunnerError::NotARunDir(run_dir.to_path_buf()));
    }
    Ok(RunConfig::from_file(&path)?)
}

/// Loads the bundle at `checkpoints/step_N`, rehydrating the fusion plan
/// (window, visibility, tap norm) from the run's resolved config.
pub fn load_run_bundle(run_dir: &Path, step: usize) -> Result<ModelBundle, RunnerError> {
    let config = load_run_config(run_dir)?.resolved()?;
    let ckpt = run_dir.join("checkpoints").join(format!("step_{step}"));
    if !ckpt.is_dir() {
        return Err(RunnerError::NoCheckpoint { step, dir: run_dir.join("checkpoints") });
    }
    let mut bundle = trainer::load_bundle(&ckpt)?;
    if let (Some(parts), Some(plan)) = (&mut bundle.fusion, &config.buddy) {
        parts.plan = plan.clone();
    }
    Ok(bundle)
}

/// Largest step with a saved checkpoint.
pub fn latest_checkpoint_step(run_dir: &Path) -> Option<usize> {
    let dir = run_dir.join("checkpoints");
    let mut best = None;
    for entry in std::fs::read_dir(dir).ok()?.flatten() {
        if let Some(step) = entry
            .file_name()
            .to_string_lossy()
            .strip_prefix("step_")
            .and_then(|s| s.parse::<usize>().ok())
        {
            if best.is_none_or(|b| step > b) {
                best = Some(step);
            }
        }
    }
    best
}

/// Evaluates a checkpoint against a corpus and/or task file and writes
/// `reports/eval_step_N.json`. Byte-identical across repeated invocations.
pub fn run_eval(
    run_dir: &Path,
    step: usize,
    corpus: Option<(&str, Vec<Vec<u8>>)>,
    tasks: Option<(&str, Vec<McTask>)>,
) -> Result<EvalReport, RunnerError> {
    let config = load_run_config(run_dir)?.resolved()?;
    let bundle = load_run_bundle(run_dir, step)?;

    let perplexity_section = match &corpus {
        Some((_, docs)) => {
            let (ppl, bucket) = perplexity(
                &bundle,
                docs,
                config.train.seq_len,
                config.eval.batch_rows,
                config.bucket_k(),
            )?;
            Some(PerplexitySection { ppl, bucket })
        }
        None => None,
    };
    let mc_section = match &tasks {
        Some((_, list)) => Some(mc_eval(&bundle, list, config.eval.scoring)?),
        None => None,
    };

    let report = EvalReport {
        step,
        eval_config: EvalConfigEcho {
            corpus: corpus.as_ref().map(|(name, _)| name.to_string()),
            tasks: tasks.as_ref().map(|(name, _)| name.to_string()),
            seq_len: config.train.seq_len,
            k_for_buckets: config.bucket_k(),
            scoring: config.eval.scoring,
        },
        perplexity: perplexity_section,
        mc: mc_section,
    };
    write_eval_report(run_dir, &report)?;
    Ok(report)
}

fn write_eval_report(run_dir: &Path, report: &EvalReport) -> Result<(), RunnerError> {
    let reports = run_dir.join("reports");
    std::fs::create_dir_all(&reports)?;
    std::fs::write(
        reports.join(format!("eval_step_{}.json", report.step)),
        serde_json::to_string_pretty(report).map_err(std::io::Error::other)? + "\n",
    )?;
    Ok(())
}
