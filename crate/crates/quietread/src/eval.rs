//! Evaluation harness: masked perplexity with a per-position-bucket split,
//! likelihood-scored multiple choice, greedy/temperature generation, and
//! cross-run comparison tables.
//!
//! Evaluation always scores over the base mask — never the silent-reading
//! mask — so checkpoints trained with different masking recipes are compared
//! on identical token sets. The bucket report splits the same per-token
//! losses at the silent-reading boundary: bucket A holds the first `k`
//! predictions after each BOS, bucket B everything else.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, encode, pack_documents, DataError, McTask, BOS};
use crate::fusion::{FusionError, ModelBundle, Visibility};
use crate::model::ModelError;
use crate::readq::{compute_loss_mask, MaskError, ReadQConfig};
use crate::tensor::{IntMatrix, Tensor, TensorError};
use crate::trainer::MetricsLine;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation corpus packs to zero masked-in tokens")]
    EmptyEvalSet,
    #[error("prompt of {prompt} tokens does not fit max_seq {max} with max_new {max_new}")]
    PromptTooLong {
        prompt: usize,
        max: usize,
        max_new: usize,
    },
    #[error("run {0} has no eval report (reports/eval_step_*.json)")]
    NoEvalReport(PathBuf),
    #[error("eval configs differ between {first} and {second}")]
    EvalConfigMismatch { first: String, second: String },
    #[error("need at least 2 runs to compare, got {0}")]
    TooFewRuns(usize),
    #[error("malformed report {path}: {reason}")]
    BadReport { path: PathBuf, reason: String },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean loss split at the silent-reading boundary: bucket A covers positions
/// within the first `k` predictions after a BOS, bucket B all other
/// masked-in positions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BucketReport {
    pub k: usize,
    /// `None` when the bucket holds no tokens.
    pub bucket_a_mean: Option<f64>,
    pub bucket_a_count: usize,
    pub bucket_b_mean: Option<f64>,
    pub bucket_b_count: usize,
}

/// Per-token negative log-likelihoods for one packed batch, `None` at
/// positions excluded by the base mask.
fn token_losses(logits: &Tensor<f32>, targets: &[u32], mask: &[bool]) -> Vec<Option<f64>> {
    let shape = logits.shape();
    let vocab = shape[shape.len() - 1];
    let rows = logits.numel() / vocab;
    debug_assert_eq!(rows, targets.len());
    let data = logits.data();
    (0..rows)
        .map(|r| {
            if !mask[r] {
                return None;
            }
            let row = &data[r * vocab..(r + 1) * vocab];
            Some(nll(row, targets[r] as usize))
        })
        .collect()
}

fn nll(logit_row: &[f32], target: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in logit_row {
        max = max.max(v as f64);
    }
    let mut sum = 0.0f64;
    for &v in logit_row {
        sum += (v as f64 - max).exp();
    }
    max + sum.ln() - logit_row[target] as f64
}

/// Masked perplexity over the base mask, plus the bucket split at `k`.
/// Rows are evaluated in chunks of `batch_rows`.
pub fn perplexity(
    bundle: &ModelBundle,
    docs: &[Vec<u8>],
    seq_len: usize,
    batch_rows: usize,
    k_for_buckets: usize,
) -> Result<(f64, BucketReport), EvalError> {
    let packed = pack_documents(docs, seq_len)?;
    if packed.rows() == 0 {
        return Err(EvalError::EmptyEvalSet);
    }
    // Bucket A = base-masked-in positions removed by a k-window mask.
    let window_mask = compute_loss_mask(&packed, &ReadQConfig::with_k(k_for_buckets))?;

    let mut sum = 0.0f64;
    let mut count = 0usize;
    let mut a = (0.0f64, 0usize);
    let mut b = (0.0f64, 0usize);
    let chunk = batch_rows.max(1);
    let all_rows: Vec<usize> = (0..packed.rows()).collect();
    for rows in all_rows.chunks(chunk) {
        let batch = packed.select_rows(rows);
        let logits = bundle.logits(&batch.tokens)?;
        let losses = token_losses(&logits, &batch.targets.data, &batch.base_mask);
        for (i, loss) in losses.iter().enumerate() {
            let Some(l) = loss else { continue };
            sum += l;
            count += 1;
            let global = rows[i / seq_len] * seq_len + (i % seq_len);
            if !window_mask.mask[global] {
                a.0 += l;
                a.1 += 1;
            } else {
                b.0 += l;
                b.1 += 1;
            }
        }
    }
    if count == 0 {
        return Err(EvalError::EmptyEvalSet);
    }
    let report = BucketReport {
        k: k_for_buckets,
        bucket_a_mean: (a.1 > 0).then(|| a.0 / a.1 as f64),
        bucket_a_count: a.1,
        bucket_b_mean: (b.1 > 0).then(|| b.0 / b.1 as f64),
        bucket_b_count: b.1,
    };
    Ok(((sum / count as f64).exp(), report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Sum,
    #[default]
    LengthNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskScore {
    pub chosen: usize,
    pub correct: bool,
    pub sum_logprob: Vec<f64>,
    pub length_norm_logprob: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McResult {
    pub scoring: Scoring,
    /// Accuracy under the configured scoring rule.
    pub accuracy: f64,
    pub accuracy_sum: f64,
    pub accuracy_length_norm: f64,
    pub scored: usize,
    pub skipped_overlong: usize,
    pub per_task: Vec<TaskScore>,
}

/// Argmax with ties broken toward the lowest index.
pub fn pick_choice(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores each choice by the log-likelihood of its tokens as a continuation
/// of `[BOS] + prompt`, under the bundle's configured path. Tasks whose
/// longest prompt+choice exceeds `max_seq` are skipped and counted.
pub fn mc_eval(
    bundle: &ModelBundle,
    tasks: &[McTask],
    scoring: Scoring,
) -> Result<McResult, EvalError> {
    let max_seq = bundle.max_seq();
    let prefix_mode = matches!(
        bundle.fusion.as_ref().map(|f| f.plan.visibility),
        Some(Visibility::PrefixBidirectional)
    );
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut correct_sum = 0usize;
    let mut correct_norm = 0usize;
    let mut skipped = 0usize;

    for task in tasks {
        let context: Vec<u32> = std::iter::once(BOS)
            .chain(encode(task.prompt.as_bytes()))
            .collect();
        let longest = task
            .choices
            .iter()
            .map(|c| context.len() + encode(c.as_bytes()).len())
            .max()
            .unwrap_or(context.len());
        if longest > max_seq {
            skipped += 1;
            continue;
        }

        // One padded row per choice; PAD tails cannot influence earlier
        // positions under causal attention.
        let width = longest;
        let mut rows_tokens = Vec::with_capacity(task.choices.len() * width);
        let mut choice_tokens: Vec<Vec<u32>> = Vec::with_capacity(task.choices.len());
        for choice in &task.choices {
            let toks = encode(choice.as_bytes());
            let mut row = context.clone();
            row.extend(&toks);
            row.resize(width, data::PAD);
            rows_tokens.extend(row);
            choice_tokens.push(toks);
        }
        let tokens = IntMatrix::new(task.choices.len(), width, rows_tokens);
        let logits = bundle.logits_with_prefix(&tokens, if prefix_mode { context.len() } else { 0 })?;

        let vocab = *logits.shape().last().expect("logits have vocab dim");
        let mut sum_lp = Vec::with_capacity(task.choices.len());
        let mut norm_lp = Vec::with_capacity(task.choices.len());
        for (ci, toks) in choice_tokens.iter().enumerate() {
            let mut lp = 0.0f64;
            for (i, &tok) in toks.iter().enumerate() {
                let pos = context.len() + i - 1;
                let row = &logits.data()[(ci * width + pos) * vocab..(ci * width + pos + 1) * vocab];
                lp -= nll(row, tok as usize);
            }
            sum_lp.push(lp);
            norm_lp.push(if toks.is_empty() { f64::NEG_INFINITY } else { lp / toks.len() as f64 });
        }
        let chosen_sum = pick_choice(&sum_lp);
        let chosen_norm = pick_choice(&norm_lp);
        if chosen_sum == task.answer_index {
            correct_sum += 1;
        }
        if chosen_norm == task.answer_index {
            correct_norm += 1;
        }
        let chosen = match scoring {
            Scoring::Sum => chosen_sum,
            Scoring::LengthNorm => chosen_norm,
        };
        per_task.push(TaskScore {
            chosen,
            correct: chosen == task.answer_index,
            sum_logprob: sum_lp,
            length_norm_logprob: norm_lp,
        });
    }

    let scored = per_task.len();
    let accuracy_sum = if scored > 0 { correct_sum as f64 / scored as f64 } else { 0.0 };
    let accuracy_length_norm = if scored > 0 { correct_norm as f64 / scored as f64 } else { 0.0 };
    Ok(McResult {
        scoring,
        accuracy: match scoring {
            Scoring::Sum => accuracy_sum,
            Scoring::LengthNorm => accuracy_length_norm,
        },
        accuracy_sum,
        accuracy_length_norm,
        scored,
        skipped_overlong: skipped,
        per_task,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum GenMode {
    Greedy,
    Temperature { tau: f64, seed: u64 },
}

/// Autoregressive generation conditioned on `[BOS] + prompt`; stops early at
/// any special token. Greedy mode breaks logit ties toward the lowest id;
/// temperature mode is deterministic given its seed.
pub fn generate(
    bundle: &ModelBundle,
    prompt: &[u8],
    max_new: usize,
    mode: GenMode,
) -> Result<Vec<u8>, EvalError> {
    let mut tokens: Vec<u32> = std::iter::once(BOS).chain(encode(prompt)).collect();
    if tokens.len() + max_new > bundle.max_seq() {
        return Err(EvalError::PromptTooLong {
            prompt: tokens.len(),
            max: bundle.max_seq(),
            max_new,
        });
    }
    let mut rng = match mode {
        GenMode::Temperature { seed, .. } => Some(crate::rng::seeded(seed)),
        GenMode::Greedy => None,
    };
    let mut out = Vec::new();
    for _ in 0..max_new {
        let s = tokens.len();
        let logits = bundle.logits(&IntMatrix::new(1, s, tokens.clone()))?;
        let vocab = *logits.shape().last().expect("vocab dim");
        let row = &logits.data()[(s - 1) * vocab..s * vocab];
        let next = match mode {
            GenMode::Greedy => {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u32
            }
            GenMode::Temperature { tau, .. } => {
                let r = rng.as_mut().expect("temperature rng");
                sample_with_temperature(row, tau, r)
            }
        };
        if next >= 256 {
            break;
        }
        out.push(next as u8);
        tokens.push(next);
    }
    Ok(out)
}

fn sample_with_temperature<R: Rng>(row: &[f32], tau: f64, rng: &mut R) -> u32 {
    let scaled: Vec<f64> = row.iter().map(|&v| v as f64 / tau.max(1e-9)).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut u: f64 = rng.random::<f64>() * total;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i as u32;
        }
    }
    (exps.len() - 1) as u32
}

/// What an eval report was computed against; comparisons require equality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub corpus: Option<String>,
    pub tasks: Option<String>,
    pub seq_len: usize,
    pub k_for_buckets: usize,
    pub scoring: Scoring,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerplexitySection {
    pub ppl: f64,
    pub bucket: BucketReport,
}

/// Machine-readable evaluation report (`reports/eval_step_N.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub eval_config: EvalConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<PerplexitySection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McResult>,
}

/// One comparison row, sourced from a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub experiment: String,
    pub ppl: Option<f64>,
    pub bucket_a_mean: Option<f64>,
    pub bucket_b_mean: Option<f64>,
    pub mc_accuracy_sum: Option<f64>,
    pub mc_accuracy_length_norm: Option<f64>,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "experiment,ppl,bucket_a_mean,bucket_b_mean,mc_accuracy_sum,mc_accuracy_length_norm,final_train_loss\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.experiment,
                fmt_opt(row.ppl),
                fmt_opt(row.bucket_a_mean),
                fmt_opt(row.bucket_b_mean),
                fmt_opt(row.mc_accuracy_sum),
                fmt_opt(row.mc_accuracy_length_norm),
                fmt_opt(row.final_train_loss),
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(EvalError::BadReport {
                    path: PathBuf::from("<csv>"),
                    reason: format!("expected 7 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Option<f64> {
                if s.is_empty() {
                    None
                } else {
                    s.parse().ok()
                }
            };
            rows.push(ComparisonRow {
                experiment: fields[0].to_string(),
                ppl: parse(fields[1]),
                bucket_a_mean: parse(fields[2]),
                bucket_b_mean: parse(fields[3]),
                mc_accuracy_sum: parse(fields[4]),
                mc_accuracy_length_norm: parse(fields[5]),
                final_train_loss: parse(fields[6]),
            });
        }
        Ok(ComparisonTable { rows })
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        // Full round-trip precision so re-parsing the CSV reproduces the table.
        Some(x) => format!("{x:?}"),
        None => String::new(),
    }
}

fn latest_eval_report(run_dir: &Path) -> Result<EvalReport, EvalError> {
    let reports_dir = run_dir.join("reports");
    let mut best: Option<(usize, PathBuf)> = None;
    if let Ok(entries) = std::fs::read_dir(&reports_dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(step) = name
                .strip_prefix("eval_step_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, entry.path()));
                }
            }
        }
    }
    let (_, path) = best.ok_or_else(|| EvalError::NoEvalReport(run_dir.to_path_buf()))?;
    serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| EvalError::BadReport {
        path,
        reason: e.to_string(),
    })
}

fn final_train_loss(run_dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(run_dir.join("metrics.jsonl")).ok()?;
    let losses: Vec<f64> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<MetricsLine>(l).ok())
        .filter_map(|m| m.loss_mean)
        .collect();
    if losses.is_empty() {
        return None;
    }
    let tail = &losses[losses.len().saturating_sub(10)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Reads per-step losses for the SVG chart.
fn loss_curve(run_dir: &Path) -> Vec<(f64, f64)> {
    let Ok(text) = std::fs::read_to_string(run_dir.join("metrics.jsonl")) else {
        return Vec::new();
    };
    text.lines()
        .filter_map(|l| serde_json::from_str::<MetricsLine>(l).ok())
        .filter_map(|m| m.loss_mean.map(|loss| (m.step as f64, loss)))
        .collect()
}

/// Builds the comparison table across run directories (row order = input
/// order), writes the CSV and an SVG of the loss curves, and returns the
/// table. All runs must carry eval reports with identical eval configs.
pub fn compare_runs(
    run_dirs: &[PathBuf],
    csv_out: &Path,
    svg_out: &Path,
) -> Result<ComparisonTable, EvalError> {
    if run_dirs.len() < 2 {
        return Err(EvalError::TooFewRuns(run_dirs.len()));
    }
    let mut rows = Vec::new();
    let mut first_config: Option<(String, EvalConfigEcho)> = None;
    let mut curves = Vec::new();
    for dir in run_dirs {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| dir.display().to_string());
        let report = latest_eval_report(dir)?;
        match &first_config {
            None => first_config = Some((name.clone(), report.eval_config.clone())),
            Some((first_name, cfg)) => {
                if *cfg != report.eval_config {
                    return Err(EvalError::EvalConfigMismatch {
                        first: first_name.clone(),
                        second: name,
                    });
                }
            }
        }
        rows.push(ComparisonRow {
            experiment: name.clone(),
            ppl: report.perplexity.as_ref().map(|p| p.ppl),
            bucket_a_mean: report.perplexity.as_ref().and_then(|p| p.bucket.bucket_a_mean),
            bucket_b_mean: report.perplexity.as_ref().and_then(|p| p.bucket.bucket_b_mean),
            mc_accuracy_sum: report.mc.as_ref().map(|m| m.accuracy_sum),
            mc_accuracy_length_norm: report.mc.as_ref().map(|m| m.accuracy_length_norm),
            final_train_loss: final_train_loss(dir),
        });
        curves.push((name, loss_curve(dir)));
    }
    let table = ComparisonTable { rows };
    std::fs::write(csv_out, table.to_csv())?;
    std::fs::write(svg_out, loss_curve_svg(&curves))?;
    Ok(table)
}

const SVG_PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal line chart of loss vs step, one polyline per run.
pub fn loss_curve_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, margin) = (720.0, 420.0, 50.0);
    let points: Vec<(f64, f64)> = curves.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let (x_min, x_max) = bounds(points.iter().map(|p| p.0));
    let (y_min, y_max) = bounds(points.iter().map(|p| p.1));
    let x_span = (x_max - x_min).max(1e-9);
    let y_span = (y_max - y_min).max(1e-9);
    let sx = |x: f64| margin + (x - x_min) / x_span * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y_min) / y_span * (h - 2.0 * margin);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>\n",
        m = margin,
        y = h - margin,
        x = w - margin
    ));
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y}\" stroke=\"black\"/>\n",
        m = margin,
        y = h - margin
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"12\">step</text>\n",
        x = w / 2.0 - 12.0,
        y = h - margin / 3.0
    ));
    svg.push_str(&format!(
        "  <text x=\"8\" y=\"{y}\" font-size=\"12\">loss</text>\n",
        y = h / 2.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{m}\" y=\"{y}\" font-size=\"10\">{x_min:.0}</text>\n",
        m = margin,
        y = h - margin + 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{x}\" y=\"{y}\" font-size=\"10\">{x_max:.0}</text>\n",
        x = w - margin - 10.0,
        y = h - margin + 14.0
    ));
    svg.push_str(&format!(
        "  <text x=\"6\" y=\"{y}\" font-size=\"10\">{y_max:.3}</text>\n",
        y = margin + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"6\" y=\"{y}\" font-size=\"10\">{y_min:.3}</text>\n",
        y = h - margin
    ));
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = SVG_PALETTE[i % SVG_PALETTE.len()];
        if !curve.is_empty() {
            let pts: Vec<String> = curve
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            svg.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{y}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            xml_escape(name),
            x = w - margin - 160.0,
            y = margin + 16.0 * (i as f64 + 1.0),
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
