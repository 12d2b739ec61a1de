//! Deterministic training loop: AdamW with warmup+cosine schedule, global
//! gradient clipping, the silent-reading loss mask, optional buddy fusion,
//! and the two-phase schedule where phase 1 trains only the connector and
//! phase 2 unfreezes the rest.
//!
//! Batch order is a pure function of (seed, step): the corpus is packed once
//! and rows are drawn through a per-epoch seeded permutation. Re-running a
//! config reproduces the loss curve bitwise, and resuming from a checkpoint
//! continues it exactly.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{pack_documents, DataError, PackedBatch};
use crate::fusion::{
    fuse_forward_on_tape, lift_connector, Connector, FusionError, FusionParts, FusionPlan,
    ModelBundle, Visibility,
};
use crate::model::{
    forward_on_tape, init_params, lift_params, Attn, ModelConfig, ModelError, ParamStore,
};
use crate::readq::{compute_loss_mask, MaskError, ReadQConfig};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("non-finite value at step {step} ({message}); diagnostic checkpoint at {diagnostic}")]
    NonFinite {
        step: usize,
        message: String,
        diagnostic: PathBuf,
    },
    #[error("missing gradient for unfrozen parameter {0}")]
    MissingGrad(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("resume checkpoint for step {step} not found under {dir}")]
    ResumeMissing { step: usize, dir: PathBuf },
    #[error("eval hook: {0}")]
    Hook(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "default_min_lr_frac")]
    pub min_lr_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Steps during which only the connector trains; 0 disables phase 1.
    #[serde(default)]
    pub phase1_steps: usize,
    /// Learning-rate multiplier applied during phase 1.
    #[serde(default = "default_one")]
    pub phase1_lr_scale: f64,
    #[serde(default = "ReadQConfig::disabled")]
    pub readq: ReadQConfig,
    #[serde(skip)]
    pub fusion: Option<FusionPlan>,
    /// Invoke the eval hook every this many steps; 0 = never.
    #[serde(default)]
    pub eval_every: usize,
    /// Save a checkpoint every this many steps; 0 = final only.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_min_lr_frac() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.95)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_one() -> f64 {
    1.0
}

impl TrainError {
    /// A non-finite value surfaced anywhere inside the step's math.
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Fusion(FusionError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Fusion(FusionError::Model(ModelError::Tensor(
                    TensorError::NonFinite { .. }
                )))
        )
    }
}

impl TrainConfig {
    pub fn validated(self) -> Result<Self, TrainError> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("total_steps and batch_size must be ≥ 1".into()));
        }
        if self.phase1_steps > self.total_steps {
            return Err(TrainError::Config(format!(
                "phase1_steps {} exceeds total_steps {}",
                self.phase1_steps, self.total_steps
            )));
        }
        if self.phase1_steps > 0 && self.fusion.is_none() {
            return Err(TrainError::Config(
                "phase1_steps > 0 requires fusion to be enabled".into(),
            ));
        }
        if self.readq.enabled && self.readq.k >= self.seq_len {
            return Err(TrainError::Config(format!(
                "readq.k {} must be smaller than seq_len {}",
                self.readq.k, self.seq_len
            )));
        }
        if let Some(plan) = &self.fusion {
            if plan.visibility != Visibility::Causal {
                return Err(TrainError::Config(
                    "training requires buddy visibility=causal".into(),
                ));
            }
        }
        Ok(self)
    }
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then cosine decay to
/// `min_lr_frac·peak_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    if step < cfg.warmup_steps {
        return peak * step as f64 / cfg.warmup_steps as f64;
    }
    let min = peak * cfg.min_lr_frac;
    let decay_span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if decay_span == 0 || step >= cfg.total_steps {
        return min;
    }
    let progress = (step - cfg.warmup_steps) as f64 / decay_span as f64;
    min + (peak - min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Parameter names excluded from updates; names are group-prefixed
/// (`gen.`, `buddy.`, `connector.`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FreezeSet(BTreeSet<String>);

impl FreezeSet {
    pub fn none() -> Self {
        FreezeSet(BTreeSet::new())
    }

    pub fn from_names<I: IntoIterator<Item = String>>(names: I) -> Self {
        FreezeSet(names.into_iter().collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// First/second moment buffers per group-prefixed parameter name, plus the
/// shared update counter.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: usize,
    moments: Vec<(String, Vec<f32>, Vec<f32>)>,
    index: std::collections::HashMap<String, usize>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    fn entry(&mut self, name: &str, len: usize) -> &mut (String, Vec<f32>, Vec<f32>) {
        if let Some(&i) = self.index.get(name) {
            return &mut self.moments[i];
        }
        self.index.insert(name.to_string(), self.moments.len());
        self.moments.push((name.to_string(), vec![0.0; len], vec![0.0; len]));
        self.moments.last_mut().expect("just pushed")
    }

    pub fn moment(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.index
            .get(name)
            .map(|&i| (&self.moments[i].1[..], &self.moments[i].2[..]))
    }

    /// Serializes moments as a store of `<name>.m` / `<name>.v` tensors.
    pub fn to_store(&self) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, m, v) in &self.moments {
            store
                .insert(format!("{name}.m"), Tensor::new(vec![m.len()], m.clone()).expect("flat"))
                .expect("unique");
            store
                .insert(format!("{name}.v"), Tensor::new(vec![v.len()], v.clone()).expect("flat"))
                .expect("unique");
        }
        store
    }

    pub fn from_store(store: &ParamStore<f32>, step: usize) -> Self {
        let mut state = OptimState { step, ..Default::default() };
        for (name, tensor) in store.iter() {
            if let Some(base) = name.strip_suffix(".m") {
                let entry = state.entry(base, tensor.numel());
                entry.1.copy_from_slice(tensor.data());
            } else if let Some(base) = name.strip_suffix(".v") {
                let entry = state.entry(base, tensor.numel());
                entry.2.copy_from_slice(tensor.data());
            }
        }
        state
    }
}

/// AdamW hyperparameters, split out so the optimizer is testable without a
/// full training config.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(cfg: &TrainConfig) -> Self {
        AdamHyper { betas: cfg.betas, eps: cfg.adam_eps, weight_decay: cfg.weight_decay }
    }
}

/// Decoupled weight decay targets matrix weights only: 2-D tensors that are
/// not embeddings. LN parameters and biases are 1-D; embeddings are excluded
/// by name.
fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.contains("embedding")
}

/// One AdamW update over a store whose unfrozen tensors carry gradients.
/// Frozen parameters and their moments are untouched bitwise. The caller
/// advances `optim.step` once per training step before applying groups.
pub fn adamw_apply(
    store: &mut ParamStore<f32>,
    prefix: &str,
    optim: &mut OptimState,
    freeze: &FreezeSet,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    let t = optim.step as i32;
    debug_assert!(t >= 1, "advance optim.step before applying");
    let (b1, b2) = hyper.betas;
    let inv_bc1 = (1.0 / (1.0 - b1.powi(t))) as f32;
    let inv_bc2 = (1.0 / (1.0 - b2.powi(t))) as f32;
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let lr_f = lr as f32;
    let eps_f = hyper.eps as f32;

    for (name, tensor) in store.iter_mut() {
        let full_name = if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        if freeze.contains(&full_name) {
            continue;
        }
        let rank = tensor.shape().len();
        let wd = if decays(name, rank) { (lr * hyper.weight_decay) as f32 } else { 0.0 };
        let grad = tensor
            .grad
            .take()
            .ok_or_else(|| TrainError::MissingGrad(full_name.clone()))?;
        let entry = optim.entry(&full_name, grad.len());
        let data = tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            entry.1[i] = b1f * entry.1[i] + (1.0 - b1f) * g;
            entry.2[i] = b2f * entry.2[i] + (1.0 - b2f) * g * g;
            let mhat = entry.1[i] * inv_bc1;
            let vhat = entry.2[i] * inv_bc2;
            data[i] -= lr_f * (mhat / (vhat.sqrt() + eps_f)) + wd * data[i];
        }
    }
    Ok(())
}

/// Single-store AdamW step (advances the counter, then applies).
pub fn adamw_step(
    store: &mut ParamStore<f32>,
    optim: &mut OptimState,
    freeze: &FreezeSet,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    optim.step += 1;
    adamw_apply(store, "", optim, freeze, lr, hyper)
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [&mut [f32]], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g.iter() {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One line of `metrics.jsonl`. `loss_mean` and `grad_norm_preclip` are null
/// for skipped (all-masked) steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss_mean: Option<f64>,
    pub masked_in_tokens: usize,
    pub grad_norm_preclip: Option<f64>,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_completed: usize,
    pub skipped_batches: usize,
    /// Mean of the last (up to) 10 per-step losses.
    pub final_train_loss: f64,
    pub checkpoint_steps: Vec<usize>,
    pub loss_history: Vec<Option<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainStateFile {
    step: usize,
    skipped_batches: usize,
}

/// Optional per-interval callback with read access to the current models.
pub type EvalHook<'a> = &'a mut dyn FnMut(usize, &ModelBundle) -> Result<(), String>;

/// Trains a fresh model (and buddy + connector when fusion is configured)
/// on `docs`, writing `metrics.jsonl` and `checkpoints/step_N/` under
/// `out_dir`.
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    docs: &[Vec<u8>],
    out_dir: &Path,
    eval_hook: Option<EvalHook>,
) -> Result<TrainReport, TrainError> {
    let cfg = cfg.clone().validated()?;
    let model = model.clone().validated()?;
    let bundle = init_bundle(&model, &cfg)?;
    run_loop(bundle, OptimState::new(), 0, &model, &cfg, docs, out_dir, eval_hook)
}

/// Continues a run from `out_dir/checkpoints/step_N`, reproducing the
/// uninterrupted run's subsequent steps exactly.
pub fn resume(
    model: &ModelConfig,
    cfg: &TrainConfig,
    docs: &[Vec<u8>],
    out_dir: &Path,
    step: usize,
    eval_hook: Option<EvalHook>,
) -> Result<TrainReport, TrainError> {
    let cfg = cfg.clone().validated()?;
    let model = model.clone().validated()?;
    let ckpt_dir = out_dir.join("checkpoints").join(format!("step_{step}"));
    if !ckpt_dir.is_dir() {
        return Err(TrainError::ResumeMissing { step, dir: out_dir.join("checkpoints") });
    }
    let (bundle, optim, state) = load_train_checkpoint(&ckpt_dir, &cfg)?;
    if state.step != step {
        return Err(TrainError::Config(format!(
            "checkpoint records step {}, expected {step}",
            state.step
        )));
    }
    run_loop(bundle, optim, step, &model, &cfg, docs, out_dir, eval_hook)
}

fn init_bundle(model: &ModelConfig, cfg: &TrainConfig) -> Result<ModelBundle, TrainError> {
    let gen = init_params::<f32>(model, cfg.seed)?;
    let fusion = match &cfg.fusion {
        Some(plan) => {
            let plan = plan.clone().validated(cfg.seq_len)?;
            let buddy = init_params::<f32>(&plan.model, rng::stream_seed(cfg.seed, 1))?;
            let connector = Connector::zeros(plan.model.d_model, model.d_model);
            Some(FusionParts { buddy, connector, plan })
        }
        None => None,
    };
    Ok(ModelBundle { gen: gen.clone(), gen_config: model.clone(), fusion })
}

fn phase_of(step: usize, cfg: &TrainConfig) -> u8 {
    if step < cfg.phase1_steps {
        1
    } else {
        2
    }
}

fn freeze_for(step: usize, cfg: &TrainConfig, bundle: &ModelBundle) -> FreezeSet {
    if phase_of(step, cfg) == 1 {
        let mut names: Vec<String> =
            bundle.gen.names().map(|n| format!("gen.{n}")).collect();
        if let Some(parts) = &bundle.fusion {
            names.extend(parts.buddy.names().map(|n| format!("buddy.{n}")));
        }
        FreezeSet::from_names(names)
    } else if let Some(parts) = &bundle.fusion {
        if parts.plan.freeze_buddy {
            return FreezeSet::from_names(parts.buddy.names().map(|n| format!("buddy.{n}")));
        }
        FreezeSet::none()
    } else {
        FreezeSet::none()
    }
}

fn set_requires_grads(bundle: &mut ModelBundle, freeze: &FreezeSet) {
    for (name, t) in bundle.gen.iter_mut() {
        t.requires_grad = !freeze.contains(&format!("gen.{name}"));
    }
    if let Some(parts) = &mut bundle.fusion {
        for (name, t) in parts.buddy.iter_mut() {
            t.requires_grad = !freeze.contains(&format!("buddy.{name}"));
        }
        parts.connector.weight.requires_grad = !freeze.contains("connector.weight");
        parts.connector.bias.requires_grad = !freeze.contains("connector.bias");
    }
}

/// Deterministic row sampler: global draw `step·batch_size + i` maps into a
/// per-epoch seeded permutation, so the batch for any step is a pure
/// function of (seed, step).
struct BatchSampler {
    seed: u64,
    n_rows: usize,
    cached_epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    fn new(seed: u64, n_rows: usize) -> Self {
        BatchSampler { seed, n_rows, cached_epoch: None }
    }

    fn rows_for_step(&mut self, step: usize, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|i| {
                let global = step * batch_size + i;
                let (epoch, pos) = (global / self.n_rows, global % self.n_rows);
                match &self.cached_epoch {
                    Some((e, perm)) if *e == epoch => perm[pos],
                    _ => {
                        let perm = rng::permutation(rng::stream_seed(self.seed, epoch as u64), self.n_rows);
                        let row = perm[pos];
                        self.cached_epoch = Some((epoch, perm));
                        row
                    }
                }
            })
            .collect()
    }
}

struct StepOutcome {
    loss_mean: f64,
    masked_in: usize,
    grad_norm: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    mut bundle: ModelBundle,
    mut optim: OptimState,
    start_step: usize,
    model: &ModelConfig,
    cfg: &TrainConfig,
    docs: &[Vec<u8>],
    out_dir: &Path,
    mut eval_hook: Option<EvalHook>,
) -> Result<TrainReport, TrainError> {
    if bundle.gen_config != *model {
        return Err(TrainError::Config(
            "checkpoint model config does not match the run config".into(),
        ));
    }
    if docs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let packed = pack_documents(docs, cfg.seq_len)?;
    if packed.rows() == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join("metrics.jsonl"))?,
    );

    let mut sampler = BatchSampler::new(cfg.seed, packed.rows());
    let mut skipped_batches = 0usize;
    let mut loss_history: Vec<Option<f64>> = Vec::with_capacity(cfg.total_steps - start_step);
    let mut checkpoint_steps = Vec::new();
    let hyper = AdamHyper::from(cfg);

    for step in start_step..cfg.total_steps {
        let started = Instant::now();
        let phase = phase_of(step, cfg);
        let freeze = freeze_for(step, cfg, &bundle);
        set_requires_grads(&mut bundle, &freeze);

        let rows = sampler.rows_for_step(step, cfg.batch_size);
        let batch = packed.select_rows(&rows);
        let lr = lr_at(step, cfg) * if phase == 1 { cfg.phase1_lr_scale } else { 1.0 };

        let outcome = match run_step(&mut bundle, &batch, cfg, &freeze, &mut optim, lr, &hyper) {
            Ok(outcome) => Some(outcome),
            Err(TrainError::Tensor(TensorError::AllMasked)) => None,
            Err(err) if err.is_non_finite() => {
                let diagnostic = out_dir.join("checkpoints").join(format!("diagnostic_step_{step}"));
                save_train_checkpoint(&diagnostic, &bundle, &optim, step, skipped_batches)?;
                return Err(TrainError::NonFinite { step, message: err.to_string(), diagnostic });
            }
            Err(other) => return Err(other),
        };

        let line = match &outcome {
            Some(o) => MetricsLine {
                step,
                phase,
                lr,
                loss_mean: Some(o.loss_mean),
                masked_in_tokens: o.masked_in,
                grad_norm_preclip: Some(o.grad_norm),
                wallclock_ms: started.elapsed().as_millis() as u64,
            },
            None => {
                skipped_batches += 1;
                MetricsLine {
                    step,
                    phase,
                    lr,
                    loss_mean: None,
                    masked_in_tokens: 0,
                    grad_norm_preclip: None,
                    wallclock_ms: started.elapsed().as_millis() as u64,
                }
            }
        };
        serde_json::to_writer(&mut metrics, &line).map_err(std::io::Error::other)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        loss_history.push(outcome.as_ref().map(|o| o.loss_mean));

        let completed = step + 1;
        if (cfg.checkpoint_every > 0 && completed % cfg.checkpoint_every == 0)
            || completed == cfg.total_steps
        {
            let dir = out_dir.join("checkpoints").join(format!("step_{completed}"));
            save_train_checkpoint(&dir, &bundle, &optim, completed, skipped_batches)?;
            checkpoint_steps.push(completed);
        }
        if cfg.eval_every > 0 && completed % cfg.eval_every == 0 {
            if let Some(hook) = eval_hook.as_mut() {
                hook(completed, &bundle).map_err(TrainError::Hook)?;
            }
        }
    }

    let recent: Vec<f64> = loss_history.iter().rev().filter_map(|l| *l).take(10).collect();
    let final_train_loss = if recent.is_empty() {
        f64::NAN
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    Ok(TrainReport {
        steps_completed: cfg.total_steps - start_step,
        skipped_batches,
        final_train_loss,
        checkpoint_steps,
        loss_history,
    })
}

fn run_step(
    bundle: &mut ModelBundle,
    batch: &PackedBatch,
    cfg: &TrainConfig,
    freeze: &FreezeSet,
    optim: &mut OptimState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<StepOutcome, TrainError> {
    let loss_mask = compute_loss_mask(batch, &cfg.readq)?;

    let mut tape = Tape::<f32>::new();
    let gen_nodes = lift_params(&mut tape, &bundle.gen)?;
    let fused_nodes = match &bundle.fusion {
        Some(parts) => Some((
            lift_params(&mut tape, &parts.buddy)?,
            lift_connector(&mut tape, &parts.connector)?,
        )),
        None => None,
    };

    let out = match (&bundle.fusion, &fused_nodes) {
        (Some(parts), Some((buddy_nodes, conn_nodes))) => fuse_forward_on_tape(
            &mut tape,
            &gen_nodes,
            &bundle.gen_config,
            buddy_nodes,
            conn_nodes,
            &parts.plan,
            &batch.tokens,
            0,
        )?,
        _ => forward_on_tape(
            &mut tape,
            &gen_nodes,
            &bundle.gen_config,
            &batch.tokens,
            None,
            Attn::Causal,
        )?,
    };

    let (loss_sum, count) =
        tape.cross_entropy_masked(out.logits, &batch.targets.data, &loss_mask.mask)?;
    let loss_mean = tape.scale(loss_sum, 1.0 / count as f32)?;
    let loss_value = tape.scalar_value(loss_mean) as f64;
    tape.backward(loss_mean)?;

    // Pull gradients back into the owning tensors. A requires-grad tensor
    // with no tape path to the loss (the buddy's blocks past the tap point,
    // its final LN and head) has a true gradient of zero.
    for (name, tensor) in bundle.gen.iter_mut() {
        if tensor.requires_grad {
            let n = tensor.numel();
            tensor.grad = Some(tape.take_grad(gen_nodes.node(name)?).unwrap_or_else(|| vec![0.0; n]));
        }
    }
    if let (Some(parts), Some((buddy_nodes, conn_nodes))) = (&mut bundle.fusion, &fused_nodes) {
        for (name, tensor) in parts.buddy.iter_mut() {
            if tensor.requires_grad {
                let n = tensor.numel();
                tensor.grad =
                    Some(tape.take_grad(buddy_nodes.node(name)?).unwrap_or_else(|| vec![0.0; n]));
            }
        }
        if parts.connector.weight.requires_grad {
            parts.connector.weight.grad = Some(
                tape.take_grad(conn_nodes.weight)
                    .ok_or_else(|| TrainError::MissingGrad("connector.weight".into()))?,
            );
            parts.connector.bias.grad = Some(
                tape.take_grad(conn_nodes.bias)
                    .ok_or_else(|| TrainError::MissingGrad("connector.bias".into()))?,
            );
        }
    }
    drop(tape);

    // Global clip over every unfrozen gradient, in a fixed group order.
    let mut grad_refs: Vec<&mut [f32]> = Vec::new();
    for (_, tensor) in bundle.gen.iter_mut() {
        if let Some(g) = tensor.grad.as_mut() {
            grad_refs.push(g);
        }
    }
    if let Some(parts) = &mut bundle.fusion {
        for (_, tensor) in parts.buddy.iter_mut() {
            if let Some(g) = tensor.grad.as_mut() {
                grad_refs.push(g);
            }
        }
        if let Some(g) = parts.connector.weight.grad.as_mut() {
            grad_refs.push(g);
        }
        if let Some(g) = parts.connector.bias.grad.as_mut() {
            grad_refs.push(g);
        }
    }
    let grad_norm = clip_grad_norm(&mut grad_refs, cfg.grad_clip_norm);

    optim.step += 1;
    adamw_apply(&mut bundle.gen, "gen", optim, freeze, lr, hyper)?;
    if let Some(parts) = &mut bundle.fusion {
        adamw_apply(&mut parts.buddy, "buddy", optim, freeze, lr, hyper)?;
        let mut conn_store = parts.connector.to_store();
        conn_store.get_mut("connector.weight")?.grad = parts.connector.weight.grad.take();
        conn_store.get_mut("connector.bias")?.grad = parts.connector.bias.grad.take();
        conn_store.get_mut("connector.weight")?.requires_grad = parts.connector.weight.requires_grad;
        conn_store.get_mut("connector.bias")?.requires_grad = parts.connector.bias.requires_grad;
        adamw_apply(&mut conn_store, "", optim, freeze, lr, hyper)?;
        parts.connector = Connector::from_store(&conn_store)?;
    }

    Ok(StepOutcome { loss_mean: loss_value, masked_in: count, grad_norm })
}

const GEN_DIR: &str = "generator";
const BUDDY_DIR: &str = "buddy";
const CONNECTOR_DIR: &str = "connector";
const OPTIM_DIR: &str = "optim";
const STATE_FILE: &str = "train_state.json";

pub fn save_train_checkpoint(
    dir: &Path,
    bundle: &ModelBundle,
    optim: &OptimState,
    step: usize,
    skipped_batches: usize,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save_checkpoint(&dir.join(GEN_DIR), &bundle.gen, &bundle.gen_config)?;
    if let Some(parts) = &bundle.fusion {
        checkpoint::save_checkpoint(&dir.join(BUDDY_DIR), &parts.buddy, &parts.plan.model)?;
        checkpoint::save_store(
            &dir.join(CONNECTOR_DIR),
            &parts.connector.to_store(),
            &serde_json::json!({
                "d_b": parts.connector.d_b(),
                "d_g": parts.connector.d_g(),
            }),
        )?;
    }
    checkpoint::save_store(
        &dir.join(OPTIM_DIR),
        &optim.to_store(),
        &serde_json::json!({ "step": optim.step }),
    )?;
    let state = TrainStateFile { step, skipped_batches };
    std::fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&state).map_err(std::io::Error::other)?)?;
    Ok(())
}

fn load_train_checkpoint(
    dir: &Path,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, OptimState, TrainStateFile), TrainError> {
    let (gen, gen_config) = checkpoint::load_checkpoint(&dir.join(GEN_DIR))?;
    let fusion = match &cfg.fusion {
        Some(plan) => {
            let plan = plan.clone().validated(cfg.seq_len)?;
            let (buddy, _) = checkpoint::load_checkpoint(&dir.join(BUDDY_DIR))?;
            let (conn_store, _) = checkpoint::load_store(&dir.join(CONNECTOR_DIR))?;
            Some(FusionParts {
                buddy,
                connector: Connector::from_store(&conn_store)?,
                plan,
            })
        }
        None => None,
    };
    let (optim_store, optim_cfg) = checkpoint::load_store(&dir.join(OPTIM_DIR))?;
    let optim_step = optim_cfg
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or(CheckpointError::Field("step"))? as usize;
    let optim = OptimState::from_store(&optim_store, optim_step);
    let state: TrainStateFile =
        serde_json::from_str(&std::fs::read_to_string(dir.join(STATE_FILE))?)
            .map_err(|_| CheckpointError::Field("train_state"))?;
    Ok((ModelBundle { gen, gen_config, fusion }, optim, state))
}

/// Loads the model bundle (without optimizer state) from a training
/// checkpoint directory, for evaluation and generation.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle, TrainError> {
    let (gen, gen_config) = checkpoint::load_checkpoint(&dir.join(GEN_DIR))?;
    let buddy_dir = dir.join(BUDDY_DIR);
    let fusion = if buddy_dir.is_dir() {
        let (buddy, buddy_config) = checkpoint::load_checkpoint(&buddy_dir)?;
        let (conn_store, _) = checkpoint::load_store(&dir.join(CONNECTOR_DIR))?;
        // The stored buddy config reconstructs the plan's model; window and
        // friends live in the run's resolved config, which the caller can
        // override via `with_plan`.
        Some(FusionParts {
            buddy,
            connector: Connector::from_store(&conn_store)?,
            plan: FusionPlan {
                model: buddy_config,
                window: None,
                visibility: Visibility::Causal,
                tap_norm: crate::fusion::TapNorm::None,
                freeze_buddy: false,
            },
        })
    } else {
        None
    };
    Ok(ModelBundle { gen, gen_config, fusion })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_kv_corpus;

    fn small_model() -> ModelConfig {
        ModelConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 32,
            ln_eps: 1e-5,
            init_std: 0.02,
        }
    }

    fn small_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            batch_size: 4,
            seq_len: 32,
            peak_lr: 1e-3,
            warmup_steps: 2,
            min_lr_frac: 0.1,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 7,
            phase1_steps: 0,
            phase1_lr_scale: 1.0,
            readq: ReadQConfig::disabled(),
            fusion: None,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let mut cfg = small_cfg(1000);
        cfg.warmup_steps = 100;
        cfg.peak_lr = 3e-3;
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100, &cfg), 3e-3);
        // Cosine midpoint: (warmup + total) / 2.
        let mid = lr_at(550, &cfg);
        let expected = 3e-3 * (1.0 + 0.1) / 2.0;
        assert!((mid - expected).abs() < 1e-9, "{mid} vs {expected}");
        assert!((lr_at(1000, &cfg) - 3e-4).abs() < 1e-12);
        // Monotone rise then fall.
        assert!(lr_at(50, &cfg) < lr_at(100, &cfg));
        assert!(lr_at(600, &cfg) < lr_at(200, &cfg));
    }

    #[test]
    fn adamw_hand_computed_single_step() {
        let mut store = ParamStore::new();
        let mut w = Tensor::new(vec![1], vec![1.0f32]).unwrap().with_grad();
        w.grad = Some(vec![1.0]);
        store.insert("w", w).unwrap();
        let mut optim = OptimState::new();
        let hyper = AdamHyper { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 };
        adamw_step(&mut store, &mut optim, &FreezeSet::none(), 0.1, &hyper).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w - 0.9).abs() < 1e-6, "got {w}");
    }

    #[test]
    fn adamw_freeze_and_zero_grads() {
        let hyper = AdamHyper { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 };

        // Frozen parameter stays bitwise identical over 100 steps.
        let mut store = ParamStore::new();
        store
            .insert("frozen", Tensor::new(vec![2], vec![0.25f32, -0.75]).unwrap())
            .unwrap();
        let mut optim = OptimState::new();
        let freeze = FreezeSet::from_names(["frozen".to_string()]);
        for _ in 0..100 {
            adamw_step(&mut store, &mut optim, &freeze, 0.1, &hyper).unwrap();
        }
        assert_eq!(store.get("frozen").unwrap().data(), &[0.25, -0.75]);
        assert!(optim.moment("frozen").is_none(), "no moments allocated for frozen");

        // Zero gradients with wd = 0 leave parameters unchanged.
        let mut store = ParamStore::new();
        let mut w = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap().with_grad();
        w.grad = Some(vec![0.0; 3]);
        store.insert("w", w).unwrap();
        let mut optim = OptimState::new();
        adamw_step(&mut store, &mut optim, &FreezeSet::none(), 0.1, &hyper).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[1.0, 2.0, 3.0]);

        // Missing grad on an unfrozen param is a contract error.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0f32]).unwrap().with_grad()).unwrap();
        let mut optim = OptimState::new();
        assert!(matches!(
            adamw_step(&mut store, &mut optim, &FreezeSet::none(), 0.1, &hyper),
            Err(TrainError::MissingGrad(_))
        ));
    }

    #[test]
    fn clip_grad_norm_cases() {
        // Already small: untouched.
        let mut g1 = vec![0.1f32, 0.2];
        let norm = clip_grad_norm(&mut [&mut g1], 1.0);
        assert!((norm - (0.05f64).sqrt()).abs() < 1e-7);
        assert_eq!(g1, vec![0.1, 0.2]);

        // 3-4-5 triangle scaled to unit norm.
        let mut g2 = vec![3.0f32, 4.0];
        let pre = clip_grad_norm(&mut [&mut g2], 1.0);
        assert!((pre - 5.0).abs() < 1e-9);
        assert!((g2[0] - 0.6).abs() < 1e-7 && (g2[1] - 0.8).abs() < 1e-7);

        // Post-clip norm equals min(pre, max).
        let mut g3 = vec![1.0f32, -2.0, 2.0];
        let pre = clip_grad_norm(&mut [&mut g3], 2.0);
        let post: f64 = g3.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        assert!((post - pre.min(2.0)).abs() < 1e-6);
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let (docs, _) = synth_kv_corpus(1, 60, 2, 2, 2).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = small_cfg(6);
        let report_a = train(&small_model(), &cfg, &docs, dir_a.path(), None).unwrap();
        let report_b = train(&small_model(), &cfg, &docs, dir_b.path(), None).unwrap();
        assert_eq!(report_a.loss_history, report_b.loss_history);
        assert_eq!(report_a.steps_completed, 6);
        assert!(report_a.final_train_loss.is_finite());

        // metrics.jsonl has one line per step with the documented fields.
        let metrics = std::fs::read_to_string(dir_a.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<MetricsLine> = metrics
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 6);
        assert!(lines.iter().all(|l| l.loss_mean.is_some()));
        assert_eq!(lines[3].step, 3);

        // Final checkpoint exists even with checkpoint_every = 0.
        assert!(dir_a.path().join("checkpoints/step_6/generator/manifest.json").is_file());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (docs, _) = synth_kv_corpus(2, 60, 2, 2, 2).unwrap();
        let full_dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(8);
        cfg.checkpoint_every = 4;
        let full = train(&small_model(), &cfg, &docs, full_dir.path(), None).unwrap();

        let resumed = resume(&small_model(), &cfg, &docs, full_dir.path(), 4, None).unwrap();
        assert_eq!(resumed.steps_completed, 4);
        assert_eq!(&full.loss_history[4..], &resumed.loss_history[..]);

        // Resumed weights equal the uninterrupted final weights bitwise.
        let a = load_bundle(&full_dir.path().join("checkpoints/step_8")).unwrap();
        let b = load_bundle(&full_dir.path().join("checkpoints/step_8")).unwrap();
        for ((_, x), (_, y)) in a.gen.iter().zip(b.gen.iter()) {
            assert_eq!(x.data(), y.data());
        }

        assert!(matches!(
            resume(&small_model(), &cfg, &docs, full_dir.path(), 3, None),
            Err(TrainError::ResumeMissing { step: 3, .. })
        ));
    }

    #[test]
    fn phase1_freezes_everything_but_connector() {
        let (docs, _) = synth_kv_corpus(3, 60, 2, 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(6);
        cfg.phase1_steps = 4;
        cfg.checkpoint_every = 4;
        cfg.fusion = Some(FusionPlan {
            model: ModelConfig {
                vocab_size: crate::data::VOCAB_SIZE,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                max_seq: 32,
                ln_eps: 1e-5,
                init_std: 0.02,
            },
            window: Some(4),
            visibility: Visibility::Causal,
            tap_norm: crate::fusion::TapNorm::None,
            freeze_buddy: false,
        });

        train(&small_model(), &cfg, &docs, dir.path(), None).unwrap();

        // After phase 1 (step 4 checkpoint) every non-connector parameter is
        // bitwise the initialization; the connector is not.
        let init = init_bundle(&small_model(), &cfg).unwrap();
        let at4 = load_bundle(&dir.path().join("checkpoints/step_4")).unwrap();
        for ((_, a), (_, b)) in init.gen.iter().zip(at4.gen.iter()) {
            assert_eq!(a.data(), b.data(), "generator must be untouched in phase 1");
        }
        let (init_f, at4_f) = (init.fusion.unwrap(), at4.fusion.unwrap());
        for ((_, a), (_, b)) in init_f.buddy.iter().zip(at4_f.buddy.iter()) {
            assert_eq!(a.data(), b.data(), "buddy must be untouched in phase 1");
        }
        assert_ne!(
            init_f.connector.weight.data(),
            at4_f.connector.weight.data(),
            "connector must train in phase 1"
        );

        // After phase 2 steps, generator and buddy have moved too.
        let at6 = load_bundle(&dir.path().join("checkpoints/step_6")).unwrap();
        assert_ne!(
            at4.gen.get("lm_head").unwrap().data(),
            at6.gen.get("lm_head").unwrap().data()
        );
        let at6_f = at6.fusion.unwrap();
        assert_ne!(
            at4_f.buddy.get("lm_head").unwrap().data(),
            at6_f.buddy.get("lm_head").unwrap().data()
        );
    }

    #[test]
    fn phase1_requires_fusion() {
        let mut cfg = small_cfg(4);
        cfg.phase1_steps = 2;
        assert!(matches!(cfg.validated(), Err(TrainError::Config(_))));
    }

    #[test]
    fn corrupting_masked_out_targets_leaves_update_bitwise_unchanged() {
        let (docs, _) = synth_kv_corpus(5, 40, 2, 2, 2).unwrap();
        let model = small_model();
        let mut cfg = small_cfg(1);
        cfg.readq = ReadQConfig::with_k(4);

        let packed = pack_documents(&docs, cfg.seq_len).unwrap();
        let rows: Vec<usize> = (0..cfg.batch_size).collect();
        let batch = packed.select_rows(&rows);
        let mask = compute_loss_mask(&batch, &cfg.readq).unwrap();

        let mut corrupted = batch.clone();
        for (i, &m) in mask.mask.iter().enumerate() {
            if !m {
                // Garbage values, including ids beyond the vocabulary.
                corrupted.targets.data[i] = 1_000_000 + i as u32;
            }
        }

        let hyper = AdamHyper::from(&cfg);
        let run = |b: &PackedBatch| -> ModelBundle {
            let mut bundle = init_bundle(&model, &cfg).unwrap();
            let freeze = freeze_for(0, &cfg, &bundle);
            set_requires_grads(&mut bundle, &freeze);
            let mut optim = OptimState::new();
            run_step(&mut bundle, b, &cfg, &freeze, &mut optim, 1e-3, &hyper).unwrap();
            bundle
        };
        let clean_bundle = run(&batch);
        let dirty_bundle = run(&corrupted);
        for ((name, a), (_, b)) in clean_bundle.gen.iter().zip(dirty_bundle.gen.iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "param {name} diverged");
            }
        }
    }

    #[test]
    fn metrics_record_exactly_one_phase_transition() {
        let (docs, _) = synth_kv_corpus(4, 60, 2, 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(8);
        cfg.phase1_steps = 3;
        cfg.fusion = Some(FusionPlan {
            model: ModelConfig {
                vocab_size: crate::data::VOCAB_SIZE,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                max_seq: 32,
                ln_eps: 1e-5,
                init_std: 0.02,
            },
            window: None,
            visibility: Visibility::Causal,
            tap_norm: crate::fusion::TapNorm::None,
            freeze_buddy: false,
        });
        train(&small_model(), &cfg, &docs, dir.path(), None).unwrap();
        let phases: Vec<u8> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<MetricsLine>(l).unwrap().phase)
            .collect();
        assert_eq!(phases, vec![1, 1, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn freeze_buddy_keeps_buddy_at_init_through_phase_2() {
        let (docs, _) = synth_kv_corpus(6, 60, 2, 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(6);
        cfg.phase1_steps = 2;
        cfg.checkpoint_every = 0;
        cfg.fusion = Some(FusionPlan {
            model: ModelConfig {
                vocab_size: crate::data::VOCAB_SIZE,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                max_seq: 32,
                ln_eps: 1e-5,
                init_std: 0.02,
            },
            window: Some(2),
            visibility: Visibility::Causal,
            tap_norm: crate::fusion::TapNorm::None,
            freeze_buddy: true,
        });
        train(&small_model(), &cfg, &docs, dir.path(), None).unwrap();
        let init = init_bundle(&small_model(), &cfg).unwrap();
        let end = load_bundle(&dir.path().join("checkpoints/step_6")).unwrap();
        let (init_f, end_f) = (init.fusion.unwrap(), end.fusion.unwrap());
        for ((name, a), (_, b)) in init_f.buddy.iter().zip(end_f.buddy.iter()) {
            assert_eq!(a.data(), b.data(), "frozen buddy param {name} moved");
        }
        // Generator and connector still trained.
        assert_ne!(
            init.gen.get("lm_head").unwrap().data(),
            end.gen.get("lm_head").unwrap().data()
        );
        assert_ne!(init_f.connector.weight.data(), end_f.connector.weight.data());
    }

    #[test]
    fn all_masked_batches_are_skipped_and_counted() {
        // Six-byte docs tile 8-token rows exactly ([BOS, 6 bytes, EOS]);
        // k = 7 covers every prediction, so each batch is fully masked.
        let docs: Vec<Vec<u8>> = (0..12).map(|i| vec![b'a' + (i % 26) as u8; 6]).collect();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(3);
        cfg.seq_len = 8;
        cfg.batch_size = 2;
        cfg.readq = ReadQConfig::with_k(7);
        let report = train(&small_model(), &cfg, &docs, dir.path(), None).unwrap();
        assert_eq!(report.skipped_batches, 3);
        assert!(report.loss_history.iter().all(|l| l.is_none()));
        let lines: Vec<MetricsLine> = std::fs::read_to_string(dir.path().join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(lines.iter().all(|l| l.loss_mean.is_none() && l.masked_in_tokens == 0));
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
        let (docs, _) = synth_kv_corpus(8, 40, 2, 2, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(10);
        // Decay factor lr·wd > 2 makes matrix weights grow without bound.
        cfg.peak_lr = 1e20;
        cfg.warmup_steps = 0;
        cfg.grad_clip_norm = 1e30;
        let err = train(&small_model(), &cfg, &docs, dir.path(), None).unwrap_err();
        match err {
            TrainError::NonFinite { step, diagnostic, .. } => {
                assert!(diagnostic.is_dir(), "diagnostic checkpoint missing");
                assert!(diagnostic.join("generator/manifest.json").is_file());
                assert!(step < 10);
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn optim_state_round_trips_through_store() {
        let mut store = ParamStore::new();
        let mut w = Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap().with_grad();
        w.grad = Some(vec![0.5, -0.25]);
        store.insert("w", w).unwrap();
        let mut optim = OptimState::new();
        let hyper = AdamHyper { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.0 };
        adamw_step(&mut store, &mut optim, &FreezeSet::none(), 0.1, &hyper).unwrap();

        let snapshot = optim.to_store();
        let restored = OptimState::from_store(&snapshot, optim.step);
        assert_eq!(restored.step, 1);
        let (m0, v0) = optim.moment("w").unwrap();
        let (m1, v1) = restored.moment("w").unwrap();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
    }
}
