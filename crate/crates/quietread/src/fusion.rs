//! Reading-buddy fusion path: an auxiliary encoder reads the same tokens, its
//! penultimate-layer residual stream is optionally pooled over a trailing
//! sliding window, projected by an affine connector into the generator's
//! embedding width, and added onto the generator's input embeddings.
//!
//! The connector starts at exactly zero, so an untrained fusion model is
//! bitwise the baseline generator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    forward_on_tape, lift_params, Attn, ForwardOutput, ModelConfig, ModelError, ParamStore,
    TapedForward, TapedParams,
};
use crate::tensor::{IntMatrix, NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("buddy must have ≥ 2 layers for a second-last-layer tap, got {0}")]
    BuddyTooShallow(usize),
    #[error("sliding window {window} exceeds sequence length {seq_len}")]
    WindowTooWide { window: usize, seq_len: usize },
    #[error("connector shape {got:?} does not map buddy width {d_b} to generator width {d_g}")]
    ConnectorShape {
        got: Vec<usize>,
        d_b: usize,
        d_g: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the buddy reads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    /// Standard causal attention; the only mode valid for training on
    /// packed next-token data.
    #[default]
    Causal,
    /// Bidirectional over a designated prompt region, causal beyond it; for
    /// inference-style experiments.
    PrefixBidirectional,
}

/// Normalization applied to the tapped hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapNorm {
    #[default]
    None,
    /// Run the buddy's own final layer norm over the tap.
    FinalLnCopy,
}

/// Everything configurable about the read path: the buddy model, the
/// optional trailing-window width, visibility, and tap normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPlan {
    pub model: ModelConfig,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub visibility: Visibility,
    #[serde(default)]
    pub tap_norm: TapNorm,
    /// Keep buddy parameters frozen in phase 2.
    #[serde(default)]
    pub freeze_buddy: bool,
}

impl FusionPlan {
    pub fn validated(mut self, seq_len: usize) -> Result<Self, FusionError> {
        self.model = self.model.validated()?;
        if self.model.n_layers < 2 {
            return Err(FusionError::BuddyTooShallow(self.model.n_layers));
        }
        if let Some(w) = self.window {
            if w == 0 || w > seq_len {
                return Err(FusionError::WindowTooWide { window: w, seq_len });
            }
        }
        Ok(self)
    }
}

/// Affine projection from buddy width to generator width.
#[derive(Debug, Clone)]
pub struct Connector<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Connector<T> {
    /// Zero initialization: at step 0 the fused model is exactly the
    /// baseline generator.
    pub fn zeros(d_b: usize, d_g: usize) -> Self {
        Connector {
            weight: Tensor::zeros(vec![d_b, d_g]),
            bias: Tensor::zeros(vec![d_g]),
        }
    }

    pub fn with_grads(mut self) -> Self {
        self.weight.requires_grad = true;
        self.bias.requires_grad = true;
        self
    }

    pub fn d_b(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_g(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn check_dims(&self, d_b: usize, d_g: usize) -> Result<(), FusionError> {
        if self.weight.shape() != [d_b, d_g] || self.bias.shape() != [d_g] {
            return Err(FusionError::ConnectorShape {
                got: self.weight.shape().to_vec(),
                d_b,
                d_g,
            });
        }
        Ok(())
    }

    pub fn to_store(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        store.insert("connector.weight", self.weight.clone()).expect("fresh store");
        store.insert("connector.bias", self.bias.clone()).expect("fresh store");
        store
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self, ModelError> {
        Ok(Connector {
            weight: store.get("connector.weight")?.clone(),
            bias: store.get("connector.bias")?.clone(),
        })
    }
}

/// Connector weight and bias lifted onto a tape.
pub struct TapedConnector {
    pub weight: NodeId,
    pub bias: NodeId,
}

pub fn lift_connector<T: Scalar>(
    tape: &mut Tape<T>,
    connector: &Connector<T>,
) -> Result<TapedConnector, FusionError> {
    Ok(TapedConnector {
        weight: tape.leaf(&connector.weight)?,
        bias: tape.leaf(&connector.bias)?,
    })
}

/// Buddy forward to the penultimate layer: the residual stream after block
/// `n_layers − 1`, before the final block and before the final layer norm.
/// Returns a `[B·S, d_b]` node.
pub fn buddy_encode_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    buddy: &TapedParams,
    plan: &FusionPlan,
    tokens: &IntMatrix,
    prefix_len: usize,
) -> Result<NodeId, FusionError> {
    if plan.model.n_layers < 2 {
        return Err(FusionError::BuddyTooShallow(plan.model.n_layers));
    }
    let attn = match plan.visibility {
        Visibility::Causal => Attn::Causal,
        Visibility::PrefixBidirectional => Attn::Prefix(prefix_len),
    };
    let out = forward_on_tape(tape, buddy, &plan.model, tokens, None, attn)?;
    let tap = out.layer_hiddens[plan.model.n_layers - 2];
    let tap = match plan.tap_norm {
        TapNorm::None => tap,
        TapNorm::FinalLnCopy => tape.layernorm(
            tap,
            buddy.node("final_ln.gamma")?,
            buddy.node("final_ln.beta")?,
            T::from_f64(plan.model.ln_eps),
        )?,
    };
    Ok(tap)
}

/// Value-level buddy tap: `[B, S, d_b]`.
pub fn buddy_encode<T: Scalar>(
    buddy_params: &ParamStore<T>,
    plan: &FusionPlan,
    tokens: &IntMatrix,
) -> Result<Tensor<T>, FusionError> {
    let mut tape = Tape::new();
    let taped = lift_params(&mut tape, buddy_params)?;
    let tap = buddy_encode_on_tape(&mut tape, &taped, plan, tokens, 0)?;
    Ok(Tensor::new(
        vec![tokens.rows, tokens.cols, plan.model.d_model],
        tape.value(tap).to_vec(),
    )?)
}

/// Trailing mean over the last `window` positions, inclusive; `window = 1`
/// is the bitwise identity.
pub fn sliding_pool<T: Scalar>(h: &Tensor<T>, window: usize) -> Result<Tensor<T>, FusionError> {
    let shape = h.shape().to_vec();
    if shape.len() != 3 {
        return Err(FusionError::Tensor(TensorError::BadShape {
            op: "sliding_pool",
            expected: "[B,S,d]".into(),
            got: shape,
        }));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let mut tape = Tape::new();
    let node = tape.constant(vec![b * s, d], h.data().to_vec())?;
    let pooled = tape.mean_pool_trailing(node, b, s, window)?;
    Ok(Tensor::new(vec![b, s, d], tape.value(pooled).to_vec())?)
}

/// Per-position affine map `pooled · weight + bias`.
pub fn connect<T: Scalar>(c: &Connector<T>, pooled: &Tensor<T>) -> Result<Tensor<T>, FusionError> {
    let shape = pooled.shape().to_vec();
    if shape.len() != 3 || shape[2] != c.d_b() {
        return Err(FusionError::ConnectorShape {
            got: shape,
            d_b: c.d_b(),
            d_g: c.d_g(),
        });
    }
    let (b, s) = (shape[0], shape[1]);
    let mut tape = Tape::new();
    let x = tape.constant(vec![b * s, c.d_b()], pooled.data().to_vec())?;
    let w = tape.leaf(&c.weight)?;
    let bias = tape.leaf(&c.bias)?;
    let y = tape.matmul(x, w)?;
    let y = tape.add_bias(y, bias)?;
    Ok(Tensor::new(vec![b, s, c.d_g()], tape.value(y).to_vec())?)
}

/// The full read path on an existing tape:
/// `extra = connect(sliding_pool(buddy_tap))`, returned as `[B·S, d_g]`.
pub fn read_path_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    buddy: &TapedParams,
    connector: &TapedConnector,
    plan: &FusionPlan,
    tokens: &IntMatrix,
    prefix_len: usize,
) -> Result<NodeId, FusionError> {
    let tap = buddy_encode_on_tape(tape, buddy, plan, tokens, prefix_len)?;
    let pooled = match plan.window {
        Some(w) if w > 1 => tape.mean_pool_trailing(tap, tokens.rows, tokens.cols, w)?,
        _ => tap,
    };
    let projected = tape.matmul(pooled, connector.weight)?;
    Ok(tape.add_bias(projected, connector.bias)?)
}

/// Fused forward on an existing tape: generator forward with the read path
/// added onto its input embeddings. The generator itself is always causal.
#[allow(clippy::too_many_arguments)]
pub fn fuse_forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    gen: &TapedParams,
    gen_config: &ModelConfig,
    buddy: &TapedParams,
    connector: &TapedConnector,
    plan: &FusionPlan,
    tokens: &IntMatrix,
    prefix_len: usize,
) -> Result<TapedForward, FusionError> {
    let extra = read_path_on_tape(tape, buddy, connector, plan, tokens, prefix_len)?;
    Ok(forward_on_tape(tape, gen, gen_config, tokens, Some(extra), Attn::Causal)?)
}

/// Value-level fused forward.
pub fn fuse_forward<T: Scalar>(
    gen_params: &ParamStore<T>,
    gen_config: &ModelConfig,
    buddy_params: &ParamStore<T>,
    plan: &FusionPlan,
    connector: &Connector<T>,
    tokens: &IntMatrix,
) -> Result<ForwardOutput<T>, FusionError> {
    connector.check_dims(plan.model.d_model, gen_config.d_model)?;
    let mut tape = Tape::new();
    let gen = lift_params(&mut tape, gen_params)?;
    let buddy = lift_params(&mut tape, buddy_params)?;
    let taped_connector = lift_connector(&mut tape, connector)?;
    let out = fuse_forward_on_tape(
        &mut tape,
        &gen,
        gen_config,
        &buddy,
        &taped_connector,
        plan,
        tokens,
        0,
    )?;
    let (b, s) = (tokens.rows, tokens.cols);
    let logits = Tensor::new(vec![b, s, gen_config.vocab_size], tape.value(out.logits).to_vec())?;
    let layer_hiddens = out
        .layer_hiddens
        .iter()
        .map(|&h| Tensor::new(vec![b, s, gen_config.d_model], tape.value(h).to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForwardOutput { logits, layer_hiddens })
}

/// A trained (or training) model: the generator plus, when fusion is
/// enabled, the buddy, connector, and plan. This is the unit checkpoints
/// store and the evaluation harness consumes.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub gen: ParamStore<f32>,
    pub gen_config: ModelConfig,
    pub fusion: Option<FusionParts>,
}

#[derive(Debug, Clone)]
pub struct FusionParts {
    pub buddy: ParamStore<f32>,
    pub connector: Connector<f32>,
    pub plan: FusionPlan,
}

impl ModelBundle {
    /// Logits for a token batch via the configured path (fused or plain).
    pub fn logits(&self, tokens: &IntMatrix) -> Result<Tensor<f32>, FusionError> {
        self.logits_with_prefix(tokens, 0)
    }

    /// Like [`ModelBundle::logits`], with a prompt-region length for a buddy
    /// running in prefix-bidirectional visibility. The generator itself is
    /// always causal; a causal buddy ignores `prefix_len`.
    pub fn logits_with_prefix(
        &self,
        tokens: &IntMatrix,
        prefix_len: usize,
    ) -> Result<Tensor<f32>, FusionError> {
        match &self.fusion {
            Some(parts) => {
                parts
                    .connector
                    .check_dims(parts.plan.model.d_model, self.gen_config.d_model)?;
                let mut tape = Tape::new();
                let gen = lift_params(&mut tape, &self.gen)?;
                let buddy = lift_params(&mut tape, &parts.buddy)?;
                let connector = lift_connector(&mut tape, &parts.connector)?;
                let out = fuse_forward_on_tape(
                    &mut tape,
                    &gen,
                    &self.gen_config,
                    &buddy,
                    &connector,
                    &parts.plan,
                    tokens,
                    prefix_len,
                )?;
                Ok(Tensor::new(
                    vec![tokens.rows, tokens.cols, self.gen_config.vocab_size],
                    tape.value(out.logits).to_vec(),
                )?)
            }
            None => {
                Ok(crate::model::forward(&self.gen, &self.gen_config, tokens, None)?.logits)
            }
        }
    }

    pub fn max_seq(&self) -> usize {
        self.gen_config.max_seq
    }
}
