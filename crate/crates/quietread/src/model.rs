//! Decoder-only transformer used for both the generator and the buddy
//! encoder: pre-norm residual blocks, learned absolute positions, untied
//! output head, GELU MLP. The forward pass accepts an optional extra term
//! added onto the input embeddings — the single injection point the fusion
//! path uses — and captures the residual stream after every block so callers
//! can tap intermediate layers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::{IntMatrix, NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {s} exceeds max_seq {max}")]
    SequenceTooLong { s: usize, max: usize },
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("unknown parameter name {0}")]
    UnknownParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub d_ff: usize,
    pub max_seq: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_vocab() -> usize {
    crate::data::VOCAB_SIZE
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// Fills the conventional `d_ff = 4·d_model` when left at 0 and checks
    /// the dimensional invariants.
    pub fn validated(mut self) -> Result<Self, ModelError> {
        if self.d_ff == 0 {
            self.d_ff = 4 * self.d_model;
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 || self.vocab_size == 0 {
            return Err(ModelError::BadConfig("all dimensions must be ≥ 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(ModelError::BadConfig("ln_eps must be > 0".into()));
        }
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named parameter collection with a stable iteration order (the order
/// checkpoints serialize in).
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<(), ModelError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(ModelError::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Marks every tensor as a differentiation root.
    pub fn with_grads(mut self) -> Self {
        for (_, t) in self.entries.iter_mut() {
            t.requires_grad = true;
        }
        self
    }
}

/// Seed-deterministic initialization: weights ~ Normal(0, init_std²), LN
/// gamma = 1 / beta = 0, biases 0, residual-output projections (attention
/// out, MLP out) scaled by 1/sqrt(2·n_layers).
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    let cfg = config.clone().validated()?;
    let mut r = rng::seeded(seed);
    let mut store = ParamStore::new();
    let (v, d, ff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
    let resid_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();

    let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(rng::normal(&mut r) * std))
    };

    store.insert("token_embedding", normal(vec![v, d], cfg.init_std))?;
    store.insert("pos_embedding", normal(vec![cfg.max_seq, d], cfg.init_std))?;
    for l in 0..cfg.n_layers {
        store.insert(format!("layers.{l}.ln1.gamma"), ones(d))?;
        store.insert(format!("layers.{l}.ln1.beta"), Tensor::zeros(vec![d]))?;
        store.insert(format!("layers.{l}.attn.w_qkv"), normal(vec![d, 3 * d], cfg.init_std))?;
        store.insert(format!("layers.{l}.attn.b_qkv"), Tensor::zeros(vec![3 * d]))?;
        store.insert(
            format!("layers.{l}.attn.w_out"),
            normal(vec![d, d], cfg.init_std * resid_scale),
        )?;
        store.insert(format!("layers.{l}.attn.b_out"), Tensor::zeros(vec![d]))?;
        store.insert(format!("layers.{l}.ln2.gamma"), ones(d))?;
        store.insert(format!("layers.{l}.ln2.beta"), Tensor::zeros(vec![d]))?;
        store.insert(format!("layers.{l}.mlp.w_in"), normal(vec![d, ff], cfg.init_std))?;
        store.insert(format!("layers.{l}.mlp.b_in"), Tensor::zeros(vec![ff]))?;
        store.insert(
            format!("layers.{l}.mlp.w_out"),
            normal(vec![ff, d], cfg.init_std * resid_scale),
        )?;
        store.insert(format!("layers.{l}.mlp.b_out"), Tensor::zeros(vec![d]))?;
    }
    store.insert("final_ln.gamma", ones(d))?;
    store.insert("final_ln.beta", Tensor::zeros(vec![d]))?;
    store.insert("lm_head", normal(vec![d, v], cfg.init_std))?;
    Ok(store)
}

fn ones<T: Scalar>(d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![d], |_| T::ONE)
}

/// How attention rows see columns during forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attn {
    Causal,
    /// Rows inside the prefix see the whole prefix; rows beyond it are causal.
    Prefix(usize),
}

/// Parameter names resolved to tape nodes for one forward pass.
pub struct TapedParams {
    ids: HashMap<String, NodeId>,
}

impl TapedParams {
    pub fn node(&self, name: &str) -> Result<NodeId, ModelError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }
}

/// Copies every parameter onto the tape, preserving requires_grad flags.
pub fn lift_params<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<TapedParams, ModelError> {
    let mut ids = HashMap::new();
    for (name, tensor) in store.iter() {
        ids.insert(name.to_string(), tape.leaf(tensor)?);
    }
    Ok(TapedParams { ids })
}

/// Node handles produced by [`forward_on_tape`].
pub struct TapedForward {
    /// `[B, S, V]`
    pub logits: NodeId,
    /// Residual stream after each block, `[B·S, d]`; index 0 = after block 1.
    pub layer_hiddens: Vec<NodeId>,
}

/// Plain-value forward output.
pub struct ForwardOutput<T> {
    /// `[B, S, V]`
    pub logits: Tensor<T>,
    /// Residual stream after each block, each `[B, S, d]`.
    pub layer_hiddens: Vec<Tensor<T>>,
}

/// Transformer forward pass on an existing tape.
///
/// `input = token_embedding[tokens] + pos_embedding[0..S] (+ extra_input)`,
/// then `n_layers` pre-norm blocks (`x += Attn(LN1(x)); x += MLP(LN2(x))`),
/// a final layer norm, and the untied output head.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &TapedParams,
    config: &ModelConfig,
    tokens: &IntMatrix,
    extra_input: Option<NodeId>,
    attn: Attn,
) -> Result<TapedForward, ModelError> {
    let (b, s) = (tokens.rows, tokens.cols);
    if s > config.max_seq {
        return Err(ModelError::SequenceTooLong { s, max: config.max_seq });
    }
    let (d, heads) = (config.d_model, config.n_heads);
    let dh = config.head_dim();
    let eps = T::from_f64(config.ln_eps);

    let emb = tape.embedding_gather(params.node("token_embedding")?, tokens)?;
    let mut x = tape.reshape(emb, vec![b * s, d])?;
    x = tape.add_pos(x, params.node("pos_embedding")?, b, s)?;
    if let Some(extra) = extra_input {
        if tape.shape(extra) != [b * s, d] {
            return Err(ModelError::BadConfig(format!(
                "extra_input shape {:?} does not match [{}, {}]",
                tape.shape(extra),
                b * s,
                d
            )));
        }
        x = tape.add(x, extra)?;
    }

    let mut layer_hiddens = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |suffix: &str| params.node(&format!("layers.{l}.{suffix}"));

        // Attention sublayer.
        let ln1 = tape.layernorm(x, p("ln1.gamma")?, p("ln1.beta")?, eps)?;
        let qkv = tape.matmul(ln1, p("attn.w_qkv")?)?;
        let qkv = tape.add_bias(qkv, p("attn.b_qkv")?)?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let q = tape.to_heads(q, b, s, heads, dh)?;
        let k = tape.to_heads(k, b, s, heads, dh)?;
        let v = tape.to_heads(v, b, s, heads, dh)?;
        let q = tape.scale(q, T::from_f64(1.0 / (dh as f64).sqrt()))?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.bmm(q, kt)?;
        let probs = match attn {
            Attn::Causal => tape.softmax_causal(scores)?,
            Attn::Prefix(p) => tape.softmax_prefix(scores, p.min(s))?,
        };
        let mixed = tape.bmm(probs, v)?;
        let mixed = tape.from_heads(mixed, b, s, heads, dh)?;
        let attn_out = tape.matmul(mixed, p("attn.w_out")?)?;
        let attn_out = tape.add_bias(attn_out, p("attn.b_out")?)?;
        x = tape.add(x, attn_out)?;

        // MLP sublayer.
        let ln2 = tape.layernorm(x, p("ln2.gamma")?, p("ln2.beta")?, eps)?;
        let h = tape.matmul(ln2, p("mlp.w_in")?)?;
        let h = tape.add_bias(h, p("mlp.b_in")?)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, p("mlp.w_out")?)?;
        let h = tape.add_bias(h, p("mlp.b_out")?)?;
        x = tape.add(x, h)?;

        layer_hiddens.push(x);
    }

    let x = tape.layernorm(x, params.node("final_ln.gamma")?, params.node("final_ln.beta")?, eps)?;
    let logits = tape.matmul(x, params.node("lm_head")?)?;
    let logits = tape.reshape(logits, vec![b, s, config.vocab_size])?;
    Ok(TapedForward { logits, layer_hiddens })
}

/// Value-level forward: builds a private tape, discards it, and returns the
/// logits and per-block residual states.
pub fn forward<T: Scalar>(
    params: &ParamStore<T>,
    config: &ModelConfig,
    tokens: &IntMatrix,
    extra_input: Option<&Tensor<T>>,
) -> Result<ForwardOutput<T>, ModelError> {
    let (b, s) = (tokens.rows, tokens.cols);
    let mut tape = Tape::new();
    let taped = lift_params(&mut tape, params)?;
    let extra = match extra_input {
        Some(t) => {
            let node = tape.leaf(t)?;
            Some(tape.reshape(node, vec![b * s, config.d_model])?)
        }
        None => None,
    };
    let out = forward_on_tape(&mut tape, &taped, config, tokens, extra, Attn::Causal)?;
    let logits = Tensor::new(vec![b, s, config.vocab_size], tape.value(out.logits).to_vec())?;
    let layer_hiddens = out
        .layer_hiddens
        .iter()
        .map(|&h| Tensor::new(vec![b, s, config.d_model], tape.value(h).to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ForwardOutput { logits, layer_hiddens })
}
