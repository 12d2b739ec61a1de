//! JSON run configuration: strict schema (unknown keys rejected, errors carry
//! dotted key paths), default filling, and the fully-resolved echo written
//! into every run directory so a run is self-describing and re-runnable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError};
use crate::eval::Scoring;
use crate::fusion::FusionPlan;
use crate::model::{ModelConfig, ModelError};
use crate::trainer::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config key {path}: {message}")]
    Schema { path: String, message: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("config model: {0}")]
    Model(#[from] ModelError),
    #[error("config train: {0}")]
    Train(#[from] TrainError),
    #[error("config data: {0}")]
    Data(#[from] DataError),
}

/// Synthetic corpus request, embedded in the data section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthSpec {
    Kv {
        seed: u64,
        n_docs: usize,
        n_pairs: usize,
        key_len: usize,
        val_len: usize,
    },
    Reverse {
        seed: u64,
        n_docs: usize,
        len_range: (usize, usize),
    },
}

impl SynthSpec {
    pub fn docs(&self) -> Result<Vec<Vec<u8>>, DataError> {
        match *self {
            SynthSpec::Kv { seed, n_docs, n_pairs, key_len, val_len } => {
                Ok(data::synth_kv_corpus(seed, n_docs, n_pairs, key_len, val_len)?.0)
            }
            SynthSpec::Reverse { seed, n_docs, len_range } => {
                data::synth_reverse_corpus(seed, n_docs, len_range)
            }
        }
    }

    pub fn tasks(&self) -> Result<Option<Vec<data::McTask>>, DataError> {
        match *self {
            SynthSpec::Kv { seed, n_docs, n_pairs, key_len, val_len } => {
                Ok(Some(data::synth_kv_corpus(seed, n_docs, n_pairs, key_len, val_len)?.1))
            }
            SynthSpec::Reverse { .. } => Ok(None),
        }
    }

    /// Stable identity string for eval-config comparison.
    pub fn fingerprint(&self) -> String {
        match *self {
            SynthSpec::Kv { seed, n_docs, n_pairs, key_len, val_len } => {
                format!("synth:kv:{seed}:{n_docs}:{n_pairs}:{key_len}:{val_len}")
            }
            SynthSpec::Reverse { seed, n_docs, len_range } => {
                format!("synth:reverse:{seed}:{n_docs}:{}..{}", len_range.0, len_range.1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl DataSection {
    pub fn docs(&self) -> Result<Vec<Vec<u8>>, ConfigError> {
        match (&self.corpus_path, &self.synth) {
            (Some(path), None) => Ok(data::read_corpus(path)?),
            (None, Some(spec)) => Ok(spec.docs()?),
            _ => Err(ConfigError::Invalid(
                "data requires exactly one of corpus_path or synth".into(),
            )),
        }
    }

    pub fn fingerprint(&self) -> String {
        match (&self.corpus_path, &self.synth) {
            (Some(path), _) => format!("file:{}", path.display()),
            (_, Some(spec)) => spec.fingerprint(),
            _ => "none".into(),
        }
    }
}

/// Missing/unknown-field errors surface at the parent struct; extend the
/// path with the field named in the serde message so the user sees the full
/// dotted key (`model.d_model`, not `model`).
fn dotted_path(path: &str, message: &str) -> String {
    let field = message
        .strip_prefix("missing field `")
        .or_else(|| message.strip_prefix("unknown field `"))
        .and_then(|rest| rest.split('`').next());
    match field {
        Some(field) if path == "." => field.to_string(),
        Some(field) => format!("{path}.{field}"),
        None => path.to_string(),
    }
}

fn default_batch_rows() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Rows per forward pass during perplexity evaluation.
    #[serde(default = "default_batch_rows")]
    pub batch_rows: usize,
    /// Bucket boundary; defaults to the training run's readq k.
    #[serde(default)]
    pub k_for_buckets: Option<usize>,
    #[serde(default)]
    pub scoring: Scoring,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            batch_rows: default_batch_rows(),
            k_for_buckets: None,
            scoring: Scoring::default(),
        }
    }
}

/// The complete run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buddy: Option<FusionPlan>,
    pub train: TrainConfig,
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parses with strict schema checking; error messages carry the dotted
    /// path of the offending key (e.g. `model.d_model`).
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let parsed: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|err| ConfigError::Schema {
                path: dotted_path(&err.path().to_string(), &err.inner().to_string()),
                message: err.inner().to_string(),
            })?;
        Ok(parsed)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text)?;
        // Relative corpus paths resolve against the config file's directory.
        if let Some(corpus) = &cfg.data.corpus_path {
            if corpus.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.corpus_path = Some(dir.join(corpus));
                }
            }
        }
        Ok(cfg)
    }

    /// Fills defaults, validates every section, and injects the buddy plan
    /// into the train config. The returned config serializes as the resolved
    /// echo.
    pub fn resolved(mut self) -> Result<RunConfig, ConfigError> {
        self.model = self.model.validated()?;
        if let Some(plan) = self.buddy.take() {
            self.buddy = Some(plan.validated(self.train.seq_len).map_err(|e| {
                ConfigError::Invalid(format!("buddy: {e}"))
            })?);
        }
        self.train.fusion = self.buddy.clone();
        self.train = self.train.validated()?;
        if self.train.seq_len > self.model.max_seq {
            return Err(ConfigError::Invalid(format!(
                "train.seq_len {} exceeds model.max_seq {}",
                self.train.seq_len, self.model.max_seq
            )));
        }
        if let Some(plan) = &self.buddy {
            if self.train.seq_len > plan.model.max_seq {
                return Err(ConfigError::Invalid(format!(
                    "train.seq_len {} exceeds buddy.model.max_seq {}",
                    self.train.seq_len, plan.model.max_seq
                )));
            }
            if plan.model.vocab_size != self.model.vocab_size {
                return Err(ConfigError::Invalid(
                    "buddy.model.vocab_size must match model.vocab_size".into(),
                ));
            }
        }
        self.data.docs().map(|_| ()).or_else(|e| match e {
            // Defer corpus IO problems to run time; only reject structural issues.
            ConfigError::Invalid(_) => Err(e),
            _ => Ok(()),
        })?;
        Ok(self)
    }

    pub fn resolved_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    /// Bucket boundary for evaluation: explicit override or the training k.
    pub fn bucket_k(&self) -> usize {
        self.eval
            .k_for_buckets
            .unwrap_or(if self.train.readq.enabled { self.train.readq.k } else { 0 })
    }
}
