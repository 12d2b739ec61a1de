//! Byte-level vocabulary, document packing, and the synthetic corpora used by
//! the desk-scale experiments.
//!
//! Documents are packed greedily into fixed-length rows as
//! `[BOS, bytes.., EOS]` sequences; a document that does not fit the remaining
//! space is split across rows *without* re-inserting BOS, so a continuation
//! row has no BOS and no silent-reading window. PAD fills row tails only.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::tensor::IntMatrix;

/// Byte ids 0..255, then BOS, EOS, PAD.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
/// Vocabulary size including the three specials.
pub const VOCAB_SIZE: usize = 259;

/// Letters used by the synthetic generators; small enough that the analytic
/// per-byte entropy ln(26) is a meaningful reference line in reports.
pub const SYNTH_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("pack_documents requires seq_len ≥ 4, got {0}")]
    SeqLenTooSmall(usize),
    #[error("synth_kv_corpus requires n_pairs ≥ 2, got {0}")]
    TooFewPairs(usize),
    #[error("invalid length range ({0}, {1})")]
    BadLenRange(usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("task file line {line}: {source}")]
    TaskParse {
        line: usize,
        source: serde_json::Error,
    },
}

/// Identity byte codec. Specials are never produced by `encode`, so
/// encode/decode is a bijection on arbitrary byte strings.
pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`encode`]; ids ≥ 256 (the specials) are dropped.
pub fn decode(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// Fixed-length token rows with shifted targets, the base loss mask, and the
/// BOS positions each row contains.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    /// `[B×S]` token ids.
    pub tokens: IntMatrix,
    /// `[B×S]` next-position tokens; the final column and PAD positions hold
    /// PAD and are excluded by `base_mask`.
    pub targets: IntMatrix,
    /// True where the target is a real token (bytes or EOS): false at the
    /// last position of each row, at PAD targets, and at BOS targets — BOS is
    /// a packing artifact, never something the model is asked to predict.
    pub base_mask: Vec<bool>,
    /// Per-row BOS indices, in increasing order.
    pub doc_starts: Vec<Vec<usize>>,
}

impl PackedBatch {
    pub fn rows(&self) -> usize {
        self.tokens.rows
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.cols
    }

    pub fn mask_row(&self, r: usize) -> &[bool] {
        &self.base_mask[r * self.seq_len()..(r + 1) * self.seq_len()]
    }

    /// Copies a subset of rows into a new batch (used for mini-batching).
    pub fn select_rows(&self, rows: &[usize]) -> PackedBatch {
        let s = self.seq_len();
        let mut tokens = Vec::with_capacity(rows.len() * s);
        let mut targets = Vec::with_capacity(rows.len() * s);
        let mut base_mask = Vec::with_capacity(rows.len() * s);
        let mut doc_starts = Vec::with_capacity(rows.len());
        for &r in rows {
            tokens.extend_from_slice(self.tokens.row(r));
            targets.extend_from_slice(self.targets.row(r));
            base_mask.extend_from_slice(self.mask_row(r));
            doc_starts.push(self.doc_starts[r].clone());
        }
        PackedBatch {
            tokens: IntMatrix::new(rows.len(), s, tokens),
            targets: IntMatrix::new(rows.len(), s, targets),
            base_mask,
            doc_starts,
        }
    }
}

/// Greedily packs `[BOS, doc bytes.., EOS]` sequences into rows of
/// `seq_len`, splitting over-long documents across rows without re-inserting
/// BOS mid-document. An empty `docs` yields an empty batch.
pub fn pack_documents(docs: &[Vec<u8>], seq_len: usize) -> Result<PackedBatch, DataError> {
    if seq_len < 4 {
        return Err(DataError::SeqLenTooSmall(seq_len));
    }
    // One flat stream of [BOS, bytes, EOS] per document, then row slicing.
    let mut stream: Vec<u32> = Vec::new();
    let mut bos_positions: Vec<usize> = Vec::new();
    for doc in docs {
        bos_positions.push(stream.len());
        stream.push(BOS);
        stream.extend(encode(doc));
        stream.push(EOS);
    }
    let n_rows = stream.len().div_ceil(seq_len);
    let mut tokens = vec![PAD; n_rows * seq_len];
    tokens[..stream.len()].copy_from_slice(&stream);

    let mut doc_starts = vec![Vec::new(); n_rows];
    for pos in bos_positions {
        doc_starts[pos / seq_len].push(pos % seq_len);
    }

    let mut targets = vec![PAD; n_rows * seq_len];
    let mut base_mask = vec![false; n_rows * seq_len];
    for r in 0..n_rows {
        for c in 0..seq_len {
            let idx = r * seq_len + c;
            if c + 1 < seq_len {
                targets[idx] = tokens[idx + 1];
            }
            base_mask[idx] = c + 1 < seq_len && targets[idx] != PAD && targets[idx] != BOS;
        }
    }
    Ok(PackedBatch {
        tokens: IntMatrix::new(n_rows, seq_len, tokens),
        targets: IntMatrix::new(n_rows, seq_len, targets),
        base_mask,
        doc_starts,
    })
}

/// Multiple-choice task scored by continuation likelihood.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct McTask {
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer_index: usize,
}

/// Key-value retrieval corpus: each document is
/// `k1=v1;k2=v2;...;?ki→vi` with distinct random keys, random values, and one
/// queried pair whose answer already appeared earlier in the document. The
/// matching task uses the document prefix up to and including `→` as the
/// prompt and all of the document's values as choices.
pub fn synth_kv_corpus(
    seed: u64,
    n_docs: usize,
    n_pairs: usize,
    key_len: usize,
    val_len: usize,
) -> Result<(Vec<Vec<u8>>, Vec<McTask>), DataError> {
    if n_pairs < 2 {
        return Err(DataError::TooFewPairs(n_pairs));
    }
    let mut docs = Vec::with_capacity(n_docs);
    let mut tasks = Vec::with_capacity(n_docs);
    for di in 0..n_docs {
        let mut r = rng::substream(seed, di as u64);
        let mut keys: Vec<Vec<u8>> = Vec::with_capacity(n_pairs);
        while keys.len() < n_pairs {
            let k = random_word(&mut r, key_len);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let vals: Vec<Vec<u8>> = (0..n_pairs).map(|_| random_word(&mut r, val_len)).collect();
        let query = r.random_range(0..n_pairs);

        let mut doc = Vec::new();
        for (k, v) in keys.iter().zip(&vals) {
            doc.extend_from_slice(k);
            doc.push(b'=');
            doc.extend_from_slice(v);
            doc.push(b';');
        }
        doc.push(b'?');
        doc.extend_from_slice(&keys[query]);
        doc.extend_from_slice("→".as_bytes());
        let prompt_len = doc.len();
        doc.extend_from_slice(&vals[query]);

        tasks.push(McTask {
            prompt: String::from_utf8(doc[..prompt_len].to_vec()).expect("ascii + arrow"),
            choices: vals
                .iter()
                .map(|v| String::from_utf8(v.clone()).expect("ascii"))
                .collect(),
            answer_index: query,
        });
        docs.push(doc);
    }
    Ok((docs, tasks))
}

/// Mirror corpus: each document is `<random letters>|<the same letters
/// reversed>`, so the prefix is unlearnable noise with per-byte entropy
/// ln(26) while the suffix is a deterministic function of the prefix.
pub fn synth_reverse_corpus(
    seed: u64,
    n_docs: usize,
    len_range: (usize, usize),
) -> Result<Vec<Vec<u8>>, DataError> {
    let (lo, hi) = len_range;
    if lo == 0 || hi < lo {
        return Err(DataError::BadLenRange(lo, hi));
    }
    let mut docs = Vec::with_capacity(n_docs);
    for di in 0..n_docs {
        let mut r = rng::substream(seed, di as u64);
        let len = r.random_range(lo..=hi);
        let word = random_word(&mut r, len);
        let mut doc = word.clone();
        doc.push(b'|');
        doc.extend(word.iter().rev());
        docs.push(doc);
    }
    Ok(docs)
}

fn random_word<R: Rng>(r: &mut R, len: usize) -> Vec<u8> {
    (0..len)
        .map(|_| SYNTH_ALPHABET[r.random_range(0..SYNTH_ALPHABET.len())])
        .collect()
}

/// Reads a newline-delimited document file. Lines are raw bytes; empty lines
/// are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u8>>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for line in std::io::BufReader::new(file).split(b'\n') {
        let line = line?;
        if !line.is_empty() {
            docs.push(line);
        }
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Vec<u8>]) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for doc in docs {
        out.write_all(doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes tasks as one JSON object per line with fields
/// `prompt`, `choices`, `answer_index`.
pub fn write_tasks(path: &Path, tasks: &[McTask]) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for task in tasks {
        serde_json::to_writer(&mut out, task).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<McTask>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(
            serde_json::from_str(&line).map_err(|source| DataError::TaskParse { line: i + 1, source })?,
        );
    }
    Ok(tasks)
}
