//! Silent-reading loss mask: next-token loss is suppressed for the first `k`
//! predictions after each BOS token, so the opening of every document becomes
//! a pressure-free comprehension window instead of a high-variance training
//! signal.
//!
//! Indexing convention: prediction position `p` predicts the target at
//! `p + 1`, so the `k` masked predictions after a BOS at row position `j`
//! occupy positions `j..j+k-1`. Windows clip at the row end, windows from
//! nearby BOS tokens union, and rows without a BOS (mid-document
//! continuation rows) get no window at all.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PackedBatch;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("readq k = {k} must be smaller than seq_len = {seq_len}")]
    WindowTooWide { k: usize, seq_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadQConfig {
    /// Number of masked initial predictions per BOS.
    pub k: usize,
    pub enabled: bool,
}

impl ReadQConfig {
    pub fn disabled() -> Self {
        ReadQConfig { k: 0, enabled: false }
    }

    pub fn with_k(k: usize) -> Self {
        ReadQConfig { k, enabled: true }
    }
}

impl Default for ReadQConfig {
    fn default() -> Self {
        ReadQConfig { k: 16, enabled: true }
    }
}

/// Final loss mask: base mask with the silent-reading windows removed.
#[derive(Debug, Clone)]
pub struct LossMask {
    /// `[B×S]`, row-major; implies the batch's base mask.
    pub mask: Vec<bool>,
    pub masked_in_count: usize,
}

impl LossMask {
    pub fn row<'a>(&'a self, batch: &PackedBatch, r: usize) -> &'a [bool] {
        let s = batch.seq_len();
        &self.mask[r * s..(r + 1) * s]
    }
}

/// Computes the composed mask: `base_mask AND NOT readq_window`. With the
/// config disabled or `k = 0` the result equals the base mask bitwise.
pub fn compute_loss_mask(batch: &PackedBatch, cfg: &ReadQConfig) -> Result<LossMask, MaskError> {
    let s = batch.seq_len();
    if cfg.enabled && cfg.k >= s && batch.rows() > 0 {
        return Err(MaskError::WindowTooWide { k: cfg.k, seq_len: s });
    }
    let mut mask = batch.base_mask.clone();
    if cfg.enabled && cfg.k > 0 {
        for (r, starts) in batch.doc_starts.iter().enumerate() {
            for &j in starts {
                for p in j..(j + cfg.k).min(s) {
                    mask[r * s + p] = false;
                }
            }
        }
    }
    let masked_in_count = mask.iter().filter(|&&m| m).count();
    Ok(LossMask { mask, masked_in_count })
}

/// Aggregate view of a mask against its batch.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaskStats {
    /// Fraction of all B×S positions excluded from the loss.
    pub masked_out_fraction: f64,
    /// Masked-in positions per row.
    pub masked_in_per_row: Vec<usize>,
    /// For each offset after a BOS (offset 0 = the BOS position itself),
    /// how many positions at that offset are masked in vs out. Offsets are
    /// measured from the nearest BOS at or before the position; positions
    /// with no BOS in their row prefix are not counted.
    pub offset_histogram: Vec<OffsetCount>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct OffsetCount {
    pub offset: usize,
    pub masked_in: usize,
    pub masked_out: usize,
}

pub fn mask_stats(mask: &LossMask, batch: &PackedBatch) -> MaskStats {
    let s = batch.seq_len();
    let total = batch.rows() * s;
    let masked_in_per_row: Vec<usize> = (0..batch.rows())
        .map(|r| mask.mask[r * s..(r + 1) * s].iter().filter(|&&m| m).count())
        .collect();
    let masked_in: usize = masked_in_per_row.iter().sum();

    let mut hist: Vec<OffsetCount> = Vec::new();
    for r in 0..batch.rows() {
        for p in 0..s {
            let Some(&j) = batch.doc_starts[r].iter().rev().find(|&&j| j <= p) else {
                continue;
            };
            let offset = p - j;
            if hist.len() <= offset {
                hist.resize(
                    offset + 1,
                    OffsetCount { offset: 0, masked_in: 0, masked_out: 0 },
                );
            }
            let entry = &mut hist[offset];
            entry.offset = offset;
            if mask.mask[r * s + p] {
                entry.masked_in += 1;
            } else {
                entry.masked_out += 1;
            }
        }
    }
    for (i, entry) in hist.iter_mut().enumerate() {
        entry.offset = i;
    }

    MaskStats {
        masked_out_fraction: if total == 0 {
            0.0
        } else {
            (total - masked_in) as f64 / total as f64
        },
        masked_in_per_row,
        offset_histogram: hist,
    }
}

/// Two aligned lines for one row: token glyphs over mask glyphs
/// (`#` = masked in, `·` = masked out). Specials render as `^` BOS, `$` EOS,
/// `_` PAD; non-printable bytes as `?`.
pub fn render_row(batch: &PackedBatch, mask: &LossMask, row: usize) -> (String, String) {
    let s = batch.seq_len();
    let mut tokens_line = String::with_capacity(s);
    let mut mask_line = String::with_capacity(s);
    for c in 0..s {
        let t = batch.tokens.data[row * s + c];
        tokens_line.push(match t {
            crate::data::BOS => '^',
            crate::data::EOS => '$',
            crate::data::PAD => '_',
            b if (0x20..0x7f).contains(&b) => b as u8 as char,
            _ => '?',
        });
        mask_line.push(if mask.mask[row * s + c] { '#' } else { '·' });
    }
    (tokens_line, mask_line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pack_documents, synth_reverse_corpus, BOS};
    use proptest::prelude::*;

    /// Independent oracle: position `p` is masked out by the silent-reading
    /// rule iff scanning backward finds a BOS at `j ≤ p` with `p − j < k`.
    fn backward_scan_oracle(batch: &PackedBatch, k: usize) -> Vec<bool> {
        let s = batch.seq_len();
        let mut mask = batch.base_mask.clone();
        for r in 0..batch.rows() {
            for p in 0..s {
                let mut masked = false;
                for q in (0..=p).rev() {
                    if batch.tokens.data[r * s + q] == BOS {
                        masked = p - q < k;
                        break;
                    }
                }
                if masked {
                    mask[r * s + p] = false;
                }
            }
        }
        mask
    }

    #[test]
    fn single_doc_window() {
        // [BOS,a,b,c,d,EOS,PAD..]: k=2 masks predictions of a and b.
        let batch = pack_documents(&[b"abcd".to_vec()], 8).unwrap();
        let m = compute_loss_mask(&batch, &ReadQConfig::with_k(2)).unwrap();
        assert_eq!(
            m.mask,
            vec![false, false, true, true, true, false, false, false]
        );
        assert_eq!(m.masked_in_count, 3);
    }

    #[test]
    fn packed_row_with_two_docs() {
        // [BOS,a,EOS,BOS,c,EOS,PAD,PAD] with k=1: predictions of a and c
        // masked out, EOS predictions stay in, PAD region stays out.
        let batch = pack_documents(&[b"a".to_vec(), b"c".to_vec()], 8).unwrap();
        let m = compute_loss_mask(&batch, &ReadQConfig::with_k(1)).unwrap();
        assert_eq!(
            m.mask,
            vec![false, true, false, false, true, false, false, false]
        );
    }

    #[test]
    fn k_zero_and_disabled_equal_base_mask() {
        let docs = synth_reverse_corpus(3, 20, (2, 10)).unwrap();
        let batch = pack_documents(&docs, 16).unwrap();
        let zero = compute_loss_mask(&batch, &ReadQConfig::with_k(0)).unwrap();
        assert_eq!(zero.mask, batch.base_mask);
        let off = compute_loss_mask(&batch, &ReadQConfig { k: 5, enabled: false }).unwrap();
        assert_eq!(off.mask, batch.base_mask);
    }

    #[test]
    fn k_at_or_above_seq_len_is_an_error() {
        let batch = pack_documents(&[b"ab".to_vec()], 6).unwrap();
        assert!(matches!(
            compute_loss_mask(&batch, &ReadQConfig::with_k(6)),
            Err(MaskError::WindowTooWide { k: 6, seq_len: 6 })
        ));
        assert!(compute_loss_mask(&batch, &ReadQConfig::with_k(5)).is_ok());
    }

    #[test]
    fn window_clips_at_row_end() {
        // Doc long enough that BOS lands near a row end: window truncates.
        let batch = pack_documents(&[b"x".to_vec(), b"abcdefgh".to_vec()], 6).unwrap();
        // Row 0: [BOS,x,EOS,BOS,a,b], BOS at 0 and 3.
        let m = compute_loss_mask(&batch, &ReadQConfig::with_k(4)).unwrap();
        assert!(!m.row(&batch, 0).iter().take(6).any(|&v| v), "row fully masked");
        // Row 1 continues the doc with no BOS: untouched by the window.
        assert_eq!(m.row(&batch, 1), batch.mask_row(1));
    }

    #[test]
    fn matches_backward_scan_oracle_on_random_packs() {
        let mut checked = 0;
        for seed in 0..40 {
            let docs = synth_reverse_corpus(seed, 30, (1, 20)).unwrap();
            let batch = pack_documents(&docs, 24).unwrap();
            for k in [0usize, 1, 4, 16] {
                let m = compute_loss_mask(&batch, &ReadQConfig::with_k(k)).unwrap();
                assert_eq!(m.mask, backward_scan_oracle(&batch, k), "seed {seed} k {k}");
            }
            checked += batch.rows();
        }
        assert!(checked >= 1000, "need ≥ 1000 rows, got {checked}");
    }

    #[test]
    fn stats_masked_fraction_arithmetic() {
        // One doc filling a row exactly: [BOS, 9 bytes, EOS] with S = 11.
        // L = 10 masked-in predictions at k=0; k=4 removes 4 of them.
        let batch = pack_documents(&[b"abcdefghi".to_vec()], 11).unwrap();
        let base = compute_loss_mask(&batch, &ReadQConfig::with_k(0)).unwrap();
        assert_eq!(base.masked_in_count, 10);
        let m = compute_loss_mask(&batch, &ReadQConfig::with_k(4)).unwrap();
        let stats = mask_stats(&m, &batch);
        assert_eq!(m.masked_in_count, 6);
        let readq_fraction =
            (base.masked_in_count - m.masked_in_count) as f64 / base.masked_in_count as f64;
        assert!((readq_fraction - 4.0 / 10.0).abs() < 1e-12);
        assert_eq!(stats.masked_in_per_row, vec![6]);
    }

    #[test]
    fn stats_histogram_shows_window_boundary() {
        let docs = synth_reverse_corpus(8, 50, (12, 20)).unwrap();
        let batch = pack_documents(&docs, 32).unwrap();
        let k = 5;
        let m = compute_loss_mask(&batch, &ReadQConfig::with_k(k)).unwrap();
        let stats = mask_stats(&m, &batch);
        for entry in &stats.offset_histogram {
            if entry.offset < k {
                assert_eq!(entry.masked_in, 0, "offset {} inside window", entry.offset);
            }
        }
        // Offsets just past the window are mostly masked in (only row-final
        // or EOS→BOS/PAD boundaries are excluded by the base mask).
        let past = &stats.offset_histogram[k];
        assert!(past.masked_in > 0);
    }

    #[test]
    fn stats_k0_fraction_is_base_only() {
        let batch = pack_documents(&[b"abcdefghi".to_vec()], 12).unwrap();
        let m = compute_loss_mask(&batch, &ReadQConfig::with_k(0)).unwrap();
        let stats = mask_stats(&m, &batch);
        // 12 positions, 10 masked in (EOS target at 10 and final pos out).
        assert!((stats.masked_out_fraction - 2.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn masked_loss_equals_sum_of_individual_position_losses() {
        use crate::model::{forward, init_params, ModelConfig};
        use crate::tensor::Tape;

        let cfg = ModelConfig {
            vocab_size: crate::data::VOCAB_SIZE,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 16,
            ln_eps: 1e-5,
            init_std: 0.02,
        };
        let params = init_params::<f64>(&cfg, 8).unwrap();
        let docs = synth_reverse_corpus(9, 4, (2, 5)).unwrap();
        let batch = pack_documents(&docs, 12).unwrap();
        let mask = compute_loss_mask(&batch, &ReadQConfig::with_k(2)).unwrap();
        let logits = forward(&params, &cfg, &batch.tokens, None).unwrap().logits;

        let mut tape = Tape::new();
        let node = tape.constant(logits.shape().to_vec(), logits.data().to_vec()).unwrap();
        let (loss, _) = tape
            .cross_entropy_masked(node, &batch.targets.data, &mask.mask)
            .unwrap();
        let combined = tape.scalar_value(loss);

        // One cross-entropy call per masked-in position, summed.
        let mut individual = 0.0;
        for (i, &m) in mask.mask.iter().enumerate() {
            if !m {
                continue;
            }
            let mut one = vec![false; mask.mask.len()];
            one[i] = true;
            let mut tape = Tape::new();
            let node = tape.constant(logits.shape().to_vec(), logits.data().to_vec()).unwrap();
            let (loss, count) = tape.cross_entropy_masked(node, &batch.targets.data, &one).unwrap();
            assert_eq!(count, 1);
            individual += tape.scalar_value(loss);
        }
        assert!(
            (combined - individual).abs() < 1e-6,
            "{combined} vs {individual}"
        );
    }

    #[test]
    fn render_aligns_tokens_and_mask() {
        let batch = pack_documents(&[b"abcd".to_vec()], 8).unwrap();
        let mask = compute_loss_mask(&batch, &ReadQConfig::with_k(2)).unwrap();
        let (tokens, glyphs) = render_row(&batch, &mask, 0);
        assert_eq!(tokens, "^abcd$__");
        assert_eq!(glyphs, "··###···");
        assert_eq!(tokens.chars().count(), glyphs.chars().count());
    }

    proptest! {
        /// Monotonicity: growing k never re-enables a position, and the
        /// composed mask always implies the base mask.
        #[test]
        fn monotone_and_composed(seed in 0u64..500, k1 in 0usize..12, extra in 0usize..12) {
            let docs = synth_reverse_corpus(seed, 10, (1, 15)).unwrap();
            let batch = pack_documents(&docs, 32).unwrap();
            let k2 = k1 + extra;
            let m1 = compute_loss_mask(&batch, &ReadQConfig::with_k(k1)).unwrap();
            let m2 = compute_loss_mask(&batch, &ReadQConfig::with_k(k2)).unwrap();
            for i in 0..m1.mask.len() {
                if m2.mask[i] {
                    prop_assert!(m1.mask[i], "mask(k2) must be a subset of mask(k1)");
                }
                if m1.mask[i] {
                    prop_assert!(batch.base_mask[i], "mask must imply base_mask");
                }
            }
            prop_assert!(m2.masked_in_count <= m1.masked_in_count);
        }
    }
}
