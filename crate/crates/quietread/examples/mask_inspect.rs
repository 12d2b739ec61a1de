//! Shows how the silent-reading mask composes with packing: per-BOS windows,
//! clipping, continuation rows, and the offset histogram.
//!
//! Run with: cargo run --example mask_inspect

use quietread::data::pack_documents;
use quietread::readq::{compute_loss_mask, mask_stats, render_row, ReadQConfig};

fn show(docs: &[&str], seq_len: usize, k: usize) {
    let docs: Vec<Vec<u8>> = docs.iter().map(|d| d.as_bytes().to_vec()).collect();
    let batch = pack_documents(&docs, seq_len).unwrap();
    let mask = compute_loss_mask(&batch, &ReadQConfig::with_k(k)).unwrap();
    println!("k = {k}, seq_len = {seq_len}  (# = loss computed, · = suppressed)");
    for r in 0..batch.rows() {
        let (tokens, glyphs) = render_row(&batch, &mask, r);
        println!("  {tokens}");
        println!("  {glyphs}");
    }
    let stats = mask_stats(&mask, &batch);
    println!(
        "  masked-out fraction {:.3}, masked-in per row {:?}",
        stats.masked_out_fraction, stats.masked_in_per_row
    );
    println!();
}

fn main() {
    // One document: a k-token silent-reading window after BOS.
    show(&["the quick brown fox"], 32, 4);

    // Two packed documents: each BOS opens its own window.
    show(&["first doc", "second doc"], 32, 3);

    // A long document split across rows: the continuation row has no BOS
    // and therefore no window.
    show(&["abcdefghijklmnopqrstuvwxyz"], 16, 4);

    // k = 0 leaves only the base mask (PAD and row-final exclusions).
    show(&["plain next-token loss"], 32, 0);

    let docs: Vec<Vec<u8>> = (0..50).map(|i| format!("document number {i}").into_bytes()).collect();
    let batch = pack_documents(&docs, 64).unwrap();
    let mask = compute_loss_mask(&batch, &ReadQConfig::with_k(8)).unwrap();
    let stats = mask_stats(&mask, &batch);
    println!("offset-after-BOS histogram over 50 packed docs (k = 8):");
    for entry in stats.offset_histogram.iter().take(12) {
        println!(
            "  offset {:>2}: masked-in {:>3}, masked-out {:>3}",
            entry.offset, entry.masked_in, entry.masked_out
        );
    }
}
