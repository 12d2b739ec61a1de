//! Miniature version of the bundled experiment grid: trains a plain model
//! and a silent-reading model on the same corpus, evaluates both on the same
//! held-out data, and emits the comparison CSV plus a loss-curve SVG.
//!
//! The full-size grid lives in experiments/*.json at the repo root.
//!
//! Run with: cargo run --release --example compare_experiments

use quietread::data::synth_kv_corpus;
use quietread::eval::compare_runs;
use quietread::runconfig::RunConfig;
use quietread::runner::{run_eval, run_training};

fn config(readq_k: Option<usize>) -> RunConfig {
    let mut train = serde_json::json!({
        "total_steps": 80, "batch_size": 8, "seq_len": 64,
        "peak_lr": 2e-3, "warmup_steps": 6, "seed": 21
    });
    if let Some(k) = readq_k {
        train["readq"] = serde_json::json!({ "k": k, "enabled": true });
    }
    RunConfig::from_json(
        &serde_json::json!({
            "model": { "d_model": 32, "n_layers": 2, "n_heads": 2, "max_seq": 64 },
            "train": train,
            "data": { "synth": { "kind": "kv", "seed": 13, "n_docs": 500, "n_pairs": 3, "key_len": 2, "val_len": 2 } },
            // Same bucket boundary for both runs, so the reports compare.
            "eval": { "k_for_buckets": 8 }
        })
        .to_string(),
    )
    .unwrap()
}

fn main() {
    let root = std::env::temp_dir().join("quietread_compare_demo");
    let _ = std::fs::remove_dir_all(&root);
    let baseline = root.join("baseline");
    let readq = root.join("readq_k8");

    run_training(config(None), &baseline, None).unwrap();
    run_training(config(Some(8)), &readq, None).unwrap();

    // Shared held-out evaluation: same corpus, same tasks, same bucket k.
    let (docs, tasks) = synth_kv_corpus(99, 300, 3, 2, 2).unwrap();
    for dir in [&baseline, &readq] {
        run_eval(dir, 80, Some(("kv-heldout", docs.clone())), Some(("kv-tasks", tasks.clone()))).unwrap();
    }

    let csv_path = root.join("comparison.csv");
    let svg_path = root.join("comparison.svg");
    let table = compare_runs(&[baseline, readq], &csv_path, &svg_path).unwrap();

    println!("{}", table.to_csv());
    println!("csv: {}", csv_path.display());
    println!("svg: {}", svg_path.display());
}
