//! Minimal end-to-end training run: builds a run config in code, trains a
//! small model on the key-value corpus, and reads back the metrics stream.
//!
//! Run with: cargo run --release --example train_baseline

use quietread::runconfig::RunConfig;
use quietread::runner::run_training;

fn main() {
    let config = RunConfig::from_json(
        &serde_json::json!({
            "model": { "d_model": 32, "n_layers": 2, "n_heads": 2, "max_seq": 64 },
            "train": {
                "total_steps": 60,
                "batch_size": 8,
                "seq_len": 64,
                "peak_lr": 2e-3,
                "warmup_steps": 5,
                "seed": 42,
                "readq": { "k": 8, "enabled": true },
                "checkpoint_every": 30
            },
            "data": {
                "synth": { "kind": "kv", "seed": 9, "n_docs": 400, "n_pairs": 3, "key_len": 2, "val_len": 2 }
            }
        })
        .to_string(),
    )
    .unwrap();

    let out = std::env::temp_dir().join("quietread_train_demo");
    let _ = std::fs::remove_dir_all(&out);
    let report = run_training(config, &out, None).unwrap();

    println!(
        "trained {} steps; final train loss {:.4} (uniform-random would be ln 259 = {:.4})",
        report.steps_completed,
        report.final_train_loss,
        (259.0f64).ln()
    );
    println!("checkpoints at steps {:?}", report.checkpoint_steps);

    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    println!("\nfirst and last metric lines:");
    let lines: Vec<&str> = metrics.lines().collect();
    println!("  {}", lines.first().unwrap());
    println!("  {}", lines.last().unwrap());
    println!("\nrun directory: {}", out.display());
    println!("resume it with: quietread train --config <same config> --out {} --resume 30", out.display());
}
