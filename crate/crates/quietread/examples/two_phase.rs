//! The two-phase fusion schedule: phase 1 trains only the connector while
//! everything else stays bitwise frozen; phase 2 unfreezes the rest.
//!
//! Run with: cargo run --release --example two_phase

use quietread::model::{init_params, ModelConfig};
use quietread::runconfig::RunConfig;
use quietread::runner::{load_run_bundle, run_training};

fn main() {
    let total_steps = 40;
    let phase1_steps = 15;
    let config = RunConfig::from_json(
        &serde_json::json!({
            "model": { "d_model": 32, "n_layers": 2, "n_heads": 2, "max_seq": 64 },
            "buddy": {
                "model": { "d_model": 16, "n_layers": 2, "n_heads": 2, "max_seq": 64 },
                "window": 8
            },
            "train": {
                "total_steps": total_steps,
                "batch_size": 8,
                "seq_len": 64,
                "peak_lr": 2e-3,
                "warmup_steps": 4,
                "seed": 5,
                "phase1_steps": phase1_steps,
                "checkpoint_every": 5
            },
            "data": {
                "synth": { "kind": "kv", "seed": 11, "n_docs": 300, "n_pairs": 3, "key_len": 2, "val_len": 2 }
            }
        })
        .to_string(),
    )
    .unwrap();

    let out = std::env::temp_dir().join("quietread_two_phase_demo");
    let _ = std::fs::remove_dir_all(&out);
    run_training(config, &out, None).unwrap();

    // Reconstruct the initialization the run started from (same seed path).
    let model = ModelConfig {
        vocab_size: 259,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 128,
        max_seq: 64,
        ln_eps: 1e-5,
        init_std: 0.02,
    };
    let init_gen = init_params::<f32>(&model, 5).unwrap();
    println!("phase 1 covers steps 0..{phase1_steps}; phase 2 the rest\n");
    for step in [5usize, 10, 15, 20, 40] {
        let bundle = load_run_bundle(&out, step).unwrap();
        let gen_moved = bundle
            .gen
            .get("lm_head")
            .unwrap()
            .data()
            .iter()
            .zip(init_gen.get("lm_head").unwrap().data())
            .filter(|(a, b)| a != b)
            .count();
        let parts = bundle.fusion.as_ref().unwrap();
        let conn_norm: f32 = parts.connector.weight.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        let phase = if step <= phase1_steps { 1 } else { 2 };
        println!(
            "after step {step:>2} (phase {phase}): generator lm_head values changed = {gen_moved:>4}, |connector| = {conn_norm:.4}"
        );
    }
    println!("\nduring phase 1 the generator stays bitwise at initialization while the connector grows;");
    println!("once phase 2 begins the generator starts moving too");
}
