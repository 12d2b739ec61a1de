//! Overfits a tiny model on a handful of documents and reproduces them with
//! greedy decoding; also shows seeded temperature sampling.
//!
//! Run with: cargo run --release --example generate_text

use quietread::eval::{generate, GenMode};
use quietread::runconfig::RunConfig;
use quietread::runner::{load_run_bundle, run_training};

fn main() {
    let out = std::env::temp_dir().join("quietread_generate_demo");
    let _ = std::fs::remove_dir_all(&out);
    let corpus_path = out.join("corpus.txt");
    std::fs::create_dir_all(&out).unwrap();
    // Equal-length docs tile one packed row each, so the memorized
    // positions match generation-time prompts exactly.
    std::fs::write(&corpus_path, b"abc|cba\nxyz|zyx\n").unwrap();

    let config = RunConfig::from_json(
        &serde_json::json!({
            "model": { "d_model": 32, "n_layers": 2, "n_heads": 2, "max_seq": 32 },
            "train": {
                "total_steps": 250, "batch_size": 2, "seq_len": 9,
                "peak_lr": 3e-3, "warmup_steps": 10, "weight_decay": 0.0, "seed": 8
            },
            "data": { "corpus_path": corpus_path }
        })
        .to_string(),
    )
    .unwrap();
    let report = run_training(config, &out, None).unwrap();
    println!("overfit 2 docs for 250 steps; final loss {:.4}", report.final_train_loss);

    let bundle = load_run_bundle(&out, 250).unwrap();
    for prompt in ["abc|", "xyz|"] {
        let completion = generate(&bundle, prompt.as_bytes(), 8, GenMode::Greedy).unwrap();
        println!("greedy {:?} -> {:?}", prompt, String::from_utf8_lossy(&completion));
    }

    let t1 = generate(&bundle, b"abc|", 8, GenMode::Temperature { tau: 0.8, seed: 42 }).unwrap();
    let t2 = generate(&bundle, b"abc|", 8, GenMode::Temperature { tau: 0.8, seed: 42 }).unwrap();
    assert_eq!(t1, t2);
    println!(
        "temperature 0.8 with seed 42 (reproducible): {:?}",
        String::from_utf8_lossy(&t1)
    );
}
