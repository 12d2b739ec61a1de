//! The reading-buddy path, piece by piece: penultimate-layer tap, trailing
//! sliding-window pooling, the affine connector, and the additive fusion —
//! including the zero-connector identity that makes phase-1 training stable.
//!
//! Run with: cargo run --example buddy_fusion

use quietread::fusion::{
    buddy_encode, connect, fuse_forward, sliding_pool, Connector, FusionPlan, TapNorm, Visibility,
};
use quietread::model::{forward, init_params, ModelConfig};
use quietread::tensor::IntMatrix;
use rand::Rng;

fn main() {
    let gen_cfg = ModelConfig {
        vocab_size: 259,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_seq: 32,
        ln_eps: 1e-5,
        init_std: 0.02,
    };
    let buddy_cfg = ModelConfig { d_model: 16, d_ff: 32, ..gen_cfg.clone() };
    let plan = FusionPlan {
        model: buddy_cfg.clone(),
        window: Some(4),
        visibility: Visibility::Causal,
        tap_norm: TapNorm::None,
        freeze_buddy: false,
    };

    let gen = init_params::<f32>(&gen_cfg, 1).unwrap();
    let buddy = init_params::<f32>(&buddy_cfg, 2).unwrap();
    let tokens = IntMatrix::new(1, 12, "hello, buddy".bytes().map(u32::from).collect());

    // 1. The buddy reads the same tokens; we tap its second-last layer.
    let tap = buddy_encode(&buddy, &plan, &tokens).unwrap();
    println!("buddy tap shape: {:?}", tap.shape());

    // 2. A trailing mean pools each position with its recent past.
    let pooled = sliding_pool(&tap, 4).unwrap();
    println!("pooled with window 4: same shape {:?}", pooled.shape());
    let w1 = sliding_pool(&tap, 1).unwrap();
    assert_eq!(w1.data(), tap.data());
    println!("window 1 is exactly the identity");

    // 3. The connector projects buddy width 16 into generator width 32.
    let zero = Connector::<f32>::zeros(16, 32);
    let extra = connect(&zero, &pooled).unwrap();
    println!("zero connector output is all zeros: {}", extra.data().iter().all(|&v| v == 0.0));

    // 4. Fusion adds that projection onto the generator's input embeddings.
    // With the zero connector the fused model IS the baseline, bitwise.
    let baseline = forward(&gen, &gen_cfg, &tokens, None).unwrap();
    let fused = fuse_forward(&gen, &gen_cfg, &buddy, &plan, &zero, &tokens).unwrap();
    let identical = baseline
        .logits
        .data()
        .iter()
        .zip(fused.logits.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    println!("zero-connector fused logits bitwise equal baseline: {identical}");

    // With a trained (here: random) connector the read path shifts logits.
    let mut rng = quietread::rng::seeded(3);
    let mut conn = Connector::<f32>::zeros(16, 32);
    for v in conn.weight.data_mut() {
        *v = (rng.random::<f32>() - 0.5) * 0.2;
    }
    let fused = fuse_forward(&gen, &gen_cfg, &buddy, &plan, &conn, &tokens).unwrap();
    let max_shift = baseline
        .logits
        .data()
        .iter()
        .zip(fused.logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    println!("nonzero connector shifts logits (max |Δ| = {max_shift:.4})");

    // Sliding-window widths from the ablation: 16 and 64.
    for w in [16usize, 64] {
        let long_tokens = IntMatrix::new(1, 32, (0..32).map(|i| 97 + (i % 26) as u32).collect());
        let tap = buddy_encode(&buddy, &plan, &long_tokens).unwrap();
        let pooled = sliding_pool(&tap, w.min(32)).unwrap();
        println!("SW{w}: pooled {} positions with trailing window {}", pooled.shape()[1], w.min(32));
    }
}
