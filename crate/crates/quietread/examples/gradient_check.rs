//! Verifies the reverse-mode gradients of the full transformer — plain and
//! buddy-fused — against central finite differences in f64.
//!
//! Run with: cargo run --release --example gradient_check

use quietread::data::PackedBatch;
use quietread::fusion::{
    fuse_forward_on_tape, lift_connector, Connector, FusionPlan, TapNorm, Visibility,
};
use quietread::model::{forward_on_tape, init_params, lift_params, Attn, ModelConfig, ParamStore};
use quietread::readq::{compute_loss_mask, ReadQConfig};
use quietread::rng;
use quietread::tensor::{IntMatrix, Tape};
use rand::Rng;

fn tiny(d: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        d_ff: 2 * d,
        max_seq: 8,
        ln_eps: 1e-5,
        init_std: 0.02,
    }
}

/// Hand-packed rows in the tiny vocabulary, with id 10 playing BOS.
fn tiny_batch() -> PackedBatch {
    let bos = 10u32;
    let tokens = vec![
        bos, 1, 2, 3, 4, 5, 6, // one document in row 0
        bos, 7, 8, bos, 1, 2, 3, // two documents in row 1
    ];
    let (rows, s) = (2usize, 7usize);
    let mut targets = vec![0u32; rows * s];
    let mut base_mask = vec![false; rows * s];
    for r in 0..rows {
        for c in 0..s - 1 {
            let t = tokens[r * s + c + 1];
            targets[r * s + c] = t;
            base_mask[r * s + c] = t != bos;
        }
    }
    PackedBatch {
        tokens: IntMatrix::new(rows, s, tokens),
        targets: IntMatrix::new(rows, s, targets),
        base_mask,
        doc_starts: vec![vec![0], vec![0, 3]],
    }
}

/// Loss of the plain generator for the current parameter values.
fn gen_loss(params: &ParamStore<f64>, cfg: &ModelConfig, batch: &quietread::data::PackedBatch, mask: &[bool]) -> f64 {
    let mut tape = Tape::new();
    let taped = lift_params(&mut tape, params).unwrap();
    let out = forward_on_tape(&mut tape, &taped, cfg, &batch.tokens, None, Attn::Causal).unwrap();
    let (loss, count) = tape
        .cross_entropy_masked(out.logits, &batch.targets.data, mask)
        .unwrap();
    let mean = tape.scale(loss, 1.0 / count as f64).unwrap();
    tape.scalar_value(mean)
}

fn main() {
    let vocab = 11;
    let gen_cfg = tiny(8, vocab);
    let batch = tiny_batch();
    let mask = compute_loss_mask(&batch, &ReadQConfig::with_k(2)).unwrap();

    // Plain generator.
    let params = init_params::<f64>(&gen_cfg, 3).unwrap().with_grads();
    let mut tape = Tape::new();
    let taped = lift_params(&mut tape, &params).unwrap();
    let out = forward_on_tape(&mut tape, &taped, &gen_cfg, &batch.tokens, None, Attn::Causal).unwrap();
    let (loss, count) = tape
        .cross_entropy_masked(out.logits, &batch.targets.data, &mask.mask)
        .unwrap();
    let mean = tape.scale(loss, 1.0 / count as f64).unwrap();
    println!("plain generator loss: {:.6}", tape.scalar_value(mean));
    tape.backward(mean).unwrap();

    let mut rng = rng::seeded(17);
    let names: Vec<String> = params.names().map(String::from).collect();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for trial in 0..60 {
        let name = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..params.get(name).unwrap().numel());
        let ad = tape.grad(taped.node(name).unwrap()).unwrap()[idx];

        let mut plus = params.clone();
        plus.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = params.clone();
        minus.get_mut(name).unwrap().data_mut()[idx] -= h;
        let fd = (gen_loss(&plus, &gen_cfg, &batch, &mask.mask)
            - gen_loss(&minus, &gen_cfg, &batch, &mask.mask))
            / (2.0 * h);
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
        if trial < 5 {
            println!("  {name}[{idx}]: autodiff {ad:+.3e}  finite-diff {fd:+.3e}  rel {rel:.2e}");
        }
    }
    println!("plain generator: worst relative error over 60 coordinates = {worst:.3e}");

    // Fused model: buddy tap -> pool -> connector -> generator input.
    let buddy_cfg = tiny(6, vocab);
    let plan = FusionPlan {
        model: buddy_cfg.clone(),
        window: Some(3),
        visibility: Visibility::Causal,
        tap_norm: TapNorm::None,
        freeze_buddy: false,
    };
    let gen = init_params::<f64>(&gen_cfg, 4).unwrap().with_grads();
    let buddy = init_params::<f64>(&buddy_cfg, 5).unwrap().with_grads();
    let mut connector = Connector::<f64>::zeros(6, 8).with_grads();
    for v in connector.weight.data_mut() {
        *v = (rng.random::<f64>() - 0.5) * 0.1;
    }

    let fused_loss = |gen: &ParamStore<f64>, buddy: &ParamStore<f64>, conn: &Connector<f64>| -> f64 {
        let mut tape = Tape::new();
        let g = lift_params(&mut tape, gen).unwrap();
        let b = lift_params(&mut tape, buddy).unwrap();
        let c = lift_connector(&mut tape, conn).unwrap();
        let out = fuse_forward_on_tape(&mut tape, &g, &gen_cfg, &b, &c, &plan, &batch.tokens, 0).unwrap();
        let (loss, count) = tape
            .cross_entropy_masked(out.logits, &batch.targets.data, &mask.mask)
            .unwrap();
        let mean = tape.scale(loss, 1.0 / count as f64).unwrap();
        tape.scalar_value(mean)
    };

    let mut tape = Tape::new();
    let g = lift_params(&mut tape, &gen).unwrap();
    let b = lift_params(&mut tape, &buddy).unwrap();
    let c = lift_connector(&mut tape, &connector).unwrap();
    let out = fuse_forward_on_tape(&mut tape, &g, &gen_cfg, &b, &c, &plan, &batch.tokens, 0).unwrap();
    let (loss, count) = tape
        .cross_entropy_masked(out.logits, &batch.targets.data, &mask.mask)
        .unwrap();
    let mean = tape.scale(loss, 1.0 / count as f64).unwrap();
    println!("\nfused model loss: {:.6}", tape.scalar_value(mean));
    tape.backward(mean).unwrap();

    // Spot-check the connector weight gradient end to end.
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let idx = rng.random_range(0..connector.weight.numel());
        let ad = tape.grad(c.weight).unwrap()[idx];
        let mut plus = connector.clone();
        plus.weight.data_mut()[idx] += h;
        let mut minus = connector.clone();
        minus.weight.data_mut()[idx] -= h;
        let fd = (fused_loss(&gen, &buddy, &plus) - fused_loss(&gen, &buddy, &minus)) / (2.0 * h);
        worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8));
    }
    println!("fused connector: worst relative error over 20 coordinates = {worst:.3e}");
    println!("\nthe acceptance suite runs the full 200-coordinate version of this check");
}
