//! Attention-mask semantics in the transformer: padded keys get exactly
//! zero weight, and the causal mode ignores everything past the last real
//! token.
//!
//! Run with `cargo run --example attention_masks`.

use toxpipe::models::{build_params, forward, transformer_attention_weights, ModelConfig};
use toxpipe::tensor::Tape;
use toxpipe::vocab::{EncodedExample, PAD_ID};

fn example(tokens: &[u32], max_len: usize) -> EncodedExample {
    let mut ids = tokens.to_vec();
    let mut mask = vec![1u8; tokens.len()];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    EncodedExample {
        ids,
        mask,
        label: 0,
    }
}

fn main() {
    let config = ModelConfig {
        emb_dim: 8,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_len: 6,
        ..ModelConfig::mini_transformer(16, false)
    };
    let registry = build_params(&config, None, 3).unwrap();

    // Two real tokens, four padded positions.
    let batch = vec![example(&[2, 3], 6)];
    let weights = transformer_attention_weights(&registry, &config, &batch, 0).unwrap();

    println!("block 0, head 0 attention (rows = queries, cols = keys):");
    for q in 0..6 {
        let row = &weights[q * 6..(q + 1) * 6];
        let cells: Vec<String> = row.iter().map(|w| format!("{w:.3}")).collect();
        println!("  q{q}: [{}]", cells.join(", "));
    }
    println!("columns 2..6 are padding and hold exact zeros\n");

    // Causal mode: tampering beyond the last real token cannot move the
    // output.
    let causal = ModelConfig {
        causal: true,
        ..config
    };
    let registry = build_params(&causal, None, 3).unwrap();
    let clean = vec![example(&[2, 3, 4], 6)];
    let mut tampered = clean.clone();
    for position in 3..6 {
        tampered[0].ids[position] = 9;
    }
    let mut tape = Tape::new();
    let a = forward(&mut tape, &registry, &causal, &clean, None).unwrap();
    let a = tape.value(a)[0];
    let mut tape = Tape::new();
    let b = forward(&mut tape, &registry, &causal, &tampered, None).unwrap();
    let b = tape.value(b)[0];
    println!("causal output with clean padding:    {a:.12}");
    println!("causal output with tampered padding: {b:.12}");
    assert_eq!(a, b);
    println!("identical, as the mask demands");
}
