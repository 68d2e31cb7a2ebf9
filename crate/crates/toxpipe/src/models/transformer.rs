//! Scaled-down transformer encoder with key-padding (and optionally
//! causal) attention masks.
//!
//! Padded key positions receive exactly zero attention weight, so padded
//! content can never leak into real positions. The classification feature
//! is position 0 for the bidirectional mode and each row's last unmasked
//! position for the causal mode, the only position that has seen the whole
//! text under a triangular mask.

use crate::tensor::{ParamRegistry, Tape, Var};
use crate::vocab::EncodedExample;

use super::{flatten_ids, flatten_mask, validate_batch, ModelConfig, ModelError, Params};

pub(super) fn forward<'p>(
    tape: &mut Tape<'p>,
    registry: &'p ParamRegistry,
    config: &ModelConfig,
    batch: &[EncodedExample],
) -> Result<Var, ModelError> {
    let dims = validate_batch(batch)?;
    let (b, t, width) = (dims.batch, dims.len, config.hidden_dim);
    if t > config.max_len {
        return Err(ModelError::TooLong {
            len: t,
            max_len: config.max_len,
        });
    }
    let params = Params::bind_all(tape, registry, true);
    let ids = flatten_ids(batch);
    let mask = flatten_mask(batch);

    let token_table = params.get("embeddings.token")?;
    let token = tape.embedding_lookup(token_table, &ids, &[b, t])?;
    let position_table = params.get("embeddings.position")?;
    let positions: Vec<u32> = (0..t as u32).collect();
    let position = tape.embedding_lookup(position_table, &positions, &[t])?;
    let embedded = tape.add_bias(token, position)?;

    let mut hidden = tape.reshape(embedded, vec![b * t, width])?;
    let attention_mask = build_attention_mask(&mask, b, t, config.num_heads, config.causal);
    for block in 0..config.num_blocks {
        hidden = encoder_block(
            tape,
            &params,
            &format!("encoder.{block}"),
            hidden,
            &attention_mask,
            b,
            t,
            config,
        )?;
    }

    let stacked = tape.reshape(hidden, vec![b, t, width])?;
    let pool_index: Vec<usize> = if config.causal {
        batch
            .iter()
            .map(|e| e.mask.iter().rposition(|&m| m == 1).unwrap_or(0))
            .collect()
    } else {
        vec![0; b]
    };
    let pooled = tape.gather_time(stacked, &pool_index)?;

    let w = params.get("head.0.w")?;
    let bias = params.get("head.0.b")?;
    let logits = tape.matmul(pooled, w)?;
    let logits = tape.add_bias(logits, bias)?;
    let flat = tape.reshape(logits, vec![b])?;
    Ok(tape.sigmoid(flat))
}

/// Attention mask over `[batch * heads, t, t]` scores: query row q may
/// attend key k iff k is a real token and, in causal mode, k <= q.
fn build_attention_mask(mask: &[u8], b: usize, t: usize, heads: usize, causal: bool) -> Vec<u8> {
    let mut out = vec![0u8; b * heads * t * t];
    for row in 0..b {
        let key_mask = &mask[row * t..(row + 1) * t];
        for head in 0..heads {
            let base = (row * heads + head) * t * t;
            for q in 0..t {
                let limit = if causal { q + 1 } else { t };
                for (k, &allowed) in key_mask.iter().enumerate().take(limit) {
                    out[base + q * t + k] = allowed;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn encoder_block(
    tape: &mut Tape<'_>,
    params: &Params<'_>,
    prefix: &str,
    input: Var,
    attention_mask: &[u8],
    b: usize,
    t: usize,
    config: &ModelConfig,
) -> Result<Var, ModelError> {
    let width = config.hidden_dim;
    let heads = config.num_heads;
    let head_dim = width / heads;

    let project = |tape: &mut Tape<'_>, name: &str| -> Result<Var, ModelError> {
        let w = params.get(&format!("{prefix}.attn.{name}"))?;
        let bias = params.get(&format!("{prefix}.attn.b{}", &name[1..]))?;
        let projected = tape.matmul(input, w)?;
        Ok(tape.add_bias(projected, bias)?)
    };
    let queries = project(tape, "wq")?;
    let keys = project(tape, "wk")?;
    let values = project(tape, "wv")?;

    let split = |tape: &mut Tape<'_>, x: Var| -> Result<Var, ModelError> {
        let x = tape.reshape(x, vec![b, t, heads, head_dim])?;
        let x = tape.swap_axes_1_2(x)?;
        Ok(tape.reshape(x, vec![b * heads, t, head_dim])?)
    };
    let q = split(tape, queries)?;
    let k = split(tape, keys)?;
    let v = split(tape, values)?;

    let scores = tape.bmm_nt(q, k)?;
    let scores = tape.affine(scores, 1.0 / (head_dim as f64).sqrt(), 0.0);
    let weights = tape.masked_softmax(scores, attention_mask.to_vec())?;
    let context = tape.bmm(weights, v)?;

    let context = tape.reshape(context, vec![b, heads, t, head_dim])?;
    let context = tape.swap_axes_1_2(context)?;
    let context = tape.reshape(context, vec![b * t, width])?;

    let wo = params.get(&format!("{prefix}.attn.wo"))?;
    let bo = params.get(&format!("{prefix}.attn.bo"))?;
    let attended = tape.matmul(context, wo)?;
    let attended = tape.add_bias(attended, bo)?;

    let residual = tape.add(input, attended)?;
    let gain1 = params.get(&format!("{prefix}.norm1.gain"))?;
    let bias1 = params.get(&format!("{prefix}.norm1.bias"))?;
    let normed = tape.layer_norm(residual, gain1, bias1)?;

    let w1 = params.get(&format!("{prefix}.ffn.w1"))?;
    let b1 = params.get(&format!("{prefix}.ffn.b1"))?;
    let inner = tape.matmul(normed, w1)?;
    let inner = tape.add_bias(inner, b1)?;
    let inner = tape.relu(inner);
    let w2 = params.get(&format!("{prefix}.ffn.w2"))?;
    let b2 = params.get(&format!("{prefix}.ffn.b2"))?;
    let expanded = tape.matmul(inner, w2)?;
    let expanded = tape.add_bias(expanded, b2)?;

    let residual = tape.add(normed, expanded)?;
    let gain2 = params.get(&format!("{prefix}.norm2.gain"))?;
    let bias2 = params.get(&format!("{prefix}.norm2.bias"))?;
    Ok(tape.layer_norm(residual, gain2, bias2)?)
}

/// Per-head attention weights for one forward pass; rows are `[query,
/// key]` matrices. Exposed for tests that assert exact zeros on padding.
pub fn attention_weights(
    registry: &ParamRegistry,
    config: &ModelConfig,
    batch: &[EncodedExample],
    block: usize,
) -> Result<Vec<f64>, ModelError> {
    let dims = validate_batch(batch)?;
    let (b, t, width) = (dims.batch, dims.len, config.hidden_dim);
    let mut tape = Tape::new();
    let params = Params::bind_all(&mut tape, registry, false);
    let ids = flatten_ids(batch);
    let mask = flatten_mask(batch);

    let token_table = params.get("embeddings.token")?;
    let token = tape.embedding_lookup(token_table, &ids, &[b, t])?;
    let position_table = params.get("embeddings.position")?;
    let positions: Vec<u32> = (0..t as u32).collect();
    let position = tape.embedding_lookup(position_table, &positions, &[t])?;
    let embedded = tape.add_bias(token, position)?;
    let mut hidden = tape.reshape(embedded, vec![b * t, width])?;

    let attention_mask = build_attention_mask(&mask, b, t, config.num_heads, config.causal);
    for index in 0..block {
        hidden = encoder_block(
            &mut tape,
            &params,
            &format!("encoder.{index}"),
            hidden,
            &attention_mask,
            b,
            t,
            config,
        )?;
    }

    // Recompute the requested block's attention weights directly.
    let heads = config.num_heads;
    let head_dim = width / heads;
    let prefix = format!("encoder.{block}");
    let project = |tape: &mut Tape<'_>, name: &str| -> Result<Var, ModelError> {
        let w = params.get(&format!("{prefix}.attn.{name}"))?;
        let bias = params.get(&format!("{prefix}.attn.b{}", &name[1..]))?;
        let projected = tape.matmul(hidden, w)?;
        Ok(tape.add_bias(projected, bias)?)
    };
    let queries = project(&mut tape, "wq")?;
    let keys = project(&mut tape, "wk")?;
    let split = |tape: &mut Tape<'_>, x: Var| -> Result<Var, ModelError> {
        let x = tape.reshape(x, vec![b, t, heads, head_dim])?;
        let x = tape.swap_axes_1_2(x)?;
        Ok(tape.reshape(x, vec![b * heads, t, head_dim])?)
    };
    let q = split(&mut tape, queries)?;
    let k = split(&mut tape, keys)?;
    let scores = tape.bmm_nt(q, k)?;
    let scores = tape.affine(scores, 1.0 / (head_dim as f64).sqrt(), 0.0);
    let weights = tape.masked_softmax(scores, attention_mask)?;
    Ok(tape.value(weights).to_vec())
}
