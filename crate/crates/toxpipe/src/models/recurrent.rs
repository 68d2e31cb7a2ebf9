//! Recurrent forwards: single-layer LSTM/GRU classifiers and the pooled
//! bidirectional model with parallel max/average pooling.
//!
//! Hidden states advance through a masked update
//! `h <- m * h_new + (1 - m) * h`, so state freezes at the first padded
//! position and the value left after the loop is the last unmasked hidden
//! state. This makes outputs independent of how much padding follows the
//! text.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamRegistry, Tape, TensorData, Var};
use crate::vocab::EncodedExample;

use super::{
    flatten_ids, flatten_mask, validate_batch, ModelConfig, ModelError, ModelVariant, Params,
};

struct StepMasks {
    keep: Vec<Var>,
    carry: Vec<Var>,
}

/// Per-step `[batch]` mask columns as constants: `keep[t]` is the mask bit,
/// `carry[t]` its complement.
fn step_masks(
    tape: &mut Tape<'_>,
    mask: &[u8],
    batch: usize,
    len: usize,
) -> Result<StepMasks, ModelError> {
    let mut keep = Vec::with_capacity(len);
    let mut carry = Vec::with_capacity(len);
    for step in 0..len {
        let column: Vec<f64> = (0..batch)
            .map(|row| mask[row * len + step] as f64)
            .collect();
        let complement: Vec<f64> = column.iter().map(|&m| 1.0 - m).collect();
        keep.push(tape.constant(TensorData::new(vec![batch], column)?));
        carry.push(tape.constant(TensorData::new(vec![batch], complement)?));
    }
    Ok(StepMasks { keep, carry })
}

fn masked_update(
    tape: &mut Tape<'_>,
    fresh: Var,
    previous: Var,
    keep: Var,
    carry: Var,
) -> Result<Var, ModelError> {
    let kept = tape.scale_rows(fresh, keep)?;
    let carried = tape.scale_rows(previous, carry)?;
    Ok(tape.add(kept, carried)?)
}

struct LstmCell {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl LstmCell {
    fn bind(params: &Params<'_>, prefix: &str, hidden: usize) -> Result<Self, ModelError> {
        Ok(Self {
            w_ih: params.get(&format!("{prefix}.w_ih"))?,
            w_hh: params.get(&format!("{prefix}.w_hh"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
            hidden,
        })
    }

    /// Gate order i, f, g, o in the fused weight matrices.
    fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var), ModelError> {
        let zx = tape.matmul(x, self.w_ih)?;
        let zh = tape.matmul(h, self.w_hh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_bias(z, self.bias)?;
        let hd = self.hidden;
        let input_gate = tape.slice_cols(z, 0, hd)?;
        let input_gate = tape.sigmoid(input_gate);
        let forget_gate = tape.slice_cols(z, hd, hd)?;
        let forget_gate = tape.sigmoid(forget_gate);
        let cell_gate = tape.slice_cols(z, 2 * hd, hd)?;
        let cell_gate = tape.tanh(cell_gate);
        let output_gate = tape.slice_cols(z, 3 * hd, hd)?;
        let output_gate = tape.sigmoid(output_gate);

        let retained = tape.mul(forget_gate, c)?;
        let written = tape.mul(input_gate, cell_gate)?;
        let c_new = tape.add(retained, written)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(output_gate, c_act)?;
        Ok((h_new, c_new))
    }
}

struct GruCell {
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    hidden: usize,
}

impl GruCell {
    fn bind(params: &Params<'_>, prefix: &str, hidden: usize) -> Result<Self, ModelError> {
        Ok(Self {
            w_ih: params.get(&format!("{prefix}.w_ih"))?,
            w_hh: params.get(&format!("{prefix}.w_hh"))?,
            b_ih: params.get(&format!("{prefix}.b_ih"))?,
            b_hh: params.get(&format!("{prefix}.b_hh"))?,
            hidden,
        })
    }

    /// Gate order r, z, n; the candidate uses the reset-gated hidden path.
    fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var, ModelError> {
        let zx = tape.matmul(x, self.w_ih)?;
        let zx = tape.add_bias(zx, self.b_ih)?;
        let zh = tape.matmul(h, self.w_hh)?;
        let zh = tape.add_bias(zh, self.b_hh)?;
        let hd = self.hidden;

        let rx = tape.slice_cols(zx, 0, hd)?;
        let rh = tape.slice_cols(zh, 0, hd)?;
        let reset = tape.add(rx, rh)?;
        let reset = tape.sigmoid(reset);

        let ux = tape.slice_cols(zx, hd, hd)?;
        let uh = tape.slice_cols(zh, hd, hd)?;
        let update = tape.add(ux, uh)?;
        let update = tape.sigmoid(update);

        let nx = tape.slice_cols(zx, 2 * hd, hd)?;
        let nh = tape.slice_cols(zh, 2 * hd, hd)?;
        let gated = tape.mul(reset, nh)?;
        let candidate = tape.add(nx, gated)?;
        let candidate = tape.tanh(candidate);

        let keep_old = tape.mul(update, h)?;
        let blend = tape.affine(update, -1.0, 1.0);
        let take_new = tape.mul(blend, candidate)?;
        Ok(tape.add(keep_old, take_new)?)
    }
}

/// Embedding -> one unidirectional recurrent layer -> last unmasked hidden
/// state -> dense(1) -> sigmoid.
pub(super) fn forward_basic<'p>(
    tape: &mut Tape<'p>,
    registry: &'p ParamRegistry,
    config: &ModelConfig,
    batch: &[EncodedExample],
) -> Result<Var, ModelError> {
    let dims = validate_batch(batch)?;
    let (b, t, h) = (dims.batch, dims.len, config.hidden_dim);
    let params = Params::bind_all(tape, registry, true);
    let ids = flatten_ids(batch);
    let mask = flatten_mask(batch);

    let table = params.get("embeddings.token")?;
    let embedded = tape.embedding_lookup(table, &ids, &[b, t])?;
    let masks = step_masks(tape, &mask, b, t)?;

    let mut hidden = tape.constant(TensorData::zeros(vec![b, h]));
    let final_hidden = match config.variant {
        ModelVariant::BasicLstm => {
            let cell = LstmCell::bind(&params, "encoder.0", h)?;
            let mut state = tape.constant(TensorData::zeros(vec![b, h]));
            for step in 0..t {
                let x = tape.time_slice(embedded, step)?;
                let (h_new, c_new) = cell.step(tape, x, hidden, state)?;
                hidden = masked_update(tape, h_new, hidden, masks.keep[step], masks.carry[step])?;
                state = masked_update(tape, c_new, state, masks.keep[step], masks.carry[step])?;
            }
            hidden
        }
        ModelVariant::BasicGru => {
            let cell = GruCell::bind(&params, "encoder.0", h)?;
            for step in 0..t {
                let x = tape.time_slice(embedded, step)?;
                let h_new = cell.step(tape, x, hidden)?;
                hidden = masked_update(tape, h_new, hidden, masks.keep[step], masks.carry[step])?;
            }
            hidden
        }
        other => {
            return Err(ModelError::BadConfig(format!(
                "forward_basic cannot run variant {other:?}"
            )))
        }
    };

    dense_sigmoid_head(tape, &params, final_hidden, "head.0", b)
}

fn dense_sigmoid_head(
    tape: &mut Tape<'_>,
    params: &Params<'_>,
    features: Var,
    prefix: &str,
    batch: usize,
) -> Result<Var, ModelError> {
    let w = params.get(&format!("{prefix}.w"))?;
    let b = params.get(&format!("{prefix}.b"))?;
    let logits = tape.matmul(features, w)?;
    let logits = tape.add_bias(logits, b)?;
    let flat = tape.reshape(logits, vec![batch])?;
    Ok(tape.sigmoid(flat))
}

/// One bidirectional LSTM layer over per-step inputs; yields per-step
/// `[batch, 2 * hidden]` outputs (forward and backward halves concatenated).
fn bilstm_layer(
    tape: &mut Tape<'_>,
    params: &Params<'_>,
    prefix: &str,
    inputs: &[Var],
    masks: &StepMasks,
    batch: usize,
    hidden: usize,
) -> Result<Vec<Var>, ModelError> {
    let t = inputs.len();
    let forward_cell = LstmCell::bind(params, &format!("{prefix}.fwd"), hidden)?;
    let backward_cell = LstmCell::bind(params, &format!("{prefix}.bwd"), hidden)?;

    let mut fwd_states = Vec::with_capacity(t);
    let mut h = tape.constant(TensorData::zeros(vec![batch, hidden]));
    let mut c = tape.constant(TensorData::zeros(vec![batch, hidden]));
    for (step, &input) in inputs.iter().enumerate() {
        let (h_new, c_new) = forward_cell.step(tape, input, h, c)?;
        h = masked_update(tape, h_new, h, masks.keep[step], masks.carry[step])?;
        c = masked_update(tape, c_new, c, masks.keep[step], masks.carry[step])?;
        fwd_states.push(h);
    }

    let mut bwd_states = vec![None; t];
    let mut h = tape.constant(TensorData::zeros(vec![batch, hidden]));
    let mut c = tape.constant(TensorData::zeros(vec![batch, hidden]));
    for step in (0..t).rev() {
        let (h_new, c_new) = backward_cell.step(tape, inputs[step], h, c)?;
        h = masked_update(tape, h_new, h, masks.keep[step], masks.carry[step])?;
        c = masked_update(tape, c_new, c, masks.keep[step], masks.carry[step])?;
        bwd_states[step] = Some(h);
    }

    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let both = [fwd_states[step], bwd_states[step].unwrap()];
        outputs.push(tape.concat_last(&both)?);
    }
    Ok(outputs)
}

/// Embedding -> dropout -> two bidirectional LSTM layers -> parallel
/// max/average pooling over unmasked steps -> three dense layers ->
/// sigmoid.
pub(super) fn forward_pooled<'p>(
    tape: &mut Tape<'p>,
    registry: &'p ParamRegistry,
    config: &ModelConfig,
    batch: &[EncodedExample],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    let dims = validate_batch(batch)?;
    let (b, t, h) = (dims.batch, dims.len, config.hidden_dim);
    let params = Params::bind_all(tape, registry, true);
    let ids = flatten_ids(batch);
    let mask = flatten_mask(batch);

    let table = params.get("embeddings.token")?;
    let mut embedded = tape.embedding_lookup(table, &ids, &[b, t])?;
    if let Some(rng) = dropout_rng {
        embedded = tape.dropout(embedded, config.dropout_p, rng)?;
    }
    let masks = step_masks(tape, &mask, b, t)?;

    let mut inputs = Vec::with_capacity(t);
    for step in 0..t {
        inputs.push(tape.time_slice(embedded, step)?);
    }
    let layer0 = bilstm_layer(tape, &params, "encoder.0", &inputs, &masks, b, h)?;
    let layer1 = bilstm_layer(tape, &params, "encoder.1", &layer0, &masks, b, h)?;

    let stacked = tape.stack_time(&layer1)?;
    let max_pooled = tape.max_over_time(stacked, &mask)?;
    let mean_pooled = tape.mean_over_time(stacked, &mask)?;
    let features = tape.concat_last(&[max_pooled, mean_pooled])?;

    let w0 = params.get("head.0.w")?;
    let b0 = params.get("head.0.b")?;
    let d1 = tape.matmul(features, w0)?;
    let d1 = tape.add_bias(d1, b0)?;
    let d1 = tape.relu(d1);

    let w1 = params.get("head.1.w")?;
    let b1 = params.get("head.1.b")?;
    let d2 = tape.matmul(d1, w1)?;
    let d2 = tape.add_bias(d2, b1)?;
    let d2 = tape.relu(d2);

    dense_sigmoid_head(tape, &params, d2, "head.2", b)
}
