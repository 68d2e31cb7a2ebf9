//! The four classifier architectures: parameter construction and grouping,
//! forward passes, closed-form parameter accounting, freeze scenarios and
//! checkpoint serialization.
//!
//! Every architecture maps token ids through an embedding table into a
//! sigmoid-probability head. Parameters live in three group families:
//! `embeddings`, `encoder.<i>` (one per recurrent layer or transformer
//! block) and `head`.

mod checkpoint;
mod recurrent;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
pub use transformer::attention_weights as transformer_attention_weights;

use std::collections::BTreeSet;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamRegistry, Tape, TensorError, Var};
use crate::vocab::{EmbeddingMatrix, EncodedExample};

/// Dense widths of the pooled model's classifier stack.
pub const POOLED_DENSE_1: usize = 256;
pub const POOLED_DENSE_2: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("embedding matrix is {rows}x{dim}, config wants {want_rows}x{want_dim}")]
    EmbeddingShape {
        rows: usize,
        dim: usize,
        want_rows: usize,
        want_dim: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("example {index} is fully masked")]
    AllMaskedExample { index: usize },
    #[error("example {index} is encoded at length {len}, expected {expected}")]
    RaggedBatch {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("sequence length {len} exceeds the model's maximum {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("parameter {name:?} is missing from the registry")]
    MissingParam { name: String },
    #[error("freeze scenario needs at least one encoder group")]
    NoEncoderGroups,
    #[error("checkpoint {path} is corrupt: {reason}")]
    CheckpointCorrupt { path: String, reason: String },
    #[error("checkpoint {path} has version {found}, expected {expected}")]
    CheckpointVersion {
        path: String,
        found: u32,
        expected: u32,
    },
}

/// Which classifier to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    BasicLstm,
    BasicGru,
    PooledBiLstm,
    MiniTransformer,
}

/// Architecture descriptor. Recurrent variants ignore the transformer-only
/// fields but keep them populated so configs serialize uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub causal: bool,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn basic_lstm(vocab_size: usize) -> Self {
        Self::recurrent(ModelVariant::BasicLstm, vocab_size)
    }

    pub fn basic_gru(vocab_size: usize) -> Self {
        Self::recurrent(ModelVariant::BasicGru, vocab_size)
    }

    pub fn pooled_bilstm(vocab_size: usize) -> Self {
        Self::recurrent(ModelVariant::PooledBiLstm, vocab_size)
    }

    fn recurrent(variant: ModelVariant, vocab_size: usize) -> Self {
        Self {
            variant,
            vocab_size,
            emb_dim: 300,
            hidden_dim: 128,
            num_blocks: 1,
            num_heads: 1,
            ffn_dim: 0,
            dropout_p: 0.3,
            causal: false,
            max_len: 128,
        }
    }

    /// Desk-scale transformer encoder; `causal` selects the triangular
    /// attention mask and last-position pooling.
    pub fn mini_transformer(vocab_size: usize, causal: bool) -> Self {
        Self {
            variant: ModelVariant::MiniTransformer,
            vocab_size,
            emb_dim: 64,
            hidden_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            ffn_dim: 256,
            dropout_p: 0.3,
            causal,
            max_len: 128,
        }
    }

    /// Builds a config from its command-line model name.
    pub fn from_cli_name(name: &str, vocab_size: usize) -> Result<Self, ModelError> {
        match name {
            "lstm" => Ok(Self::basic_lstm(vocab_size)),
            "gru" => Ok(Self::basic_gru(vocab_size)),
            "pooled-bilstm" => Ok(Self::pooled_bilstm(vocab_size)),
            "transformer" => Ok(Self::mini_transformer(vocab_size, false)),
            "transformer-causal" => Ok(Self::mini_transformer(vocab_size, true)),
            other => Err(ModelError::BadConfig(format!(
                "unknown model {other:?}, expected lstm, gru, pooled-bilstm, transformer or transformer-causal"
            ))),
        }
    }

    pub fn cli_name(&self) -> &'static str {
        match (self.variant, self.causal) {
            (ModelVariant::BasicLstm, _) => "lstm",
            (ModelVariant::BasicGru, _) => "gru",
            (ModelVariant::PooledBiLstm, _) => "pooled-bilstm",
            (ModelVariant::MiniTransformer, false) => "transformer",
            (ModelVariant::MiniTransformer, true) => "transformer-causal",
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::BadConfig(
                "vocab_size must cover PAD and UNK".to_string(),
            ));
        }
        if self.max_len == 0 {
            return Err(ModelError::BadConfig("max_len must be >= 1".to_string()));
        }
        if self.emb_dim == 0 || self.hidden_dim == 0 {
            return Err(ModelError::BadConfig(
                "emb_dim and hidden_dim must be >= 1".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::BadConfig(format!(
                "dropout_p {} is outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.variant == ModelVariant::MiniTransformer {
            if !self.hidden_dim.is_multiple_of(self.num_heads) {
                return Err(ModelError::BadConfig(format!(
                    "hidden_dim {} is not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                )));
            }
            if self.emb_dim != self.hidden_dim {
                return Err(ModelError::BadConfig(format!(
                    "transformer needs emb_dim == hidden_dim, got {} and {}",
                    self.emb_dim, self.hidden_dim
                )));
            }
            if self.num_blocks == 0 || self.ffn_dim == 0 {
                return Err(ModelError::BadConfig(
                    "transformer needs num_blocks >= 1 and ffn_dim >= 1".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Number of freezable `encoder.<i>` groups this architecture has.
    pub fn encoder_groups(&self) -> usize {
        match self.variant {
            ModelVariant::BasicLstm | ModelVariant::BasicGru => 1,
            ModelVariant::PooledBiLstm => 2,
            ModelVariant::MiniTransformer => self.num_blocks,
        }
    }
}

/// Which parameter groups stay frozen while fine-tuning on a new dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferScenario {
    All,
    FrozenEmbeddings,
    FrozenEmbeddingsHalfEncoder,
}

impl TransferScenario {
    pub fn cli_name(&self) -> &'static str {
        match self {
            TransferScenario::All => "all",
            TransferScenario::FrozenEmbeddings => "frozen-emb",
            TransferScenario::FrozenEmbeddingsHalfEncoder => "frozen-emb-half-encoder",
        }
    }
}

impl FromStr for TransferScenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(TransferScenario::All),
            "frozen-emb" => Ok(TransferScenario::FrozenEmbeddings),
            "frozen-emb-half-encoder" => Ok(TransferScenario::FrozenEmbeddingsHalfEncoder),
            other => Err(format!(
                "unknown scenario {other:?}, expected all, frozen-emb or frozen-emb-half-encoder"
            )),
        }
    }
}

/// Marks the scenario's groups as frozen. `All` clears every freeze flag;
/// the half-encoder scenario freezes the earliest `floor(blocks / 2)`
/// encoder groups on top of the embeddings.
pub fn freeze_scenario(
    registry: &mut ParamRegistry,
    scenario: TransferScenario,
) -> Result<(), ModelError> {
    let encoder_groups: Vec<String> = registry
        .groups()
        .into_iter()
        .filter(|g| g.starts_with("encoder."))
        .collect();
    if encoder_groups.is_empty() {
        return Err(ModelError::NoEncoderGroups);
    }
    let mut frozen = BTreeSet::new();
    match scenario {
        TransferScenario::All => {}
        TransferScenario::FrozenEmbeddings => {
            frozen.insert("embeddings".to_string());
        }
        TransferScenario::FrozenEmbeddingsHalfEncoder => {
            frozen.insert("embeddings".to_string());
            for group in &encoder_groups[..encoder_groups.len() / 2] {
                frozen.insert(group.clone());
            }
        }
    }
    registry.set_frozen_groups(frozen);
    Ok(())
}

/// Deterministically initialized parameters for `config`. Dense and
/// recurrent weights draw uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
/// start at zero, norm gains at one and embedding tables at
/// uniform(-0.05, 0.05) unless pretrained rows are supplied.
pub fn build_params(
    config: &ModelConfig,
    embeddings: Option<&EmbeddingMatrix>,
    seed: u64,
) -> Result<ParamRegistry, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut registry = ParamRegistry::new();
    let mut init = Init {
        rng: &mut rng,
        registry: &mut registry,
    };

    let table_len = config.vocab_size * config.emb_dim;
    match embeddings {
        Some(matrix) => {
            if matrix.rows() != config.vocab_size || matrix.dim != config.emb_dim {
                return Err(ModelError::EmbeddingShape {
                    rows: matrix.rows(),
                    dim: matrix.dim,
                    want_rows: config.vocab_size,
                    want_dim: config.emb_dim,
                });
            }
            init.fixed(
                "embeddings",
                "embeddings.token",
                vec![config.vocab_size, config.emb_dim],
                matrix.values().to_vec(),
            )?;
        }
        None => init.table(
            "embeddings",
            "embeddings.token",
            vec![config.vocab_size, config.emb_dim],
            table_len,
        )?,
    }

    let (e, h) = (config.emb_dim, config.hidden_dim);
    match config.variant {
        ModelVariant::BasicLstm => {
            init.lstm_cell("encoder.0", "encoder.0", e, h)?;
            init.dense("head", "head.0", h, 1)?;
        }
        ModelVariant::BasicGru => {
            init.gru_cell("encoder.0", "encoder.0", e, h)?;
            init.dense("head", "head.0", h, 1)?;
        }
        ModelVariant::PooledBiLstm => {
            for (layer, input) in [(0, e), (1, 2 * h)] {
                let group = format!("encoder.{layer}");
                init.lstm_cell(&group, &format!("{group}.fwd"), input, h)?;
                init.lstm_cell(&group, &format!("{group}.bwd"), input, h)?;
            }
            init.dense("head", "head.0", 4 * h, POOLED_DENSE_1)?;
            init.dense("head", "head.1", POOLED_DENSE_1, POOLED_DENSE_2)?;
            init.dense("head", "head.2", POOLED_DENSE_2, 1)?;
        }
        ModelVariant::MiniTransformer => {
            init.table(
                "embeddings",
                "embeddings.position",
                vec![config.max_len, e],
                config.max_len * e,
            )?;
            for block in 0..config.num_blocks {
                let group = format!("encoder.{block}");
                for name in ["wq", "wk", "wv", "wo"] {
                    init.dense_named(
                        &group,
                        &format!("{group}.attn.{name}"),
                        &format!("{group}.attn.b{}", &name[1..]),
                        h,
                        h,
                    )?;
                }
                init.norm(&group, &format!("{group}.norm1"), h)?;
                init.dense_named(
                    &group,
                    &format!("{group}.ffn.w1"),
                    &format!("{group}.ffn.b1"),
                    h,
                    config.ffn_dim,
                )?;
                init.dense_named(
                    &group,
                    &format!("{group}.ffn.w2"),
                    &format!("{group}.ffn.b2"),
                    config.ffn_dim,
                    h,
                )?;
                init.norm(&group, &format!("{group}.norm2"), h)?;
            }
            init.dense("head", "head.0", h, 1)?;
        }
    }
    Ok(registry)
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    registry: &'a mut ParamRegistry,
}

impl Init<'_> {
    fn fixed(
        &mut self,
        group: &str,
        name: &str,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<(), ModelError> {
        self.registry.register(group, name, shape, values)?;
        Ok(())
    }

    fn table(
        &mut self,
        group: &str,
        name: &str,
        shape: Vec<usize>,
        len: usize,
    ) -> Result<(), ModelError> {
        let values = (0..len)
            .map(|_| self.rng.random_range(-0.05..0.05))
            .collect();
        self.fixed(group, name, shape, values)
    }

    fn weight(
        &mut self,
        group: &str,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), ModelError> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.fixed(group, name, vec![fan_in, fan_out], values)
    }

    fn zeros(&mut self, group: &str, name: &str, len: usize) -> Result<(), ModelError> {
        self.fixed(group, name, vec![len], vec![0.0; len])
    }

    fn dense(
        &mut self,
        group: &str,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), ModelError> {
        self.dense_named(
            group,
            &format!("{prefix}.w"),
            &format!("{prefix}.b"),
            fan_in,
            fan_out,
        )
    }

    fn dense_named(
        &mut self,
        group: &str,
        weight_name: &str,
        bias_name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<(), ModelError> {
        self.weight(group, weight_name, fan_in, fan_out)?;
        self.zeros(group, bias_name, fan_out)
    }

    fn lstm_cell(
        &mut self,
        group: &str,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<(), ModelError> {
        self.weight(group, &format!("{prefix}.w_ih"), input, 4 * hidden)?;
        self.weight(group, &format!("{prefix}.w_hh"), hidden, 4 * hidden)?;
        self.zeros(group, &format!("{prefix}.bias"), 4 * hidden)
    }

    fn gru_cell(
        &mut self,
        group: &str,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<(), ModelError> {
        self.weight(group, &format!("{prefix}.w_ih"), input, 3 * hidden)?;
        self.weight(group, &format!("{prefix}.w_hh"), hidden, 3 * hidden)?;
        self.zeros(group, &format!("{prefix}.b_ih"), 3 * hidden)?;
        self.zeros(group, &format!("{prefix}.b_hh"), 3 * hidden)
    }

    fn norm(&mut self, group: &str, prefix: &str, width: usize) -> Result<(), ModelError> {
        self.fixed(
            group,
            &format!("{prefix}.gain"),
            vec![width],
            vec![1.0; width],
        )?;
        self.zeros(group, &format!("{prefix}.bias"), width)
    }
}

/// Exact trainable-parameter count by closed-form accounting; agrees with
/// enumerating the registry built from the same config.
pub fn count_params(config: &ModelConfig) -> usize {
    let (v, e, h) = (config.vocab_size, config.emb_dim, config.hidden_dim);
    let embedding = v * e;
    let lstm = |input: usize| input * 4 * h + h * 4 * h + 4 * h;
    let gru = |input: usize| input * 3 * h + h * 3 * h + 3 * h + 3 * h;
    let dense = |fan_in: usize, fan_out: usize| fan_in * fan_out + fan_out;
    match config.variant {
        ModelVariant::BasicLstm => embedding + lstm(e) + dense(h, 1),
        ModelVariant::BasicGru => embedding + gru(e) + dense(h, 1),
        ModelVariant::PooledBiLstm => {
            embedding
                + 2 * lstm(e)
                + 2 * lstm(2 * h)
                + dense(4 * h, POOLED_DENSE_1)
                + dense(POOLED_DENSE_1, POOLED_DENSE_2)
                + dense(POOLED_DENSE_2, 1)
        }
        ModelVariant::MiniTransformer => {
            let attention = 4 * dense(h, h);
            let ffn = dense(h, config.ffn_dim) + dense(config.ffn_dim, h);
            let norms = 2 * (2 * h);
            let block = attention + ffn + norms;
            embedding + config.max_len * e + config.num_blocks * block + dense(h, 1)
        }
    }
}

/// Probabilities in (0, 1) for a batch of encoded examples. Pass a dropout
/// RNG while training; `None` disables dropout for evaluation.
pub fn forward<'p>(
    tape: &mut Tape<'p>,
    registry: &'p ParamRegistry,
    config: &ModelConfig,
    batch: &[EncodedExample],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    match config.variant {
        ModelVariant::BasicLstm | ModelVariant::BasicGru => {
            recurrent::forward_basic(tape, registry, config, batch)
        }
        ModelVariant::PooledBiLstm => {
            recurrent::forward_pooled(tape, registry, config, batch, dropout_rng)
        }
        ModelVariant::MiniTransformer => transformer::forward(tape, registry, config, batch),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BatchDims {
    pub batch: usize,
    pub len: usize,
}

pub(crate) fn validate_batch(batch: &[EncodedExample]) -> Result<BatchDims, ModelError> {
    let first = batch.first().ok_or(ModelError::EmptyBatch)?;
    let len = first.ids.len();
    for (index, example) in batch.iter().enumerate() {
        if example.ids.len() != len || example.mask.len() != len {
            return Err(ModelError::RaggedBatch {
                index,
                len: example.ids.len(),
                expected: len,
            });
        }
        if example.mask.iter().all(|&m| m == 0) {
            return Err(ModelError::AllMaskedExample { index });
        }
    }
    if len == 0 {
        return Err(ModelError::AllMaskedExample { index: 0 });
    }
    Ok(BatchDims {
        batch: batch.len(),
        len,
    })
}

pub(crate) fn flatten_ids(batch: &[EncodedExample]) -> Vec<u32> {
    batch.iter().flat_map(|e| e.ids.iter().copied()).collect()
}

pub(crate) fn flatten_mask(batch: &[EncodedExample]) -> Vec<u8> {
    batch.iter().flat_map(|e| e.mask.iter().copied()).collect()
}

pub(crate) struct Params<'r> {
    registry: &'r ParamRegistry,
    bound: Vec<Var>,
}

impl<'r> Params<'r> {
    /// Binds every registry parameter once; `trainable` false turns them
    /// into constants for evaluation.
    pub fn bind_all<'p>(
        tape: &mut Tape<'p>,
        registry: &'p ParamRegistry,
        trainable: bool,
    ) -> Params<'p> {
        let bound = (0..registry.len())
            .map(|i| tape.param(registry, i, trainable))
            .collect();
        Params { registry, bound }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.registry
            .index_of(name)
            .map(|i| self.bound[i])
            .ok_or_else(|| ModelError::MissingParam {
                name: name.to_string(),
            })
    }
}
