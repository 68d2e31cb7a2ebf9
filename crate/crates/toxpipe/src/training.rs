//! Training and evaluation loops plus the three transfer-learning
//! scenarios.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SplitCorpus;
use crate::metrics::{EvalReport, MetricsError};
use crate::models::{
    forward, freeze_scenario, Checkpoint, ModelConfig, ModelError, ModelVariant, TransferScenario,
};
use crate::preprocess::CleaningConfig;
use crate::tensor::{AdamConfig, ParamRegistry, TensorError};
use crate::vocab::{encode_labeled, EncodedExample, VocabError, Vocabulary};

/// Batches per progress callback during training.
pub const PROGRESS_EVERY: usize = 100;

const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("vocabulary digest {provided} does not match the checkpoint's {expected}")]
    VocabDigestMismatch { expected: String, provided: String },
}

/// Optimization hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub num_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    /// Defaults for an architecture: recurrent models train with batches of
    /// 512, the transformer with 64.
    pub fn for_model(config: &ModelConfig) -> Self {
        let batch_size = match config.variant {
            ModelVariant::MiniTransformer => 64,
            _ => 512,
        };
        Self {
            learning_rate: 1e-5,
            num_epochs: 3,
            batch_size,
            seed: 42,
            shuffle: true,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".to_string()));
        }
        if self.num_epochs == 0 {
            return Err(TrainError::BadConfig("num_epochs must be >= 1".to_string()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// What one training run did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_mean_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub examples_seen: usize,
    pub checkpoint: Option<String>,
}

/// Scores and labels retained alongside the aggregate report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Result of fine-tuning a checkpoint on a new corpus.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub config: ModelConfig,
    pub registry: ParamRegistry,
    pub train_report: TrainReport,
    pub eval_report: EvalReport,
    pub dropped_train: usize,
    pub dropped_test: usize,
}

/// The canonical progress line: `epoch=<e> batch=<b> loss=<mean so far>`.
pub fn progress_line(epoch: usize, batch: usize, mean_loss: f64) -> String {
    format!("epoch={epoch} batch={batch} loss={mean_loss:.6}")
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mini-batch training with a seeded shuffle per epoch (epoch index mixed
/// into the seed) and one Adam step per batch; the last short batch still
/// trains. Deterministic for a fixed seed.
pub fn train(
    registry: &mut ParamRegistry,
    config: &ModelConfig,
    corpus: &[EncodedExample],
    tconfig: &TrainConfig,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<TrainReport, TrainError> {
    tconfig.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let adam = AdamConfig::with_lr(tconfig.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tconfig.seed ^ 0xD80D_D80D_D80D_D80D);

    let mut epoch_mean_loss = Vec::with_capacity(tconfig.num_epochs);
    let mut epoch_seconds = Vec::with_capacity(tconfig.num_epochs);
    for epoch in 0..tconfig.num_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        if tconfig.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(tconfig.seed, epoch));
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_index, chunk) in order.chunks(tconfig.batch_size).enumerate() {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let labels: Vec<f64> = batch.iter().map(|e| e.label as f64).collect();

            registry.zero_grads();
            let mut tape = crate::tensor::Tape::new();
            let probabilities =
                forward(&mut tape, registry, config, &batch, Some(&mut dropout_rng))?;
            let loss = tape.bce_loss(probabilities, &labels)?;
            tape.backward(loss)?;
            let batch_loss = tape.value(loss)[0];
            let grads = tape.take_param_grads();
            drop(tape);

            registry.accumulate_grads(grads);
            registry.adam_step(&adam)?;

            loss_sum += batch_loss * batch.len() as f64;
            seen += batch.len();
            if (batch_index + 1).is_multiple_of(PROGRESS_EVERY) {
                progress(epoch + 1, batch_index + 1, loss_sum / seen as f64);
            }
        }
        epoch_mean_loss.push(loss_sum / seen as f64);
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok(TrainReport {
        epoch_mean_loss,
        epoch_seconds,
        examples_seen: corpus.len() * tconfig.num_epochs,
        checkpoint: None,
    })
}

/// Scores a corpus without mutating parameters; dropout stays off and raw
/// scores are retained for the rank-based metrics.
pub fn evaluate(
    registry: &ParamRegistry,
    config: &ModelConfig,
    corpus: &[EncodedExample],
    threshold: f64,
) -> Result<EvalOutcome, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut scores = Vec::with_capacity(corpus.len());
    for chunk in corpus.chunks(EVAL_BATCH) {
        let mut tape = crate::tensor::Tape::new();
        let probabilities = forward(&mut tape, registry, config, chunk, None)?;
        scores.extend_from_slice(tape.value(probabilities));
    }
    let labels: Vec<u8> = corpus.iter().map(|e| e.label).collect();
    let report = EvalReport::from_scores(&scores, &labels, threshold)?;
    Ok(EvalOutcome {
        report,
        scores,
        labels,
    })
}

/// Fine-tunes a checkpoint on a new split corpus under a freeze scenario,
/// then evaluates on the new test split. The corpus is cleaned and encoded
/// with the checkpoint's vocabulary, whose digest must match. Adam moments
/// restart unless `resume_moments` is set.
#[allow(clippy::too_many_arguments)]
pub fn transfer(
    checkpoint: Checkpoint,
    cleaning: &CleaningConfig,
    vocabulary: &Vocabulary,
    corpus: &SplitCorpus,
    scenario: TransferScenario,
    tconfig: &TrainConfig,
    threshold: f64,
    resume_moments: bool,
    progress: impl FnMut(usize, usize, f64),
) -> Result<TransferOutcome, TrainError> {
    let provided = vocabulary.digest();
    if provided != checkpoint.vocab_digest {
        return Err(TrainError::VocabDigestMismatch {
            expected: checkpoint.vocab_digest,
            provided,
        });
    }
    let max_len = checkpoint.config.max_len;
    let (train_set, dropped_train) = encode_labeled(&corpus.train, cleaning, vocabulary, max_len)?;
    let (test_set, dropped_test) = encode_labeled(&corpus.test, cleaning, vocabulary, max_len)?;

    let mut registry = checkpoint.registry;
    freeze_scenario(&mut registry, scenario)?;
    if !resume_moments {
        registry.reset_moments();
    }

    let train_report = train(
        &mut registry,
        &checkpoint.config,
        &train_set,
        tconfig,
        progress,
    )?;
    let evaluation = evaluate(&registry, &checkpoint.config, &test_set, threshold)?;

    Ok(TransferOutcome {
        config: checkpoint.config,
        registry,
        train_report,
        eval_report: evaluation.report,
        dropped_train,
        dropped_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_params;
    use crate::vocab::PAD_ID;

    fn synthetic_example(ids: &[u32], max_len: usize, label: u8) -> EncodedExample {
        let mut padded = ids.to_vec();
        let mut mask = vec![1u8; ids.len()];
        padded.resize(max_len, PAD_ID);
        mask.resize(max_len, 0);
        EncodedExample {
            ids: padded,
            mask,
            label,
        }
    }

    fn tiny_corpus(max_len: usize) -> Vec<EncodedExample> {
        // Token 2 marks positives, token 3 negatives; 4..8 are fillers.
        let mut out = Vec::new();
        for i in 0..12u32 {
            let filler = 4 + (i % 4);
            let trigger = if i % 2 == 0 { 2 } else { 3 };
            let ids = vec![filler, trigger, filler.wrapping_add(1).min(7)];
            out.push(synthetic_example(&ids, max_len, (i % 2 == 0) as u8));
        }
        out
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            max_len: 6,
            ..ModelConfig::basic_gru(10)
        }
    }

    fn tiny_tconfig() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            num_epochs: 3,
            batch_size: 4,
            seed: 42,
            shuffle: true,
        }
    }

    #[test]
    fn same_seed_trains_to_identical_parameters() {
        let config = tiny_config();
        let corpus = tiny_corpus(config.max_len);
        let mut a = build_params(&config, None, 42).unwrap();
        let mut b = build_params(&config, None, 42).unwrap();
        train(&mut a, &config, &corpus, &tiny_tconfig(), |_, _, _| {}).unwrap();
        train(&mut b, &config, &corpus, &tiny_tconfig(), |_, _, _| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let config = tiny_config();
        let corpus = tiny_corpus(config.max_len);
        let mut registry = build_params(&config, None, 42).unwrap();
        let before = registry.clone();
        let tconfig = TrainConfig {
            learning_rate: 0.0,
            ..tiny_tconfig()
        };
        train(&mut registry, &config, &corpus, &tconfig, |_, _, _| {}).unwrap();
        for i in 0..registry.len() {
            assert_eq!(registry.values(i), before.values(i), "param {i}");
        }
    }

    #[test]
    fn training_loss_decreases_on_learnable_task() {
        let config = tiny_config();
        let corpus = tiny_corpus(config.max_len);
        let mut registry = build_params(&config, None, 42).unwrap();
        let tconfig = TrainConfig {
            num_epochs: 12,
            ..tiny_tconfig()
        };
        let report = train(&mut registry, &config, &corpus, &tconfig, |_, _, _| {}).unwrap();
        assert_eq!(report.epoch_mean_loss.len(), 12);
        assert!(
            report.epoch_mean_loss.last().unwrap() < report.epoch_mean_loss.first().unwrap(),
            "losses {:?}",
            report.epoch_mean_loss
        );
    }

    #[test]
    fn empty_corpus_rejected() {
        let config = tiny_config();
        let mut registry = build_params(&config, None, 1).unwrap();
        assert!(matches!(
            train(&mut registry, &config, &[], &tiny_tconfig(), |_, _, _| {}),
            Err(TrainError::EmptyCorpus)
        ));
        assert!(matches!(
            evaluate(&registry, &config, &[], 0.5),
            Err(TrainError::EmptyCorpus)
        ));
    }

    #[test]
    fn evaluate_is_pure_and_repeatable() {
        use crate::models::{save_checkpoint, Provenance};

        let config = tiny_config();
        let corpus = tiny_corpus(config.max_len);
        let registry = build_params(&config, None, 42).unwrap();

        // Serialized parameters are byte-identical across an evaluation.
        let dir = tempfile::tempdir().unwrap();
        let save = |name: &str, registry: &crate::tensor::ParamRegistry| {
            let path = dir.path().join(name);
            let provenance = Provenance {
                dataset_id: "tiny".to_string(),
                epochs: 0,
                seed: 42,
            };
            save_checkpoint(&path, registry, &config, "digest", &provenance).unwrap();
            std::fs::read(path).unwrap()
        };
        let before = save("before.ckpt", &registry);
        let a = evaluate(&registry, &config, &corpus, 0.5).unwrap();
        let b = evaluate(&registry, &config, &corpus, 0.5).unwrap();
        let after = save("after.ckpt", &registry);
        assert_eq!(a.report, b.report);
        assert_eq!(a.scores, b.scores);
        assert_eq!(before, after);
    }

    #[test]
    fn perfect_and_constant_scorers() {
        // Perfect scorer: score equals label.
        let scores = [1.0, 0.0, 1.0, 0.0];
        let labels = [1u8, 0, 1, 0];
        let report = EvalReport::from_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!(report.accuracy, Some(1.0));
        assert_eq!(report.auroc, Some(1.0));

        // Constant 0.5 with a >= threshold predicts everything positive.
        let scores = [0.5; 4];
        let report = EvalReport::from_scores(&scores, &labels, 0.5).unwrap();
        assert_eq!(report.counts.tp, 2);
        assert_eq!(report.counts.fp, 2);
        assert_eq!(report.precision, Some(0.5));
    }

    #[test]
    fn progress_fires_every_hundred_batches() {
        let config = tiny_config();
        // 250 examples at batch size 2 = 125 batches per epoch.
        let corpus: Vec<EncodedExample> = (0..250)
            .map(|i| synthetic_example(&[2 + (i % 2) as u32, 4], config.max_len, (i % 2) as u8))
            .collect();
        let mut registry = build_params(&config, None, 1).unwrap();
        let tconfig = TrainConfig {
            num_epochs: 1,
            batch_size: 2,
            ..tiny_tconfig()
        };
        let mut calls = Vec::new();
        train(&mut registry, &config, &corpus, &tconfig, |e, b, l| {
            calls.push((e, b, l));
        })
        .unwrap();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].0, 1);
        assert_eq!(calls[0].1, 100);
        assert!(calls[0].2.is_finite());
    }

    #[test]
    fn progress_line_format() {
        assert_eq!(
            progress_line(2, 300, 0.25),
            "epoch=2 batch=300 loss=0.250000"
        );
    }
}
