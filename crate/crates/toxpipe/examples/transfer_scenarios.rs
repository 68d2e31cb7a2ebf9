//! The three layer-freezing transfer scenarios on a source -> target pair
//! with a shifted trigger vocabulary.
//!
//! Run with `cargo run --example transfer_scenarios`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use toxpipe::corpus::{split, LabeledExample, Source};
use toxpipe::models::{
    build_params, load_checkpoint, save_checkpoint, ModelConfig, Provenance, TransferScenario,
};
use toxpipe::preprocess::{clean, CleaningConfig};
use toxpipe::training::{evaluate, train, transfer, TrainConfig};
use toxpipe::vocab::{encode_labeled, Vocabulary};

const FILLERS: &[&str] = &[
    "flower", "river", "mountain", "cloud", "garden", "window", "bridge", "lantern",
];

fn corpus(seed: u64, triggers: &[&str]) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..240)
        .map(|i| {
            let positive = i % 2 == 0;
            let len = rng.random_range(3..=6usize);
            let mut words: Vec<&str> = (0..len)
                .map(|_| FILLERS[rng.random_range(0..FILLERS.len())])
                .collect();
            if positive {
                words[rng.random_range(0..len)] = triggers[rng.random_range(0..triggers.len())];
            }
            LabeledExample {
                text: words.join(" "),
                label: u8::from(positive),
                source: Source::Jigsaw,
            }
        })
        .collect()
}

fn main() {
    let cleaning = CleaningConfig::bundled();

    // Source task with its own trigger words.
    let source = split(&corpus(1, &["toxic", "hateful"]), 0.2, 42).unwrap();
    let tokens: Vec<_> = source
        .train
        .iter()
        .map(|e| clean(&e.text, &cleaning))
        .collect();
    let vocabulary = Vocabulary::build(&tokens, 1, 1000).unwrap();
    let config = ModelConfig {
        vocab_size: vocabulary.size(),
        emb_dim: 8,
        hidden_dim: 8,
        max_len: 8,
        dropout_p: 0.1,
        ..ModelConfig::pooled_bilstm(vocabulary.size())
    };
    let (train_set, _) = encode_labeled(&source.train, &cleaning, &vocabulary, 8).unwrap();
    let mut registry = build_params(&config, None, 42).unwrap();
    let tconfig = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 12,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };
    train(&mut registry, &config, &train_set, &tconfig, |_, _, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("source.ckpt");
    save_checkpoint(
        &path,
        &registry,
        &config,
        &vocabulary.digest(),
        &Provenance {
            dataset_id: "source".to_string(),
            epochs: 12,
            seed: 42,
        },
    )
    .unwrap();

    // Target task: new trigger words the source never saw.
    let target = split(&corpus(2, &["venomspit", "rageful"]), 0.25, 43).unwrap();
    let (target_test, _) = encode_labeled(&target.test, &cleaning, &vocabulary, 8).unwrap();
    let zero_shot = evaluate(&registry, &config, &target_test, 0.5).unwrap();
    println!(
        "zero-shot accuracy on the target test split: {:.3}\n",
        zero_shot.report.accuracy.unwrap()
    );

    let fine_tune = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 30,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };
    for scenario in [
        TransferScenario::All,
        TransferScenario::FrozenEmbeddings,
        TransferScenario::FrozenEmbeddingsHalfEncoder,
    ] {
        let checkpoint = load_checkpoint(&path).unwrap();
        let outcome = transfer(
            checkpoint,
            &cleaning,
            &vocabulary,
            &target,
            scenario,
            &fine_tune,
            0.5,
            false,
            |_, _, _| {},
        )
        .unwrap();
        println!(
            "{:28} accuracy {:.3}  (frozen groups: {:?})",
            scenario.cli_name(),
            outcome.eval_report.accuracy.unwrap(),
            outcome.registry.frozen_groups()
        );
    }
}
