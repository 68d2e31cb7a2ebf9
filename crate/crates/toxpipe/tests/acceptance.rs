//! Acceptance suite. One test per criterion; each prints a `ACCEPTANCE
//! <name>: PASS` line (visible with `--nocapture`). Data-dependent
//! statistics are skipped when the dataset files are not provided.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use toxpipe::corpus::{
    class_balance, map_records, parse_csv, split, take_prefix, LabeledExample, Schema, Source,
};
use toxpipe::metrics::{accuracy, auroc, auroc_by_pair_enumeration, confusion, precision, recall};
use toxpipe::models::{
    build_params, count_params, forward, freeze_scenario, load_checkpoint, save_checkpoint,
    Checkpoint, ModelConfig, ModelVariant, Provenance, TransferScenario,
};
use toxpipe::preprocess::CleaningConfig;
use toxpipe::tensor::gradcheck::{finite_difference_grads, relative_error};
use toxpipe::tensor::{ParamRegistry, Tape, TensorData, TensorError, Var};
use toxpipe::training::{evaluate, train, transfer, TrainConfig};
use toxpipe::vocab::{encode, encode_labeled, EncodedExample, Vocabulary, PAD_ID};

const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;

fn pass(name: &str) {
    println!("ACCEPTANCE {name}: PASS");
}

// -------------------------------------------------------------------------
// Gradient oracle
// -------------------------------------------------------------------------

fn bind_all<'p>(tape: &mut Tape<'p>, registry: &'p ParamRegistry) -> Vec<Var> {
    (0..registry.len())
        .map(|i| tape.param(registry, i, true))
        .collect()
}

/// Checks every parameter of `registry` against central finite differences
/// of the scalar produced by `build`.
fn check_graph(
    label: &str,
    registry: &mut ParamRegistry,
    build: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var, TensorError>,
) {
    let mut tape = Tape::new();
    let vars = bind_all(&mut tape, registry);
    let loss = build(&mut tape, &vars).expect(label);
    tape.backward(loss).expect(label);
    let mut analytic: Vec<Vec<f64>> = (0..registry.len())
        .map(|i| vec![0.0; registry.values(i).len()])
        .collect();
    for (index, grad) in tape.take_param_grads() {
        analytic[index] = grad;
    }
    drop(tape);

    let mut worst = 0.0f64;
    for (index, expected) in analytic.iter().enumerate() {
        let numeric = finite_difference_grads(registry, index, FD_STEP, |registry| {
            let mut tape = Tape::new();
            let vars = bind_all(&mut tape, registry);
            let loss = build(&mut tape, &vars)?;
            Ok::<f64, TensorError>(tape.value(loss)[0])
        })
        .expect(label);
        for (&a, &n) in expected.iter().zip(&numeric) {
            worst = worst.max(relative_error(a, n));
        }
    }
    assert!(
        worst <= GRAD_TOLERANCE,
        "{label}: max relative error {worst:.3e}"
    );
}

fn seeded_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.2..1.2)).collect()
}

/// Values bounded away from zero, for kinked ops like relu.
fn seeded_values_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let magnitude = rng.random_range(0.2..1.2);
            if rng.random::<bool>() {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

fn registry_with(shapes: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamRegistry {
    let mut registry = ParamRegistry::new();
    for (name, shape, values) in shapes {
        registry
            .register("test", name, shape.clone(), values.clone())
            .unwrap();
    }
    registry
}

/// Reduces any tensor to a scalar with fixed random weights, so every
/// output element influences the loss differently.
fn weighted_sum(tape: &mut Tape<'_>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = tape.constant(TensorData::new(shape, seeded_values(&mut rng, n))?);
    let weighted = tape.mul(x, weights)?;
    Ok(tape.sum(weighted))
}

#[test]
fn acceptance_gradient_oracle_primitives() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // matmul
    let mut registry = registry_with(&[
        ("a", vec![3, 4], seeded_values(&mut rng, 12)),
        ("b", vec![4, 2], seeded_values(&mut rng, 8)),
    ]);
    check_graph("matmul", &mut registry, |tape, vars| {
        let c = tape.matmul(vars[0], vars[1])?;
        weighted_sum(tape, c, 1)
    });

    // bmm
    let mut registry = registry_with(&[
        ("a", vec![2, 3, 2], seeded_values(&mut rng, 12)),
        ("b", vec![2, 2, 3], seeded_values(&mut rng, 12)),
    ]);
    check_graph("bmm", &mut registry, |tape, vars| {
        let c = tape.bmm(vars[0], vars[1])?;
        weighted_sum(tape, c, 2)
    });

    // bmm_nt
    let mut registry = registry_with(&[
        ("a", vec![2, 3, 2], seeded_values(&mut rng, 12)),
        ("b", vec![2, 4, 2], seeded_values(&mut rng, 16)),
    ]);
    check_graph("bmm_nt", &mut registry, |tape, vars| {
        let c = tape.bmm_nt(vars[0], vars[1])?;
        weighted_sum(tape, c, 3)
    });

    // add / mul
    let mut registry = registry_with(&[
        ("a", vec![2, 3], seeded_values(&mut rng, 6)),
        ("b", vec![2, 3], seeded_values(&mut rng, 6)),
    ]);
    check_graph("add", &mut registry, |tape, vars| {
        let c = tape.add(vars[0], vars[1])?;
        weighted_sum(tape, c, 4)
    });
    let mut registry = registry_with(&[
        ("a", vec![2, 3], seeded_values(&mut rng, 6)),
        ("b", vec![2, 3], seeded_values(&mut rng, 6)),
    ]);
    check_graph("mul", &mut registry, |tape, vars| {
        let c = tape.mul(vars[0], vars[1])?;
        weighted_sum(tape, c, 5)
    });

    // add_bias with a two-axis suffix
    let mut registry = registry_with(&[
        ("x", vec![2, 3, 4], seeded_values(&mut rng, 24)),
        ("b", vec![3, 4], seeded_values(&mut rng, 12)),
    ]);
    check_graph("add_bias", &mut registry, |tape, vars| {
        let c = tape.add_bias(vars[0], vars[1])?;
        weighted_sum(tape, c, 6)
    });

    // scale_rows
    let mut registry = registry_with(&[
        ("x", vec![3, 4], seeded_values(&mut rng, 12)),
        ("c", vec![3], seeded_values(&mut rng, 3)),
    ]);
    check_graph("scale_rows", &mut registry, |tape, vars| {
        let c = tape.scale_rows(vars[0], vars[1])?;
        weighted_sum(tape, c, 7)
    });

    // affine
    let mut registry = registry_with(&[("x", vec![2, 3], seeded_values(&mut rng, 6))]);
    check_graph("affine", &mut registry, |tape, vars| {
        let c = tape.affine(vars[0], 1.7, -0.3);
        weighted_sum(tape, c, 8)
    });

    // sigmoid / tanh / relu
    let mut registry = registry_with(&[("x", vec![2, 5], seeded_values(&mut rng, 10))]);
    check_graph("sigmoid", &mut registry, |tape, vars| {
        let c = tape.sigmoid(vars[0]);
        weighted_sum(tape, c, 9)
    });
    let mut registry = registry_with(&[("x", vec![2, 5], seeded_values(&mut rng, 10))]);
    check_graph("tanh", &mut registry, |tape, vars| {
        let c = tape.tanh(vars[0]);
        weighted_sum(tape, c, 10)
    });
    let mut registry = registry_with(&[("x", vec![2, 5], seeded_values_off_zero(&mut rng, 10))]);
    check_graph("relu", &mut registry, |tape, vars| {
        let c = tape.relu(vars[0]);
        weighted_sum(tape, c, 11)
    });

    // masked_softmax
    let mut registry = registry_with(&[("x", vec![2, 2, 4], seeded_values(&mut rng, 16))]);
    let mask = vec![1, 1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1];
    check_graph("masked_softmax", &mut registry, move |tape, vars| {
        let c = tape.masked_softmax(vars[0], mask.clone())?;
        weighted_sum(tape, c, 12)
    });

    // dropout with a fixed stream so every finite-difference evaluation
    // sees the same keep mask
    let mut registry = registry_with(&[("x", vec![3, 4], seeded_values(&mut rng, 12))]);
    check_graph("dropout", &mut registry, |tape, vars| {
        let mut drop_rng = ChaCha8Rng::seed_from_u64(77);
        let c = tape.dropout(vars[0], 0.4, &mut drop_rng)?;
        weighted_sum(tape, c, 13)
    });

    // embedding_lookup
    let mut registry = registry_with(&[("table", vec![5, 3], seeded_values(&mut rng, 15))]);
    check_graph("embedding_lookup", &mut registry, |tape, vars| {
        let c = tape.embedding_lookup(vars[0], &[0, 2, 4, 2], &[2, 2])?;
        weighted_sum(tape, c, 14)
    });

    // max_over_time / mean_over_time
    let mask = vec![1, 1, 0, 1, 0, 1];
    let mut registry = registry_with(&[("x", vec![2, 3, 4], seeded_values(&mut rng, 24))]);
    let pool_mask = mask.clone();
    check_graph("max_over_time", &mut registry, move |tape, vars| {
        let c = tape.max_over_time(vars[0], &pool_mask)?;
        weighted_sum(tape, c, 15)
    });
    let mut registry = registry_with(&[("x", vec![2, 3, 4], seeded_values(&mut rng, 24))]);
    let pool_mask = mask.clone();
    check_graph("mean_over_time", &mut registry, move |tape, vars| {
        let c = tape.mean_over_time(vars[0], &pool_mask)?;
        weighted_sum(tape, c, 16)
    });

    // concat_last / stack_time / time_slice / gather_time / slice_cols
    let mut registry = registry_with(&[
        ("a", vec![2, 3], seeded_values(&mut rng, 6)),
        ("b", vec![2, 2], seeded_values(&mut rng, 4)),
    ]);
    check_graph("concat_last", &mut registry, |tape, vars| {
        let c = tape.concat_last(&[vars[0], vars[1]])?;
        weighted_sum(tape, c, 17)
    });
    let mut registry = registry_with(&[
        ("s0", vec![2, 3], seeded_values(&mut rng, 6)),
        ("s1", vec![2, 3], seeded_values(&mut rng, 6)),
        ("s2", vec![2, 3], seeded_values(&mut rng, 6)),
    ]);
    check_graph("stack_time", &mut registry, |tape, vars| {
        let c = tape.stack_time(vars)?;
        weighted_sum(tape, c, 18)
    });
    let mut registry = registry_with(&[("x", vec![2, 4, 3], seeded_values(&mut rng, 24))]);
    check_graph("time_slice", &mut registry, |tape, vars| {
        let c = tape.time_slice(vars[0], 2)?;
        weighted_sum(tape, c, 19)
    });
    let mut registry = registry_with(&[("x", vec![2, 4, 3], seeded_values(&mut rng, 24))]);
    check_graph("gather_time", &mut registry, |tape, vars| {
        let c = tape.gather_time(vars[0], &[1, 3])?;
        weighted_sum(tape, c, 20)
    });
    let mut registry = registry_with(&[("x", vec![3, 6], seeded_values(&mut rng, 18))]);
    check_graph("slice_cols", &mut registry, |tape, vars| {
        let c = tape.slice_cols(vars[0], 2, 3)?;
        weighted_sum(tape, c, 21)
    });

    // reshape / swap_axes_1_2
    let mut registry = registry_with(&[("x", vec![2, 6], seeded_values(&mut rng, 12))]);
    check_graph("reshape", &mut registry, |tape, vars| {
        let c = tape.reshape(vars[0], vec![3, 4])?;
        weighted_sum(tape, c, 22)
    });
    let mut registry = registry_with(&[("x", vec![2, 3, 2, 2], seeded_values(&mut rng, 24))]);
    check_graph("swap_axes_1_2", &mut registry, |tape, vars| {
        let c = tape.swap_axes_1_2(vars[0])?;
        weighted_sum(tape, c, 23)
    });

    // layer_norm
    let mut registry = registry_with(&[
        ("x", vec![3, 4], seeded_values(&mut rng, 12)),
        ("gain", vec![4], seeded_values(&mut rng, 4)),
        ("bias", vec![4], seeded_values(&mut rng, 4)),
    ]);
    check_graph("layer_norm", &mut registry, |tape, vars| {
        let c = tape.layer_norm(vars[0], vars[1], vars[2])?;
        weighted_sum(tape, c, 24)
    });

    // bce_loss through a sigmoid
    let mut registry = registry_with(&[("logits", vec![4], seeded_values(&mut rng, 4))]);
    check_graph("bce_loss", &mut registry, |tape, vars| {
        let p = tape.sigmoid(vars[0]);
        tape.bce_loss(p, &[1.0, 0.0, 1.0, 0.0])
    });

    pass("gradient oracle (primitives)");
    assert!(
        started.elapsed().as_secs() < 120,
        "primitive gradient checks too slow"
    );
}

fn toy_batch(max_len: usize) -> Vec<EncodedExample> {
    let make = |tokens: &[u32], label: u8| {
        let mut ids = tokens.to_vec();
        let mut mask = vec![1u8; tokens.len()];
        ids.resize(max_len, PAD_ID);
        mask.resize(max_len, 0);
        EncodedExample { ids, mask, label }
    };
    vec![make(&[2, 5, 7, 3, 9], 1), make(&[4, 6, 8], 0)]
}

fn toy_model_configs() -> Vec<ModelConfig> {
    vec![
        ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            max_len: 8,
            ..ModelConfig::basic_lstm(11)
        },
        ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            max_len: 8,
            ..ModelConfig::basic_gru(11)
        },
        ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            max_len: 8,
            ..ModelConfig::pooled_bilstm(11)
        },
        ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 8,
            ..ModelConfig::mini_transformer(11, false)
        },
        ModelConfig {
            emb_dim: 8,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 8,
            ..ModelConfig::mini_transformer(11, true)
        },
    ]
}

fn run_model<'p>(
    registry: &'p ParamRegistry,
    config: &ModelConfig,
    batch: &[EncodedExample],
    labels: &[f64],
) -> Result<(Tape<'p>, Var), toxpipe::models::ModelError> {
    let mut tape = Tape::new();
    let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
    let needs_dropout = config.variant == ModelVariant::PooledBiLstm;
    let probs = forward(
        &mut tape,
        registry,
        config,
        batch,
        needs_dropout.then_some(&mut drop_rng),
    )?;
    let loss = tape.bce_loss(probs, labels)?;
    Ok((tape, loss))
}

#[test]
fn acceptance_gradient_oracle_models() {
    let started = Instant::now();
    // Batch 2, length 8, hidden 8 for every variant, including dropout on
    // the pooled model (fixed stream per evaluation).
    for config in toy_model_configs() {
        let batch = toy_batch(config.max_len);
        let labels: Vec<f64> = batch.iter().map(|e| e.label as f64).collect();
        let mut registry = build_params(&config, None, 31).unwrap();
        // Check at a generic point: fresh initialization leaves biases at
        // zero, which parks relu inputs and pooling ties right on their
        // kinks where central differences measure the kink rather than
        // the derivative.
        let mut jitter = ChaCha8Rng::seed_from_u64(4);
        for i in 0..registry.len() {
            for value in registry.values_mut(i) {
                *value += jitter.random_range(-0.2..0.2);
            }
        }

        let (mut tape, loss) = run_model(&registry, &config, &batch, &labels).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic: Vec<Vec<f64>> = (0..registry.len())
            .map(|i| vec![0.0; registry.values(i).len()])
            .collect();
        for (index, grad) in tape.take_param_grads() {
            analytic[index] = grad;
        }
        drop(tape);

        let mut worst = 0.0f64;
        for (index, expected) in analytic.iter().enumerate() {
            let numeric = finite_difference_grads(&mut registry, index, FD_STEP, |registry| {
                let (tape, loss) = run_model(registry, &config, &batch, &labels)?;
                Ok::<f64, toxpipe::models::ModelError>(tape.value(loss)[0])
            })
            .unwrap();
            for (&a, &n) in expected.iter().zip(&numeric) {
                worst = worst.max(relative_error(a, n));
            }
        }
        assert!(
            worst <= GRAD_TOLERANCE,
            "{:?} (causal {}): max relative error {worst:.3e}",
            config.variant,
            config.causal
        );
        println!(
            "  gradient oracle {:?} causal={}: max rel err {worst:.3e}",
            config.variant, config.causal
        );
    }
    pass("gradient oracle (model variants)");
    assert!(
        started.elapsed().as_secs() < 120,
        "model gradient checks too slow"
    );
}

// -------------------------------------------------------------------------
// Metric oracle
// -------------------------------------------------------------------------

#[test]
fn acceptance_metric_oracle() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for instance in 0..200 {
        let n = rng.random_range(2..=1000);
        let quantize = instance % 3 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if quantize {
                    // Grid scores force ties.
                    rng.random_range(0..=20) as f64 / 20.0
                } else {
                    rng.random_range(0.0..=1.0)
                }
            })
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();

        let fast = auroc(&scores, &labels).unwrap();
        let slow = auroc_by_pair_enumeration(&scores, &labels);
        match (fast, slow) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "instance {instance}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "instance {instance}"),
        }

        let threshold = rng.random_range(0.0..=1.0);
        let counts = confusion(&scores, &labels, threshold).unwrap();
        let tp = scores
            .iter()
            .zip(&labels)
            .filter(|&(&s, &l)| s >= threshold && l == 1)
            .count();
        let tn = scores
            .iter()
            .zip(&labels)
            .filter(|&(&s, &l)| s < threshold && l == 0)
            .count();
        let fp = scores
            .iter()
            .zip(&labels)
            .filter(|&(&s, &l)| s >= threshold && l == 0)
            .count();
        let fn_ = n - tp - tn - fp;
        assert_eq!(
            (counts.tp, counts.tn, counts.fp, counts.fn_),
            (tp, tn, fp, fn_)
        );

        let naive_accuracy = (tp + tn) as f64 / n as f64;
        assert_eq!(accuracy(&counts), Some(naive_accuracy));
        let naive_precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        assert_eq!(precision(&counts), naive_precision);
        let naive_recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        assert_eq!(recall(&counts), naive_recall);
    }
    pass("metric oracle");
    assert!(started.elapsed().as_secs() < 60, "metric oracle too slow");
}

// -------------------------------------------------------------------------
// Overfit check
// -------------------------------------------------------------------------

/// 64 examples over a 24-token vocabulary; ids 20 and 21 are the positive
/// triggers.
fn trigger_corpus(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<EncodedExample> {
    let mut corpus = Vec::with_capacity(64);
    for i in 0..64 {
        let positive = i % 2 == 0;
        let len = rng.random_range(3..=8usize);
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(2..18)).collect();
        if positive {
            let at = rng.random_range(0..tokens.len());
            tokens[at] = if rng.random::<bool>() { 20 } else { 21 };
        }
        let mut ids = tokens;
        let mut mask = vec![1u8; ids.len()];
        ids.resize(max_len, PAD_ID);
        mask.resize(max_len, 0);
        corpus.push(EncodedExample {
            ids,
            mask,
            label: u8::from(positive),
        });
    }
    corpus
}

fn overfit_configs() -> Vec<(ModelConfig, f64)> {
    vec![
        (
            ModelConfig {
                emb_dim: 16,
                hidden_dim: 16,
                max_len: 10,
                ..ModelConfig::basic_lstm(24)
            },
            1e-2,
        ),
        (
            ModelConfig {
                emb_dim: 16,
                hidden_dim: 16,
                max_len: 10,
                ..ModelConfig::basic_gru(24)
            },
            1e-2,
        ),
        (
            ModelConfig {
                emb_dim: 8,
                hidden_dim: 8,
                max_len: 10,
                ..ModelConfig::pooled_bilstm(24)
            },
            1e-2,
        ),
        (
            ModelConfig {
                emb_dim: 16,
                hidden_dim: 16,
                num_heads: 4,
                ffn_dim: 32,
                max_len: 10,
                ..ModelConfig::mini_transformer(24, false)
            },
            1e-3,
        ),
    ]
}

#[test]
fn acceptance_overfit_trigger_corpus() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let corpus = trigger_corpus(&mut rng, 10);

    for (config, lr) in overfit_configs() {
        let mut registry = build_params(&config, None, 42).unwrap();
        let mut epochs_used = 0;
        let mut reached = None;
        while epochs_used < 300 {
            let tconfig = TrainConfig {
                learning_rate: lr,
                num_epochs: 10,
                batch_size: 16,
                seed: 42 + epochs_used as u64,
                shuffle: true,
            };
            train(&mut registry, &config, &corpus, &tconfig, |_, _, _| {}).unwrap();
            epochs_used += 10;
            let outcome = evaluate(&registry, &config, &corpus, 0.5).unwrap();
            let acc = outcome.report.accuracy.unwrap();
            if acc >= 0.95 {
                reached = Some((epochs_used, acc));
                break;
            }
        }
        let (epochs, acc) = reached.unwrap_or_else(|| {
            panic!(
                "{:?} did not reach 0.95 training accuracy within 300 epochs at lr {lr}",
                config.variant
            )
        });
        println!(
            "  overfit {:?}: accuracy {acc:.3} after {epochs} epochs",
            config.variant
        );
    }
    pass("overfit check");
    assert!(
        started.elapsed().as_secs() < 300,
        "overfit check exceeded five minutes"
    );
}

/// Behavioral probe on the pooled model: once the max-pooling branch has
/// learned a trigger token, inserting that token anywhere in a clean text
/// raises the score.
#[test]
fn pooled_trigger_token_raises_score_at_any_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let corpus = trigger_corpus(&mut rng, 10);
    let config = ModelConfig {
        emb_dim: 8,
        hidden_dim: 8,
        max_len: 10,
        ..ModelConfig::pooled_bilstm(24)
    };
    let mut registry = build_params(&config, None, 42).unwrap();
    let tconfig = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 120,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };
    train(&mut registry, &config, &corpus, &tconfig, |_, _, _| {}).unwrap();

    let clean_tokens: Vec<u32> = vec![3, 7, 11, 15, 5, 9];
    let encode_tokens = |tokens: &[u32]| {
        let mut ids = tokens.to_vec();
        let mut mask = vec![1u8; ids.len()];
        ids.resize(10, PAD_ID);
        mask.resize(10, 0);
        EncodedExample {
            ids,
            mask,
            label: 0,
        }
    };

    let baseline = evaluate(&registry, &config, &[encode_tokens(&clean_tokens)], 0.5)
        .unwrap()
        .scores[0];
    for position in 0..clean_tokens.len() {
        let mut with_trigger = clean_tokens.clone();
        with_trigger[position] = 20;
        let score = evaluate(&registry, &config, &[encode_tokens(&with_trigger)], 0.5)
            .unwrap()
            .scores[0];
        assert!(
            score > baseline,
            "trigger at position {position}: {score:.4} vs baseline {baseline:.4}"
        );
    }
}

// -------------------------------------------------------------------------
// Freezing invariants and zero-shot equality
// -------------------------------------------------------------------------

fn words_corpus(
    rng: &mut ChaCha8Rng,
    n: usize,
    triggers: &[&str],
    fillers: &[&str],
) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let len = rng.random_range(3..=6usize);
            let mut words: Vec<&str> = (0..len)
                .map(|_| fillers[rng.random_range(0..fillers.len())])
                .collect();
            if positive {
                let at = rng.random_range(0..words.len());
                words[at] = triggers[rng.random_range(0..triggers.len())];
            }
            LabeledExample {
                text: words.join(" "),
                label: u8::from(positive),
                source: Source::Jigsaw,
            }
        })
        .collect()
}

const FILLERS: &[&str] = &[
    "flower", "river", "mountain", "cloud", "garden", "window", "bridge", "lantern", "meadow",
    "harbor",
];
const SOURCE_TRIGGERS: &[&str] = &["toxic", "hateful"];
// Unseen in the source corpus, so both encode as UNK: the new-trigger
// vocabulary the fine-tune has to pick up.
const TARGET_TRIGGERS: &[&str] = &["venomspit", "rageful"];

struct TransferFixture {
    checkpoint: Checkpoint,
    vocabulary: Vocabulary,
    cleaning: CleaningConfig,
    target: toxpipe::corpus::SplitCorpus,
    zero_shot_accuracy: f64,
}

fn transfer_fixture() -> TransferFixture {
    let cleaning = CleaningConfig::bundled();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // Source task: SOURCE_TRIGGERS mark positives; TARGET_TRIGGERS occur
    // only as neutral fillers, so the vocabulary knows them but the source
    // model never learns them as signals.
    let source = words_corpus(&mut rng, 240, SOURCE_TRIGGERS, FILLERS);
    let source_split = split(&source, 0.2, 42).unwrap();
    let tokens: Vec<_> = source_split
        .train
        .iter()
        .map(|e| toxpipe::preprocess::clean(&e.text, &cleaning))
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
    let (train_set, _) =
        encode_labeled(&source_split.train, &cleaning, &vocabulary, config.max_len).unwrap();
    let mut registry = build_params(&config, None, 42).unwrap();
    let tconfig = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 12,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };
    train(&mut registry, &config, &train_set, &tconfig, |_, _, _| {}).unwrap();

    // Target task: shifted trigger vocabulary.
    let target = words_corpus(&mut rng, 240, TARGET_TRIGGERS, FILLERS);
    let target_split = split(&target, 0.25, 43).unwrap();
    let (target_test, _) =
        encode_labeled(&target_split.test, &cleaning, &vocabulary, config.max_len).unwrap();
    let zero_shot = evaluate(&registry, &config, &target_test, 0.5).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("source.ckpt");
    save_checkpoint(
        &path,
        &registry,
        &config,
        &vocabulary.digest(),
        &Provenance {
            dataset_id: "synthetic-source".to_string(),
            epochs: tconfig.num_epochs,
            seed: 42,
        },
    )
    .unwrap();
    let checkpoint = load_checkpoint(&path).unwrap();

    TransferFixture {
        checkpoint,
        vocabulary,
        cleaning,
        target: target_split,
        zero_shot_accuracy: zero_shot.report.accuracy.unwrap(),
    }
}

#[test]
fn acceptance_freezing_invariants() {
    let fixture = transfer_fixture();
    let tconfig = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 10,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };

    for scenario in [
        TransferScenario::FrozenEmbeddings,
        TransferScenario::FrozenEmbeddingsHalfEncoder,
    ] {
        let before = fixture.checkpoint.registry.clone();
        let outcome = transfer(
            fixture.checkpoint.clone(),
            &fixture.cleaning,
            &fixture.vocabulary,
            &fixture.target,
            scenario,
            &tconfig,
            0.5,
            false,
            |_, _, _| {},
        )
        .unwrap();

        let frozen = outcome.registry.frozen_groups().clone();
        assert!(!frozen.is_empty());
        let mut any_unfrozen_changed = false;
        for i in 0..outcome.registry.len() {
            let group = outcome.registry.group(i).to_string();
            if frozen.contains(&group) {
                assert_eq!(
                    outcome.registry.values(i),
                    before.values(i),
                    "frozen parameter {} changed under {scenario:?}",
                    outcome.registry.name(i)
                );
            } else if outcome.registry.values(i) != before.values(i) {
                any_unfrozen_changed = true;
            }
        }
        assert!(any_unfrozen_changed, "{scenario:?} trained nothing");
    }

    // Zero learning rate under scenario `all` reproduces zero-shot
    // evaluation exactly.
    let zero_lr = TrainConfig {
        learning_rate: 0.0,
        ..tconfig
    };
    let outcome = transfer(
        fixture.checkpoint.clone(),
        &fixture.cleaning,
        &fixture.vocabulary,
        &fixture.target,
        TransferScenario::All,
        &zero_lr,
        0.5,
        false,
        |_, _, _| {},
    )
    .unwrap();
    let (target_test, _) = encode_labeled(
        &fixture.target.test,
        &fixture.cleaning,
        &fixture.vocabulary,
        fixture.checkpoint.config.max_len,
    )
    .unwrap();
    let zero_shot = evaluate(
        &fixture.checkpoint.registry,
        &fixture.checkpoint.config,
        &target_test,
        0.5,
    )
    .unwrap();
    assert_eq!(outcome.eval_report, zero_shot.report);
    pass("freezing invariants");
}

#[test]
fn acceptance_synthetic_transfer_direction() {
    let started = Instant::now();
    let fixture = transfer_fixture();
    let tconfig = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 40,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };

    println!("  zero-shot accuracy {:.3}", fixture.zero_shot_accuracy);
    for scenario in [
        TransferScenario::All,
        TransferScenario::FrozenEmbeddings,
        TransferScenario::FrozenEmbeddingsHalfEncoder,
    ] {
        let outcome = transfer(
            fixture.checkpoint.clone(),
            &fixture.cleaning,
            &fixture.vocabulary,
            &fixture.target,
            scenario,
            &tconfig,
            0.5,
            false,
            |_, _, _| {},
        )
        .unwrap();
        let accuracy = outcome.eval_report.accuracy.unwrap();
        println!("  {:?} accuracy {accuracy:.3}", scenario);
        assert!(
            accuracy > fixture.zero_shot_accuracy,
            "{scenario:?}: {accuracy:.3} not above zero-shot {:.3}",
            fixture.zero_shot_accuracy
        );
    }
    pass("synthetic transfer direction");
    assert!(
        started.elapsed().as_secs() < 300,
        "transfer direction check exceeded five minutes"
    );
}

// -------------------------------------------------------------------------
// Padding invariance
// -------------------------------------------------------------------------

#[test]
fn acceptance_padding_invariance() {
    let cleaning = CleaningConfig::bundled();
    let docs = [
        "garden rivers bloom around the quiet mountain paths",
        "toxic venomous words flood the harbor tonight",
        "lanterns glow",
    ];
    let tokens: Vec<_> = docs
        .iter()
        .map(|d| toxpipe::preprocess::clean(d, &cleaning))
        .collect();
    let vocabulary = Vocabulary::build(&tokens, 1, 100).unwrap();

    for mut config in toy_model_configs() {
        config.vocab_size = vocabulary.size();
        config.max_len = 128;
        let registry = build_params(&config, None, 11).unwrap();

        let narrow: Vec<EncodedExample> = tokens
            .iter()
            .map(|t| encode(t, &vocabulary, 32, 0))
            .collect();
        let wide: Vec<EncodedExample> = tokens
            .iter()
            .map(|t| encode(t, &vocabulary, 128, 0))
            .collect();

        let mut tape = Tape::new();
        let a = forward(&mut tape, &registry, &config, &narrow, None).unwrap();
        let a = tape.value(a).to_vec();
        let mut tape = Tape::new();
        let b = forward(&mut tape, &registry, &config, &wide, None).unwrap();
        let b = tape.value(b).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!(
                (x - y).abs() < 1e-6,
                "{:?} causal={}: {x} vs {y}",
                config.variant,
                config.causal
            );
        }
    }
    pass("padding invariance");
}

// -------------------------------------------------------------------------
// Determinism
// -------------------------------------------------------------------------

#[test]
fn acceptance_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(515);
    let corpus = trigger_corpus(&mut rng, 10);
    let config = ModelConfig {
        emb_dim: 8,
        hidden_dim: 8,
        max_len: 10,
        ..ModelConfig::basic_lstm(24)
    };
    let tconfig = TrainConfig {
        learning_rate: 1e-2,
        num_epochs: 3,
        batch_size: 16,
        seed: 42,
        shuffle: true,
    };

    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    let mut reports = Vec::new();
    for run in 0..2 {
        let mut registry = build_params(&config, None, 42).unwrap();
        train(&mut registry, &config, &corpus, &tconfig, |_, _, _| {}).unwrap();
        let path = dir.path().join(format!("run-{run}.ckpt"));
        save_checkpoint(
            &path,
            &registry,
            &config,
            "digest",
            &Provenance {
                dataset_id: "trigger".to_string(),
                epochs: tconfig.num_epochs,
                seed: 42,
            },
        )
        .unwrap();
        reports.push(evaluate(&registry, &config, &corpus, 0.5).unwrap().report);
        paths.push(path);
    }
    assert_eq!(
        std::fs::read(&paths[0]).unwrap(),
        std::fs::read(&paths[1]).unwrap(),
        "checkpoints differ between identical runs"
    );
    assert_eq!(reports[0], reports[1]);
    pass("determinism");
}

// -------------------------------------------------------------------------
// Parameter accounting
// -------------------------------------------------------------------------

#[test]
fn acceptance_parameter_accounting() {
    let started = Instant::now();
    let bert_shaped = ModelConfig {
        variant: ModelVariant::MiniTransformer,
        vocab_size: 30_522,
        emb_dim: 768,
        hidden_dim: 768,
        num_blocks: 12,
        num_heads: 12,
        ffn_dim: 3072,
        dropout_p: 0.1,
        causal: false,
        max_len: 512,
    };
    let count = count_params(&bert_shaped);
    assert!(
        (105_000_000..=115_000_000).contains(&count),
        "bidirectional-base shape: {count}"
    );
    println!("  bidirectional-base-shaped config: {count} parameters");

    let gpt2_shaped = ModelConfig {
        vocab_size: 50_257,
        causal: true,
        max_len: 1024,
        ..bert_shaped
    };
    let count = count_params(&gpt2_shaped);
    assert!(
        (115_000_000..=125_000_000).contains(&count),
        "causal-base shape: {count}"
    );
    println!("  causal-base-shaped config: {count} parameters");
    pass("parameter accounting");
    assert!(started.elapsed().as_secs() < 1);
}

// -------------------------------------------------------------------------
// Dataset statistics (skipped without real data)
// -------------------------------------------------------------------------

fn check_fraction(name: &str, actual: f64, expected: f64) {
    assert!(
        (actual - expected).abs() <= 0.005,
        "{name}: positive fraction {actual:.4}, expected {expected:.4} +- 0.005"
    );
}

#[test]
fn acceptance_dataset_statistics() {
    let mut checked = 0;

    if let Ok(path) = std::env::var("TOXPIPE_JIGSAW_CSV") {
        let parsed = parse_csv(Path::new(&path), Schema::Jigsaw).unwrap();
        let corpus = map_records(&parsed.records, Schema::Jigsaw, 0.5).unwrap();
        assert_eq!(
            corpus.len() + parsed.dropped_empty_text,
            1_804_874,
            "jigsaw corpus size"
        );
        let head = take_prefix(&corpus, 600_000);
        let balance = class_balance(&head).unwrap();
        check_fraction("jigsaw first 600k", balance.positive_fraction, 0.08);
        println!(
            "  jigsaw: {} rows, first-600k positive fraction {:.4}",
            corpus.len(),
            balance.positive_fraction
        );
        checked += 1;
    } else {
        println!("ACCEPTANCE dataset statistics (jigsaw): SKIP (set TOXPIPE_JIGSAW_CSV)");
    }

    if let Ok(path) = std::env::var("TOXPIPE_DAVIDSON_CSV") {
        let parsed = parse_csv(Path::new(&path), Schema::Davidson).unwrap();
        let corpus = map_records(&parsed.records, Schema::Davidson, 0.5).unwrap();
        assert!(
            (5_100..=6_100).contains(&corpus.len()),
            "davidson filtered rows: {}",
            corpus.len()
        );
        let balance = class_balance(&corpus).unwrap();
        check_fraction("davidson", balance.positive_fraction, 0.256);
        println!(
            "  davidson: {} rows, positive fraction {:.4}",
            corpus.len(),
            balance.positive_fraction
        );
        checked += 1;
    } else {
        println!("ACCEPTANCE dataset statistics (davidson): SKIP (set TOXPIPE_DAVIDSON_CSV)");
    }

    if let Ok(path) = std::env::var("TOXPIPE_HASOC_CSV") {
        let parsed = parse_csv(Path::new(&path), Schema::Hasoc).unwrap();
        let corpus = map_records(&parsed.records, Schema::Hasoc, 0.5).unwrap();
        assert!(
            (4_200..=5_200).contains(&corpus.len()),
            "hasoc filtered rows: {}",
            corpus.len()
        );
        let balance = class_balance(&corpus).unwrap();
        check_fraction("hasoc", balance.positive_fraction, 0.244);
        println!(
            "  hasoc: {} rows, positive fraction {:.4}",
            corpus.len(),
            balance.positive_fraction
        );
        checked += 1;
    } else {
        println!("ACCEPTANCE dataset statistics (hasoc): SKIP (set TOXPIPE_HASOC_CSV)");
    }

    if checked > 0 {
        pass("dataset statistics");
    }
}

// -------------------------------------------------------------------------
// Frozen groups really are excluded from Adam, end to end
// -------------------------------------------------------------------------

#[test]
fn freezing_survives_checkpoint_round_trip() {
    let fixture = transfer_fixture();
    let mut registry = fixture.checkpoint.registry.clone();
    freeze_scenario(&mut registry, TransferScenario::FrozenEmbeddingsHalfEncoder).unwrap();
    let expected: BTreeSet<String> = ["embeddings".to_string(), "encoder.0".to_string()].into();
    assert_eq!(registry.frozen_groups(), &expected);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frozen.ckpt");
    save_checkpoint(
        &path,
        &registry,
        &fixture.checkpoint.config,
        &fixture.vocabulary.digest(),
        &fixture.checkpoint.provenance,
    )
    .unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.registry.frozen_groups(), &expected);
}
