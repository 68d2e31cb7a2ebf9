//! One handler per subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    class_balance, fetch_dataset, map_records, parse_csv, read_corpus, split, take_prefix,
    write_corpus, Schema,
};
use crate::metrics::{render_report_csv, render_report_text, score_histogram, EvalReport};
use crate::models::{
    build_params, load_checkpoint, save_checkpoint, ModelConfig, Provenance, TransferScenario,
};
use crate::preprocess::{clean, length_histogram, CleaningConfig};
use crate::training::{self, progress_line, TrainConfig};
use crate::vocab::{
    encode_labeled, load_embeddings, read_encoded, write_encoded, Vocabulary, ENCODED_MAGIC,
};

use super::{CliError, Ctx};

/// Row label plus the report, as serialized by `eval` and `transfer` and
/// consumed by `report`.
#[derive(Debug, Serialize, Deserialize)]
pub struct NamedReport {
    pub model: String,
    pub report: EvalReport,
}

fn write_file(ctx: &mut Ctx<'_>, path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ctx.output(path);
    Ok(())
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| path.to_string())
}

pub fn fetch(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let url = ctx.req("url")?;
    let digest = ctx.req("digest")?;
    let out = PathBuf::from(ctx.req("out")?);
    let path = fetch_dataset(&url, &digest, &out)?;
    ctx.output(&path);
    println!("fetched {} (sha256 {digest})", path.display());
    Ok(())
}

pub fn prepare(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let schema: Schema = ctx.req("schema")?.parse().map_err(CliError::Usage)?;
    let input = ctx.req("in")?;
    let out = PathBuf::from(ctx.req("out")?);
    let threshold: f64 = ctx.parse("threshold")?;
    let ratio: f64 = ctx.parse("split-ratio")?;
    let seed: u64 = ctx.parse("seed")?;
    let vocab_in = ctx.opt("vocab")?;
    let vocab_out = ctx.opt("vocab-out")?;
    if vocab_in.is_some() && vocab_out.is_some() {
        return Err(CliError::Usage(
            "--vocab and --vocab-out are mutually exclusive".to_string(),
        ));
    }
    let encoded_train_out = ctx.opt("encoded-train-out")?;
    let encoded_test_out = ctx.opt("encoded-test-out")?;
    let wants_encoding = encoded_train_out.is_some() || encoded_test_out.is_some();
    if wants_encoding && vocab_in.is_none() && vocab_out.is_none() {
        return Err(CliError::Usage(
            "encoding needs --vocab or --vocab-out".to_string(),
        ));
    }

    ctx.input(&input);
    let parsed = parse_csv(Path::new(&input), schema)?;
    if parsed.dropped_empty_text > 0 {
        eprintln!(
            "warning: dropped {} rows with empty text",
            parsed.dropped_empty_text
        );
    }
    let mut corpus = map_records(&parsed.records, schema, threshold)?;
    println!(
        "parsed {} rows, kept {} after label mapping",
        parsed.records.len(),
        corpus.len()
    );
    if let Some(n) = ctx.opt_parse::<usize>("take-first")? {
        corpus = take_prefix(&corpus, n);
        println!("kept first {} examples", corpus.len());
    }
    write_corpus(&out, &corpus)?;
    ctx.output(&out);
    let balance = class_balance(&corpus)?;
    println!(
        "corpus {}: examples={} positives={} positive_fraction={:.4}",
        out.display(),
        balance.n_total,
        balance.n_positive,
        balance.positive_fraction
    );

    if vocab_out.is_none() && !wants_encoding {
        return Ok(());
    }

    let parts = split(&corpus, ratio, seed)?;
    let cleaning = CleaningConfig::bundled();
    let vocabulary = match (&vocab_in, &vocab_out) {
        (Some(path), _) => {
            ctx.input(path);
            Vocabulary::load(Path::new(path))?
        }
        (None, Some(path)) => {
            let min_freq: usize = ctx.parse("min-freq")?;
            let max_vocab: usize = ctx.parse("max-vocab")?;
            let tokens: Vec<_> = parts
                .train
                .iter()
                .map(|example| clean(&example.text, &cleaning))
                .collect();
            let vocabulary = Vocabulary::build(&tokens, min_freq, max_vocab)?;
            vocabulary.save(Path::new(path))?;
            ctx.output(path);
            println!(
                "vocabulary {}: {} tokens (digest {})",
                path,
                vocabulary.size(),
                vocabulary.digest()
            );
            vocabulary
        }
        (None, None) => unreachable!("guarded above"),
    };

    if wants_encoding {
        let max_len: usize = ctx.parse("max-len")?;
        for (split_name, examples, dest) in [
            ("train", &parts.train, encoded_train_out),
            ("test", &parts.test, encoded_test_out),
        ] {
            let Some(dest) = dest else { continue };
            let (encoded, dropped) = encode_labeled(examples, &cleaning, &vocabulary, max_len)?;
            if dropped > 0 {
                eprintln!(
                    "warning: {split_name} split dropped {dropped} examples empty after cleaning"
                );
            }
            write_encoded(Path::new(&dest), &encoded, max_len)?;
            ctx.output(&dest);
            println!(
                "encoded {split_name} split: {} examples -> {dest}",
                encoded.len()
            );
        }
    }
    Ok(())
}

pub fn stats(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let data = ctx.req("data")?;
    ctx.input(&data);
    let corpus = read_corpus(Path::new(&data))?;
    let balance = class_balance(&corpus)?;
    println!(
        "examples={} positives={} positive_fraction={:.4}",
        balance.n_total, balance.n_positive, balance.positive_fraction
    );

    if let Some(dest) = ctx.opt("length-hist")? {
        let cleaning = CleaningConfig::bundled();
        let cleaned: Vec<_> = corpus
            .iter()
            .map(|example| clean(&example.text, &cleaning))
            .collect();
        let histogram = length_histogram(&cleaned);
        write_file(ctx, Path::new(&dest), &histogram.to_csv())?;
        println!(
            "length histogram -> {dest} (max observed {})",
            histogram.max_observed
        );
    }

    match (ctx.opt("scores")?, ctx.opt("score-hist")?) {
        (Some(scores_path), Some(dest)) => {
            ctx.input(&scores_path);
            let text = std::fs::read_to_string(&scores_path).map_err(|source| CliError::Io {
                path: scores_path.clone(),
                source,
            })?;
            let mut scores = Vec::new();
            for line in text.lines() {
                let first = line.split(',').next().unwrap_or_default().trim();
                if first.is_empty() || first == "score" {
                    continue;
                }
                let value: f64 = first.parse().map_err(|_| {
                    CliError::Usage(format!("scores file {scores_path}: bad value {first:?}"))
                })?;
                scores.push(value);
            }
            let histogram = score_histogram(&scores)?;
            write_file(ctx, Path::new(&dest), &histogram.to_csv())?;
            println!("score histogram ({} scores) -> {dest}", scores.len());
        }
        (None, None) => {}
        _ => {
            return Err(CliError::Usage(
                "--scores and --score-hist go together".to_string(),
            ))
        }
    }
    Ok(())
}

pub fn train(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let model_name = ctx.req("model")?;
    let data = ctx.req("data")?;
    let vocab_path = ctx.req("vocab")?;
    let out = PathBuf::from(ctx.req("out")?);

    ctx.input(&data);
    ctx.input(&vocab_path);
    let (corpus, max_len) = read_encoded(Path::new(&data))?;
    let vocabulary = Vocabulary::load(Path::new(&vocab_path))?;

    let mut config = ModelConfig::from_cli_name(&model_name, vocabulary.size())?;
    config.max_len = max_len;
    if let Some(dim) = ctx.opt_parse::<usize>("emb-dim")? {
        config.emb_dim = dim;
    }
    if let Some(dim) = ctx.opt_parse::<usize>("hidden")? {
        config.hidden_dim = dim;
    }
    if let Some(blocks) = ctx.opt_parse::<usize>("blocks")? {
        config.num_blocks = blocks;
    }
    if let Some(heads) = ctx.opt_parse::<usize>("heads")? {
        config.num_heads = heads;
    }
    if let Some(ffn) = ctx.opt_parse::<usize>("ffn")? {
        config.ffn_dim = ffn;
    }
    if let Some(p) = ctx.opt_parse::<f64>("dropout")? {
        config.dropout_p = p;
    }

    let seed: u64 = ctx.parse("seed")?;
    let mut tconfig = TrainConfig::for_model(&config);
    tconfig.learning_rate = ctx.parse("lr")?;
    tconfig.num_epochs = ctx.parse("epochs")?;
    tconfig.seed = seed;
    if let Some(batch) = ctx.opt_parse::<usize>("batch-size")? {
        tconfig.batch_size = batch;
    }

    let embeddings = match ctx.opt("embeddings")? {
        Some(path) => {
            ctx.input(&path);
            Some(load_embeddings(
                Path::new(&path),
                &vocabulary,
                config.emb_dim,
                seed,
            )?)
        }
        None => None,
    };
    if let Some(matrix) = &embeddings {
        println!(
            "pretrained embeddings cover {:.1}% of the vocabulary",
            matrix.coverage() * 100.0
        );
    }

    let mut registry = build_params(&config, embeddings.as_ref(), seed)?;
    let mut report = training::train(&mut registry, &config, &corpus, &tconfig, |e, b, l| {
        println!("{}", progress_line(e, b, l));
    })?;

    let dataset_id = ctx.opt("dataset-id")?.unwrap_or_else(|| file_stem(&data));
    save_checkpoint(
        &out,
        &registry,
        &config,
        &vocabulary.digest(),
        &Provenance {
            dataset_id,
            epochs: tconfig.num_epochs,
            seed,
        },
    )?;
    ctx.output(&out);
    report.checkpoint = Some(out.display().to_string());

    for (epoch, loss) in report.epoch_mean_loss.iter().enumerate() {
        println!("epoch {} mean loss {loss:.6}", epoch + 1);
    }
    println!("checkpoint -> {}", out.display());
    if let Some(dest) = ctx.opt("report-out")? {
        write_file(
            ctx,
            Path::new(&dest),
            &crate::util::canonical_json_pretty(&report)?,
        )?;
    }
    Ok(())
}

/// Loads eval data: encoded binary directly, or TSV cleaned and encoded
/// with the provided vocabulary (with optional train/test split
/// selection).
fn load_eval_examples(
    ctx: &mut Ctx<'_>,
    data: &str,
    config_max_len: usize,
    checkpoint_digest: &str,
) -> Result<Vec<crate::vocab::EncodedExample>, CliError> {
    let mut header = [0u8; 4];
    let is_encoded = std::fs::File::open(data)
        .and_then(|mut f| std::io::Read::read_exact(&mut f, &mut header).map(|_| ()))
        .map(|_| &header == ENCODED_MAGIC)
        .unwrap_or(false);

    let check_digest = |vocabulary: &Vocabulary| -> Result<(), CliError> {
        if vocabulary.digest() != checkpoint_digest {
            return Err(CliError::Train(
                crate::training::TrainError::VocabDigestMismatch {
                    expected: checkpoint_digest.to_string(),
                    provided: vocabulary.digest(),
                },
            ));
        }
        Ok(())
    };

    if is_encoded {
        if ctx.opt("split")?.as_deref().unwrap_or("all") != "all" {
            return Err(CliError::Usage(
                "--split only applies to TSV data; encoded corpora are already split".to_string(),
            ));
        }
        // The encoded file carries no vocabulary; verify compatibility when
        // the caller supplies one anyway.
        if let Some(vocab_path) = ctx.opt("vocab")? {
            ctx.input(&vocab_path);
            check_digest(&Vocabulary::load(Path::new(&vocab_path))?)?;
        }
        let (examples, _) = read_encoded(Path::new(data))?;
        return Ok(examples);
    }

    let vocab_path = ctx
        .opt("vocab")?
        .ok_or_else(|| CliError::Usage("TSV data needs --vocab to encode with".to_string()))?;
    ctx.input(&vocab_path);
    let vocabulary = Vocabulary::load(Path::new(&vocab_path))?;
    check_digest(&vocabulary)?;

    let corpus = read_corpus(Path::new(data))?;
    let selected = match ctx.opt("split")?.as_deref().unwrap_or("all") {
        "all" => corpus,
        which @ ("train" | "test") => {
            let ratio: f64 = ctx.parse("split-ratio")?;
            let seed: u64 = ctx.parse("seed")?;
            let parts = split(&corpus, ratio, seed)?;
            if which == "train" {
                parts.train
            } else {
                parts.test
            }
        }
        other => {
            return Err(CliError::Usage(format!(
                "invalid --split {other:?}, expected all, train or test"
            )))
        }
    };
    let cleaning = CleaningConfig::bundled();
    let (encoded, dropped) = encode_labeled(&selected, &cleaning, &vocabulary, config_max_len)?;
    if dropped > 0 {
        eprintln!("warning: dropped {dropped} examples empty after cleaning");
    }
    Ok(encoded)
}

pub fn eval(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let checkpoint_path = ctx.req("checkpoint")?;
    let data = ctx.req("data")?;
    let threshold: f64 = ctx.parse("threshold")?;

    ctx.input(&checkpoint_path);
    ctx.input(&data);
    let checkpoint = load_checkpoint(Path::new(&checkpoint_path))?;
    let examples = load_eval_examples(
        ctx,
        &data,
        checkpoint.config.max_len,
        &checkpoint.vocab_digest,
    )?;
    let outcome = training::evaluate(
        &checkpoint.registry,
        &checkpoint.config,
        &examples,
        threshold,
    )?;

    let name = ctx.opt("name")?.unwrap_or_else(|| file_stem(&data));
    let rows = vec![(name.clone(), outcome.report.clone())];
    print!("{}", render_report_text(&rows)?);

    if let Some(dest) = ctx.opt("report-out")? {
        let named = NamedReport {
            model: name.clone(),
            report: outcome.report.clone(),
        };
        write_file(
            ctx,
            Path::new(&dest),
            &crate::util::canonical_json_pretty(&named)?,
        )?;
    }
    if let Some(dest) = ctx.opt("scores-out")? {
        let mut csv = String::from("score,label\n");
        for (score, label) in outcome.scores.iter().zip(&outcome.labels) {
            csv.push_str(&format!("{score},{label}\n"));
        }
        write_file(ctx, Path::new(&dest), &csv)?;
    }
    Ok(())
}

pub fn transfer(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let checkpoint_path = ctx.req("checkpoint")?;
    let data = ctx.req("data")?;
    let vocab_path = ctx.req("vocab")?;
    let scenario: TransferScenario = ctx.req("scenario")?.parse().map_err(CliError::Usage)?;
    let threshold: f64 = ctx.parse("threshold")?;
    let ratio: f64 = ctx.parse("split-ratio")?;
    let seed: u64 = ctx.parse("seed")?;
    let resume_moments = ctx.flag("resume-moments")?;

    ctx.input(&checkpoint_path);
    ctx.input(&data);
    ctx.input(&vocab_path);
    let checkpoint = load_checkpoint(Path::new(&checkpoint_path))?;
    let vocabulary = Vocabulary::load(Path::new(&vocab_path))?;
    let corpus = read_corpus(Path::new(&data))?;
    let parts = split(&corpus, ratio, seed)?;

    let mut tconfig = TrainConfig::for_model(&checkpoint.config);
    tconfig.learning_rate = ctx.parse("lr")?;
    tconfig.num_epochs = ctx.parse("epochs")?;
    tconfig.seed = seed;
    if let Some(batch) = ctx.opt_parse::<usize>("batch-size")? {
        tconfig.batch_size = batch;
    }

    let cleaning = CleaningConfig::bundled();
    let outcome = training::transfer(
        checkpoint,
        &cleaning,
        &vocabulary,
        &parts,
        scenario,
        &tconfig,
        threshold,
        resume_moments,
        |e, b, l| println!("{}", progress_line(e, b, l)),
    )?;

    let name = ctx
        .opt("name")?
        .unwrap_or_else(|| format!("{}-{}", file_stem(&data), scenario.cli_name()));
    let rows = vec![(name.clone(), outcome.eval_report.clone())];
    print!("{}", render_report_text(&rows)?);

    if let Some(dest) = ctx.opt("out")? {
        save_checkpoint(
            Path::new(&dest),
            &outcome.registry,
            &outcome.config,
            &vocabulary.digest(),
            &Provenance {
                dataset_id: file_stem(&data),
                epochs: tconfig.num_epochs,
                seed,
            },
        )?;
        ctx.output(&dest);
        println!("fine-tuned checkpoint -> {dest}");
    }
    if let Some(dest) = ctx.opt("report-out")? {
        let named = NamedReport {
            model: name,
            report: outcome.eval_report.clone(),
        };
        write_file(
            ctx,
            Path::new(&dest),
            &crate::util::canonical_json_pretty(&named)?,
        )?;
    }
    Ok(())
}

pub fn report(ctx: &mut Ctx<'_>) -> Result<(), CliError> {
    let files = ctx.many("in")?;
    let mut rows = Vec::with_capacity(files.len());
    for file in &files {
        ctx.input(file);
        let text = std::fs::read_to_string(file).map_err(|source| CliError::Io {
            path: file.clone(),
            source,
        })?;
        let named: NamedReport = serde_json::from_str(&text)?;
        rows.push((named.model, named.report));
    }
    print!("{}", render_report_text(&rows)?);
    if let Some(dest) = ctx.opt("csv-out")? {
        write_file(ctx, Path::new(&dest), &render_report_csv(&rows)?)?;
    }
    Ok(())
}
