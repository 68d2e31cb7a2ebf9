//! End-to-end pipeline runs through the real binary: prepare -> train ->
//! eval -> transfer -> report, plus exit codes, config-file merging and
//! manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toxpipe(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toxpipe"))
        .args(args)
        .env("TOXPIPE_DATA_DIR", data_dir)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        output.status.code(),
        stdout(output),
        stderr(output)
    );
}

/// Davidson-style CSV: class 0 hate, 1 offensive (dropped), 2 neither.
fn davidson_csv(rows: usize) -> String {
    let mut csv = String::from("tweet,class\n");
    let hate = ["venom surge strikes now", "poison flood wrecks all"];
    let neither = ["flowers bloom nicely today", "calm rivers flow gently"];
    for i in 0..rows {
        match i % 3 {
            0 => csv.push_str(&format!("{} sample {i},0\n", hate[i % 2])),
            1 => csv.push_str(&format!("rude words sample {i},1\n")),
            _ => csv.push_str(&format!("{} sample {i},2\n", neither[i % 2])),
        }
    }
    csv
}

#[test]
fn prepare_drops_davidson_offensive_rows() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("tweets.csv");
    fs::write(&raw, davidson_csv(30)).unwrap();
    let corpus = dir.path().join("corpus.tsv");

    let output = toxpipe(
        dir.path(),
        &[
            "prepare",
            "--schema",
            "davidson",
            "--in",
            raw.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
        ],
    );
    assert_ok(&output);

    let lines: Vec<String> = fs::read_to_string(&corpus)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    // 30 rows: 10 of each class, class 1 dropped.
    assert_eq!(lines.len(), 20);
    assert!(lines.iter().all(|l| !l.contains("rude words")));
    assert_eq!(lines.iter().filter(|l| l.starts_with('1')).count(), 10);
}

struct Pipeline {
    dir: tempfile::TempDir,
    corpus: PathBuf,
    vocab: PathBuf,
    train_bin: PathBuf,
    test_bin: PathBuf,
}

fn prepared_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("tweets.csv");
    fs::write(&raw, davidson_csv(60)).unwrap();
    let corpus = dir.path().join("corpus.tsv");
    let vocab = dir.path().join("vocab.txt");
    let train_bin = dir.path().join("train.bin");
    let test_bin = dir.path().join("test.bin");

    let output = toxpipe(
        dir.path(),
        &[
            "prepare",
            "--schema",
            "davidson",
            "--in",
            raw.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
            "--vocab-out",
            vocab.to_str().unwrap(),
            "--encoded-train-out",
            train_bin.to_str().unwrap(),
            "--encoded-test-out",
            test_bin.to_str().unwrap(),
            "--min-freq",
            "1",
            "--max-len",
            "12",
            "--split-ratio",
            "0.25",
        ],
    );
    assert_ok(&output);
    Pipeline {
        dir,
        corpus,
        vocab,
        train_bin,
        test_bin,
    }
}

fn train_args<'a>(p: &'a Pipeline, out: &'a Path) -> Vec<String> {
    [
        "train",
        "--model",
        "gru",
        "--data",
        p.train_bin.to_str().unwrap(),
        "--vocab",
        p.vocab.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--emb-dim",
        "8",
        "--hidden",
        "8",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--lr",
        "0.01",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn full_pipeline_and_deterministic_checkpoints() {
    let p = prepared_pipeline();
    assert!(p.vocab.exists() && p.train_bin.exists() && p.test_bin.exists());

    // Identical seeds give byte-identical checkpoints.
    let ckpt_a = p.dir.path().join("a.ckpt");
    let ckpt_b = p.dir.path().join("b.ckpt");
    for out in [&ckpt_a, &ckpt_b] {
        let args: Vec<String> = train_args(&p, out);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_ok(&toxpipe(p.dir.path(), &args));
    }
    assert_eq!(fs::read(&ckpt_a).unwrap(), fs::read(&ckpt_b).unwrap());

    // Evaluate the encoded test split and write report plus scores.
    let report_json = p.dir.path().join("eval.json");
    let scores_csv = p.dir.path().join("scores.csv");
    let output = toxpipe(
        p.dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt_a.to_str().unwrap(),
            "--data",
            p.test_bin.to_str().unwrap(),
            "--report-out",
            report_json.to_str().unwrap(),
            "--scores-out",
            scores_csv.to_str().unwrap(),
            "--name",
            "gru-test",
        ],
    );
    assert_ok(&output);
    assert!(stdout(&output).contains("gru-test"));
    assert!(report_json.exists());
    let scores_text = fs::read_to_string(&scores_csv).unwrap();
    assert!(scores_text.starts_with("score,label\n"));

    // Score histogram from the scores file.
    let hist_csv = p.dir.path().join("score-hist.csv");
    let output = toxpipe(
        p.dir.path(),
        &[
            "stats",
            "--data",
            p.corpus.to_str().unwrap(),
            "--scores",
            scores_csv.to_str().unwrap(),
            "--score-hist",
            hist_csv.to_str().unwrap(),
        ],
    );
    assert_ok(&output);
    assert!(fs::read_to_string(&hist_csv)
        .unwrap()
        .starts_with("bin_low,bin_high,count\n"));

    // Transfer on the TSV with a freeze scenario.
    let transfer_json = p.dir.path().join("transfer.json");
    let output = toxpipe(
        p.dir.path(),
        &[
            "transfer",
            "--checkpoint",
            ckpt_a.to_str().unwrap(),
            "--data",
            p.corpus.to_str().unwrap(),
            "--vocab",
            p.vocab.to_str().unwrap(),
            "--scenario",
            "frozen-emb",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--split-ratio",
            "0.25",
            "--report-out",
            transfer_json.to_str().unwrap(),
        ],
    );
    assert_ok(&output);

    // Merge the stored reports into one table.
    let table_csv = p.dir.path().join("table.csv");
    let output = toxpipe(
        p.dir.path(),
        &[
            "report",
            "--in",
            report_json.to_str().unwrap(),
            transfer_json.to_str().unwrap(),
            "--csv-out",
            table_csv.to_str().unwrap(),
        ],
    );
    assert_ok(&output);
    let text = stdout(&output);
    assert!(text.contains("gru-test"));
    assert!(text.contains("frozen-emb"));
    let csv = fs::read_to_string(&table_csv).unwrap();
    assert!(csv.starts_with("model,accuracy,precision,recall,auc,n,tp,tn,fp,fn\n"));
    assert_eq!(csv.lines().count(), 3);

    // Every run wrote a manifest.
    let manifests = p.dir.path().join("manifests");
    assert!(manifests.read_dir().unwrap().count() >= 6);
}

#[test]
fn eval_on_tsv_with_split_matches_transfer_zero_shot() {
    let p = prepared_pipeline();
    let ckpt = p.dir.path().join("m.ckpt");
    let args: Vec<String> = train_args(&p, &ckpt);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_ok(&toxpipe(p.dir.path(), &args));

    let eval_json = p.dir.path().join("zero-shot.json");
    let output = toxpipe(
        p.dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            p.corpus.to_str().unwrap(),
            "--vocab",
            p.vocab.to_str().unwrap(),
            "--split",
            "test",
            "--split-ratio",
            "0.25",
            "--seed",
            "42",
            "--report-out",
            eval_json.to_str().unwrap(),
        ],
    );
    assert_ok(&output);

    let transfer_json = p.dir.path().join("lr0.json");
    let output = toxpipe(
        p.dir.path(),
        &[
            "transfer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            p.corpus.to_str().unwrap(),
            "--vocab",
            p.vocab.to_str().unwrap(),
            "--scenario",
            "all",
            "--lr",
            "0",
            "--epochs",
            "1",
            "--split-ratio",
            "0.25",
            "--seed",
            "42",
            "--report-out",
            transfer_json.to_str().unwrap(),
        ],
    );
    assert_ok(&output);

    let a: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&eval_json).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&transfer_json).unwrap()).unwrap();
    assert_eq!(a["report"], b["report"]);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("tweets.csv");
    fs::write(&raw, davidson_csv(30)).unwrap();
    let corpus = dir.path().join("corpus.tsv");
    let config = dir.path().join("toxpipe.conf");
    fs::write(
        &config,
        format!(
            "[prepare]\nschema = davidson\nin = {}\ntake-first = 5\n",
            raw.display()
        ),
    )
    .unwrap();

    let output = toxpipe(
        dir.path(),
        &[
            "prepare",
            "--config",
            config.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
        ],
    );
    assert_ok(&output);
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 5);
    // The effective config is logged at startup.
    assert!(stderr(&output).contains("take-first = 5"));

    // A flag overrides the file value.
    let output = toxpipe(
        dir.path(),
        &[
            "prepare",
            "--config",
            config.to_str().unwrap(),
            "--out",
            corpus.to_str().unwrap(),
            "--take-first",
            "3",
        ],
    );
    assert_ok(&output);
    assert_eq!(fs::read_to_string(&corpus).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown scenario name: usage error.
    let output = toxpipe(
        dir.path(),
        &[
            "transfer",
            "--checkpoint",
            "x.ckpt",
            "--data",
            "y.tsv",
            "--vocab",
            "v.txt",
            "--scenario",
            "warm-start",
        ],
    );
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("error[cli/usage]"));

    // Unknown flag: usage error.
    let output = toxpipe(dir.path(), &["prepare", "--warp", "9"]);
    assert_eq!(output.status.code(), Some(1));

    // Unknown config key: usage error.
    let config = dir.path().join("bad.conf");
    fs::write(&config, "[train]\nwarp = 9\n").unwrap();
    let output = toxpipe(dir.path(), &["train", "--config", config.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));

    // Missing schema column: data error with a module-qualified code.
    let raw = dir.path().join("broken.csv");
    fs::write(&raw, "id,comment_text\n1,hello\n").unwrap();
    let output = toxpipe(
        dir.path(),
        &[
            "prepare",
            "--schema",
            "jigsaw",
            "--in",
            raw.to_str().unwrap(),
            "--out",
            dir.path().join("out.tsv").to_str().unwrap(),
        ],
    );
    assert_eq!(output.status.code(), Some(2));
    let err = stderr(&output);
    assert!(err.contains("error[corpus/schema]"), "stderr: {err}");
    assert!(err.contains("target"));
}

#[test]
fn prepare_can_reuse_an_existing_vocabulary() {
    let p = prepared_pipeline();
    // A second dataset encoded with the first pipeline's vocabulary.
    let raw = p.dir.path().join("more.csv");
    fs::write(&raw, davidson_csv(24)).unwrap();
    let corpus2 = p.dir.path().join("corpus2.tsv");
    let encoded2 = p.dir.path().join("second.bin");
    let output = toxpipe(
        p.dir.path(),
        &[
            "prepare",
            "--schema",
            "davidson",
            "--in",
            raw.to_str().unwrap(),
            "--out",
            corpus2.to_str().unwrap(),
            "--vocab",
            p.vocab.to_str().unwrap(),
            "--encoded-test-out",
            encoded2.to_str().unwrap(),
            "--max-len",
            "12",
            "--split-ratio",
            "0.5",
        ],
    );
    assert_ok(&output);
    assert!(encoded2.exists());

    // A trained checkpoint accepts this encoded file, and rejects data
    // claiming an incompatible vocabulary.
    let ckpt = p.dir.path().join("m.ckpt");
    let args: Vec<String> = train_args(&p, &ckpt);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_ok(&toxpipe(p.dir.path(), &args));
    let output = toxpipe(
        p.dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            encoded2.to_str().unwrap(),
            "--vocab",
            p.vocab.to_str().unwrap(),
        ],
    );
    assert_ok(&output);

    let other_vocab = p.dir.path().join("other-vocab.txt");
    fs::write(&other_vocab, "<pad>\n<unk>\nzebra\n").unwrap();
    let output = toxpipe(
        p.dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            encoded2.to_str().unwrap(),
            "--vocab",
            other_vocab.to_str().unwrap(),
        ],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("error[training/compat]"));
}

#[test]
fn stats_writes_length_histogram() {
    let p = prepared_pipeline();
    let hist = p.dir.path().join("lengths.csv");
    let output = toxpipe(
        p.dir.path(),
        &[
            "stats",
            "--data",
            p.corpus.to_str().unwrap(),
            "--length-hist",
            hist.to_str().unwrap(),
        ],
    );
    assert_ok(&output);
    let text = fs::read_to_string(&hist).unwrap();
    assert!(text.starts_with("length,count\n"));
    let total: usize = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    // One histogram entry per corpus line.
    assert_eq!(
        total,
        fs::read_to_string(&p.corpus).unwrap().lines().count()
    );
}

#[test]
fn fetch_verifies_digests() {
    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("source.csv");
    fs::write(&source, b"raw bytes").unwrap();
    let digest = toxpipe_digest(b"raw bytes");
    let dest = dir.path().join("cache.csv");

    let output = toxpipe(
        dir.path(),
        &[
            "fetch",
            "--url",
            source.to_str().unwrap(),
            "--digest",
            &digest,
            "--out",
            dest.to_str().unwrap(),
        ],
    );
    assert_ok(&output);
    assert!(dest.exists());

    let wrong = toxpipe_digest(b"other bytes");
    let output = toxpipe(
        dir.path(),
        &[
            "fetch",
            "--url",
            source.to_str().unwrap(),
            "--digest",
            &wrong,
            "--out",
            dir.path().join("bad.csv").to_str().unwrap(),
        ],
    );
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("error[corpus/integrity]"));
    assert!(!dir.path().join("bad.csv").exists());
}

fn toxpipe_digest(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}
