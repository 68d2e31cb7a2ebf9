//! Batch command-line surface tying the pipeline together.
//!
//! Subcommands: `fetch`, `prepare`, `stats`, `train`, `eval`, `transfer`
//! and `report`. A flat `key = value` config file (`--config`) supplies
//! per-subcommand defaults that command-line flags override; every
//! effective value is logged at startup and every run writes a manifest
//! with input/output digests under the data directory
//! (`TOXPIPE_DATA_DIR`, default `./toxpipe-data`).
//!
//! Exit codes: 0 success, 1 usage error, 2 data or integrity error.

mod config;
mod handlers;

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::preprocess::PreprocessError;
use crate::tensor::TensorError;
use crate::training::TrainError;
use crate::vocab::VocabError;

use config::FileConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {path}: {reason}")]
    Config { path: String, reason: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn tensor_code(error: &TensorError) -> &'static str {
    match error {
        TensorError::ShapeMismatch { .. }
        | TensorError::BadRank { .. }
        | TensorError::BadLength { .. } => "tensor/shape",
        TensorError::AllMasked { .. } => "tensor/mask",
        TensorError::Invalid { .. }
        | TensorError::NotScalarLoss { .. }
        | TensorError::MissingGrad { .. }
        | TensorError::DuplicateParam { .. } => "tensor/contract",
    }
}

fn corpus_code(error: &CorpusError) -> &'static str {
    match error {
        CorpusError::Io { .. } => "corpus/io",
        CorpusError::MissingColumn { .. } => "corpus/schema",
        CorpusError::MalformedRow { .. } | CorpusError::BadCorpusLine { .. } => "corpus/parse",
        CorpusError::Domain { .. } => "corpus/domain",
        CorpusError::DigestMismatch { .. } => "corpus/integrity",
        CorpusError::Fetch { .. } => "corpus/fetch",
        CorpusError::BadDigest { .. } => "corpus/digest",
        CorpusError::EmptyCorpus
        | CorpusError::BadRatio { .. }
        | CorpusError::TooSmallToSplit { .. } => "corpus/input",
    }
}

fn vocab_code(error: &VocabError) -> &'static str {
    match error {
        VocabError::Io { .. } => "vocab/io",
        VocabError::VectorFormat { .. } | VocabError::VocabFormat { .. } => "vocab/format",
        VocabError::EncodedFormat { .. } => "vocab/encoded",
        VocabError::EmptyCorpus
        | VocabError::BadMinFreq(_)
        | VocabError::BadMaxSize(_)
        | VocabError::BadMaxLen => "vocab/input",
    }
}

fn model_code(error: &ModelError) -> &'static str {
    match error {
        ModelError::Tensor(inner) => tensor_code(inner),
        ModelError::Io { .. } => "models/io",
        ModelError::BadConfig(_) => "models/config",
        ModelError::EmbeddingShape { .. } => "models/dim",
        ModelError::EmptyBatch
        | ModelError::AllMaskedExample { .. }
        | ModelError::RaggedBatch { .. }
        | ModelError::TooLong { .. } => "models/input",
        ModelError::MissingParam { .. } | ModelError::NoEncoderGroups => "models/contract",
        ModelError::CheckpointCorrupt { .. } => "models/integrity",
        ModelError::CheckpointVersion { .. } => "models/version",
    }
}

fn train_code(error: &TrainError) -> &'static str {
    match error {
        TrainError::Model(inner) => model_code(inner),
        TrainError::Tensor(inner) => tensor_code(inner),
        TrainError::Metrics(_) => "metrics/input",
        TrainError::Vocab(inner) => vocab_code(inner),
        TrainError::EmptyCorpus => "training/input",
        TrainError::BadConfig(_) => "training/config",
        TrainError::VocabDigestMismatch { .. } => "training/compat",
    }
}

impl CliError {
    /// Module-qualified error code printed with every failure.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "cli/usage",
            CliError::Config { .. } => "cli/config",
            CliError::Io { .. } => "cli/io",
            CliError::Json(_) => "cli/json",
            CliError::Corpus(inner) => corpus_code(inner),
            CliError::Preprocess(_) => "preprocess/data",
            CliError::Vocab(inner) => vocab_code(inner),
            CliError::Model(inner) => model_code(inner),
            CliError::Train(inner) => train_code(inner),
            CliError::Metrics(_) => "metrics/input",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }
}

enum FlagKind {
    Value {
        default: Option<&'static str>,
        required: bool,
        multi: bool,
    },
    Bool,
}

struct Flag {
    name: &'static str,
    help: &'static str,
    kind: FlagKind,
}

const fn required(name: &'static str, help: &'static str) -> Flag {
    Flag {
        name,
        help,
        kind: FlagKind::Value {
            default: None,
            required: true,
            multi: false,
        },
    }
}

const fn optional(name: &'static str, help: &'static str) -> Flag {
    Flag {
        name,
        help,
        kind: FlagKind::Value {
            default: None,
            required: false,
            multi: false,
        },
    }
}

const fn defaulted(name: &'static str, default: &'static str, help: &'static str) -> Flag {
    Flag {
        name,
        help,
        kind: FlagKind::Value {
            default: Some(default),
            required: false,
            multi: false,
        },
    }
}

const fn boolean(name: &'static str, help: &'static str) -> Flag {
    Flag {
        name,
        help,
        kind: FlagKind::Bool,
    }
}

const FETCH_FLAGS: &[Flag] = &[
    required("url", "source URL (http/https) or local path"),
    required("digest", "expected SHA-256 of the file, lowercase hex"),
    required("out", "destination path (doubles as the cache)"),
];

const PREPARE_FLAGS: &[Flag] = &[
    required("schema", "input schema: jigsaw, davidson or hasoc"),
    required("in", "raw CSV file"),
    required("out", "canonical corpus TSV to write"),
    optional("take-first", "keep only the first N mapped examples"),
    defaulted(
        "threshold",
        "0.5",
        "binarization threshold for fractional targets",
    ),
    defaulted("split-ratio", "0.1", "test fraction of the corpus"),
    defaulted("seed", "42", "shuffle seed for the split"),
    optional("vocab", "reuse an existing vocabulary file"),
    optional(
        "vocab-out",
        "build a vocabulary from the train split and write it here",
    ),
    defaulted(
        "min-freq",
        "2",
        "minimum token frequency for the vocabulary",
    ),
    defaulted(
        "max-vocab",
        "50000",
        "maximum vocabulary size including PAD and UNK",
    ),
    defaulted("max-len", "128", "encoded sequence length"),
    optional("encoded-train-out", "encoded train split (binary)"),
    optional("encoded-test-out", "encoded test split (binary)"),
];

const STATS_FLAGS: &[Flag] = &[
    required("data", "canonical corpus TSV"),
    optional("length-hist", "write a length,count histogram CSV here"),
    optional("scores", "scores CSV (as written by eval --scores-out)"),
    optional("score-hist", "write a 20-bin score histogram CSV here"),
];

const TRAIN_FLAGS: &[Flag] = &[
    required(
        "model",
        "lstm, gru, pooled-bilstm, transformer or transformer-causal",
    ),
    required("data", "encoded training corpus (binary)"),
    required("vocab", "vocabulary file the corpus was encoded with"),
    required("out", "checkpoint path to write"),
    optional(
        "embeddings",
        "pretrained word-vector file for the embedding table",
    ),
    defaulted("epochs", "3", "training epochs"),
    defaulted("lr", "0.00001", "learning rate"),
    optional(
        "batch-size",
        "mini-batch size (default 512 recurrent, 64 transformer)",
    ),
    defaulted("seed", "42", "seed for init, shuffling and dropout"),
    optional("dataset-id", "provenance tag (default: data file stem)"),
    optional("report-out", "write the training report JSON here"),
    optional("emb-dim", "embedding width override"),
    optional("hidden", "hidden width override"),
    optional("blocks", "transformer block count override"),
    optional("heads", "attention head count override"),
    optional("ffn", "transformer feed-forward width override"),
    optional("dropout", "dropout probability override"),
];

const EVAL_FLAGS: &[Flag] = &[
    required("checkpoint", "checkpoint to evaluate"),
    required("data", "encoded binary or corpus TSV"),
    optional("vocab", "vocabulary file (required for TSV data)"),
    defaulted("threshold", "0.5", "decision threshold"),
    defaulted(
        "split",
        "all",
        "evaluate all, train or test (TSV data only)",
    ),
    defaulted("split-ratio", "0.1", "test fraction when splitting"),
    defaulted("seed", "42", "shuffle seed when splitting"),
    optional("name", "row label in reports (default: data file stem)"),
    optional("report-out", "write the evaluation report JSON here"),
    optional("scores-out", "write score,label rows here"),
];

const TRANSFER_FLAGS: &[Flag] = &[
    required("checkpoint", "checkpoint to fine-tune"),
    required("data", "new corpus TSV"),
    required("vocab", "vocabulary matching the checkpoint"),
    required("scenario", "all, frozen-emb or frozen-emb-half-encoder"),
    defaulted("epochs", "3", "fine-tuning epochs"),
    defaulted("lr", "0.00001", "learning rate"),
    optional(
        "batch-size",
        "mini-batch size (default 512 recurrent, 64 transformer)",
    ),
    defaulted("seed", "42", "seed for the split, shuffling and dropout"),
    defaulted("split-ratio", "0.1", "test fraction of the new corpus"),
    defaulted("threshold", "0.5", "decision threshold"),
    boolean(
        "resume-moments",
        "keep the checkpoint's Adam moments instead of resetting",
    ),
    optional("out", "write the fine-tuned checkpoint here"),
    optional("report-out", "write the evaluation report JSON here"),
    optional("name", "row label in reports (default: data file stem)"),
];

const REPORT_FLAGS: &[Flag] = &[
    Flag {
        name: "in",
        help: "evaluation report JSON files",
        kind: FlagKind::Value {
            default: None,
            required: true,
            multi: true,
        },
    },
    optional("csv-out", "also write the table as CSV"),
];

const SUBCOMMANDS: &[(&str, &str, &[Flag])] = &[
    (
        "fetch",
        "download a dataset file and verify its digest",
        FETCH_FLAGS,
    ),
    (
        "prepare",
        "parse, label-map, split and encode a dataset",
        PREPARE_FLAGS,
    ),
    (
        "stats",
        "class balance and length/score histograms",
        STATS_FLAGS,
    ),
    (
        "train",
        "train a classifier and write a checkpoint",
        TRAIN_FLAGS,
    ),
    ("eval", "evaluate a checkpoint on a dataset", EVAL_FLAGS),
    (
        "transfer",
        "fine-tune a checkpoint under a freeze scenario",
        TRANSFER_FLAGS,
    ),
    (
        "report",
        "render stored evaluation reports as a table",
        REPORT_FLAGS,
    ),
];

fn build_command(file_config: &FileConfig) -> Result<Command, CliError> {
    // Reject config sections that match no subcommand.
    for section in file_config.keys() {
        if !SUBCOMMANDS.iter().any(|(name, _, _)| name == section) {
            return Err(CliError::Usage(format!(
                "config section [{section}] matches no subcommand"
            )));
        }
    }

    let mut command = Command::new("toxpipe")
        .about("training, evaluation and transfer toolkit for binary hate-speech classifiers")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .disable_help_subcommand(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .num_args(1)
                .help("flat key = value config file with per-subcommand sections"),
        );

    for (name, about, flags) in SUBCOMMANDS {
        let section = file_config.get(*name);
        if let Some(section) = section {
            for key in section.keys() {
                let known = flags.iter().any(|f| f.name == key);
                if !known {
                    return Err(CliError::Usage(format!(
                        "config key {key:?} in [{name}] matches no --{key} flag"
                    )));
                }
            }
        }
        let mut sub = Command::new(*name).about(*about);
        for flag in *flags {
            let mut arg = Arg::new(flag.name).long(flag.name).help(flag.help);
            match &flag.kind {
                FlagKind::Value {
                    default,
                    required,
                    multi,
                } => {
                    arg = if *multi {
                        arg.num_args(1..).action(ArgAction::Append)
                    } else {
                        arg.num_args(1)
                    };
                    let file_value = section.and_then(|s| s.get(flag.name)).cloned();
                    match file_value.or_else(|| default.map(str::to_string)) {
                        Some(value) => arg = arg.default_value(value),
                        None if *required => arg = arg.required(true),
                        None => {}
                    }
                }
                FlagKind::Bool => {
                    arg = arg.action(ArgAction::SetTrue);
                }
            }
            sub = sub.arg(arg);
        }
        command = command.subcommand(sub);
    }
    Ok(command)
}

/// Typed access to parsed flags plus collected run artifacts.
pub(crate) struct Ctx<'a> {
    name: &'static str,
    matches: &'a ArgMatches,
    file_section: Option<&'a BTreeMap<String, String>>,
    flags: &'static [Flag],
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Ctx<'_> {
    pub fn req(&self, name: &str) -> Result<String, CliError> {
        self.opt(name)?
            .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
    }

    pub fn opt(&self, name: &str) -> Result<Option<String>, CliError> {
        Ok(self.matches.get_one::<String>(name).cloned())
    }

    pub fn parse<T>(&self, name: &str) -> Result<T, CliError>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        self.opt_parse(name)?
            .ok_or_else(|| CliError::Usage(format!("--{name} is required")))
    }

    pub fn opt_parse<T>(&self, name: &str) -> Result<Option<T>, CliError>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.opt(name)? {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("invalid value {raw:?} for --{name}: {e}"))),
        }
    }

    pub fn flag(&self, name: &str) -> Result<bool, CliError> {
        if self.matches.get_flag(name) {
            return Ok(true);
        }
        match self.file_section.and_then(|s| s.get(name)) {
            None => Ok(false),
            Some(value) => match value.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(CliError::Usage(format!(
                    "config value {other:?} for {name} is not a boolean"
                ))),
            },
        }
    }

    pub fn many(&self, name: &str) -> Result<Vec<String>, CliError> {
        Ok(self
            .matches
            .get_many::<String>(name)
            .map(|values| values.cloned().collect())
            .unwrap_or_default())
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// The effective configuration as printed at startup and recorded in
    /// the manifest.
    fn effective_config(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut out = BTreeMap::new();
        for flag in self.flags {
            let value = match flag.kind {
                FlagKind::Bool => self.flag(flag.name)?.to_string(),
                FlagKind::Value { multi: true, .. } => self.many(flag.name)?.join(","),
                FlagKind::Value { .. } => self.opt(flag.name)?.unwrap_or_default(),
            };
            out.insert(flag.name.to_string(), value);
        }
        Ok(out)
    }
}

/// Runs the CLI on explicit argv (including the program name). Returns the
/// process exit code.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let args: Vec<String> = args.into_iter().collect();
    match run_inner(&args) {
        Ok(()) => 0,
        Err(error) => {
            eprintln!("error[{}]: {error}", error.code());
            error.exit_code()
        }
    }
}

fn run_inner(args: &[String]) -> Result<(), CliError> {
    // The config file shapes flag defaults, so it loads before clap runs.
    let file_config = match prescan_config_path(args) {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            config::parse_config(&text).map_err(|reason| CliError::Config { path, reason })?
        }
        None => FileConfig::new(),
    };

    let command = build_command(&file_config)?;
    let matches = match command.try_get_matches_from(args) {
        Ok(matches) => matches,
        Err(error) => {
            use clap::error::ErrorKind;
            return match error.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{error}");
                    Ok(())
                }
                _ => Err(CliError::Usage(error.to_string())),
            };
        }
    };

    let (name, sub_matches) = matches
        .subcommand()
        .ok_or_else(|| CliError::Usage("a subcommand is required".to_string()))?;
    let spec = SUBCOMMANDS
        .iter()
        .find(|(sub, _, _)| *sub == name)
        .expect("subcommand spec");

    let mut ctx = Ctx {
        name: spec.0,
        matches: sub_matches,
        file_section: file_config.get(name),
        flags: spec.2,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };

    let effective = ctx.effective_config()?;
    for (key, value) in &effective {
        eprintln!("config[{name}]: {key} = {value}");
    }

    match name {
        "fetch" => handlers::fetch(&mut ctx)?,
        "prepare" => handlers::prepare(&mut ctx)?,
        "stats" => handlers::stats(&mut ctx)?,
        "train" => handlers::train(&mut ctx)?,
        "eval" => handlers::eval(&mut ctx)?,
        "transfer" => handlers::transfer(&mut ctx)?,
        "report" => handlers::report(&mut ctx)?,
        other => return Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    }

    write_manifest(ctx.name, &effective, &ctx.inputs, &ctx.outputs)
}

fn prescan_config_path(args: &[String]) -> Option<String> {
    let mut iter = args.iter();
    while let Some(arg) = iter.next() {
        if arg == "--config" {
            return iter.next().cloned();
        }
        if let Some(value) = arg.strip_prefix("--config=") {
            return Some(value.to_string());
        }
    }
    None
}

/// Data directory: `TOXPIPE_DATA_DIR` or `./toxpipe-data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("TOXPIPE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("toxpipe-data"))
}

#[derive(serde::Serialize)]
struct ManifestFile {
    path: String,
    sha256: String,
}

#[derive(serde::Serialize)]
struct Manifest {
    subcommand: String,
    config: BTreeMap<String, String>,
    inputs: Vec<ManifestFile>,
    outputs: Vec<ManifestFile>,
}

/// Records inputs, outputs and the effective config with SHA-256 digests,
/// enough to re-execute the run and verify its artifacts.
fn write_manifest(
    subcommand: &str,
    effective: &BTreeMap<String, String>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<(), CliError> {
    let digest_all = |paths: &[PathBuf]| -> Result<Vec<ManifestFile>, CliError> {
        paths
            .iter()
            .map(|path| {
                Ok(ManifestFile {
                    path: path.display().to_string(),
                    sha256: crate::corpus::sha256_hex_file(path)?,
                })
            })
            .collect()
    };
    let manifest = Manifest {
        subcommand: subcommand.to_string(),
        config: effective.clone(),
        inputs: digest_all(inputs)?,
        outputs: digest_all(outputs)?,
    };
    let json = crate::util::canonical_json_pretty(&manifest)?;
    let dir = data_dir().join("manifests");
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let name = format!("{}.json", &crate::corpus::sha256_hex(json.as_bytes())[..16]);
    let path = dir.join(name);
    std::fs::write(&path, json).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    eprintln!("manifest: {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_section_is_usage_error() {
        let mut file = FileConfig::new();
        file.insert("warp".to_string(), BTreeMap::new());
        assert!(matches!(build_command(&file), Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let mut file = FileConfig::new();
        let mut section = BTreeMap::new();
        section.insert("warp-speed".to_string(), "9".to_string());
        file.insert("train".to_string(), section);
        assert!(matches!(build_command(&file), Err(CliError::Usage(_))));
    }

    #[test]
    fn file_values_relax_required_flags() {
        let mut file = FileConfig::new();
        let mut section = BTreeMap::new();
        section.insert("url".to_string(), "file.csv".to_string());
        section.insert("digest".to_string(), "00".to_string());
        section.insert("out".to_string(), "cache.csv".to_string());
        file.insert("fetch".to_string(), section);
        let command = build_command(&file).unwrap();
        // Parsing succeeds with no flags at all.
        let matches = command.try_get_matches_from(["toxpipe", "fetch"]).unwrap();
        let (_, sub) = matches.subcommand().unwrap();
        assert_eq!(sub.get_one::<String>("url").unwrap(), "file.csv");
    }

    #[test]
    fn error_codes_are_module_qualified() {
        let usage = CliError::Usage("x".to_string());
        assert_eq!(usage.code(), "cli/usage");
        assert_eq!(usage.exit_code(), 1);

        let integrity = CliError::Corpus(CorpusError::DigestMismatch {
            path: "p".to_string(),
            expected: "a".to_string(),
            actual: "b".to_string(),
        });
        assert_eq!(integrity.code(), "corpus/integrity");
        assert_eq!(integrity.exit_code(), 2);

        let compat = CliError::Train(TrainError::VocabDigestMismatch {
            expected: "a".to_string(),
            provided: "b".to_string(),
        });
        assert_eq!(compat.code(), "training/compat");
    }
}
