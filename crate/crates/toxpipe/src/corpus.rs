//! Dataset acquisition, schema-specific parsing, label mapping and
//! train/test splitting.
//!
//! Three CSV schemas are supported. Each one is pinned to its required
//! column names and mapped onto a uniform binary-labeled corpus:
//!
//! * `jigsaw`   — `comment_text`, `target`; a fractional annotator score is
//!   binarized at a threshold (default 0.5, inclusive).
//! * `davidson` — `tweet`, `class`; class 0 maps to hate, class 2 to
//!   non-hate, class 1 (offensive) is dropped.
//! * `hasoc`    — `text`, `task_2`; `HATE` maps to hate, `NONE` to non-hate,
//!   `OFFN` and `PRFN` are dropped.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is missing required column {column:?} for schema {schema}")]
    MissingColumn {
        path: String,
        schema: Schema,
        column: &'static str,
    },
    #[error("malformed row {row} in {path}: {reason}")]
    MalformedRow {
        path: String,
        row: usize,
        reason: String,
    },
    #[error("record {id}: {reason}")]
    Domain { id: String, reason: String },
    #[error("digest mismatch for {path}: expected {expected}, got {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error("fetch of {url} failed (retryable): {reason}")]
    Fetch { url: String, reason: String },
    #[error("expected digest {digest:?} is not 64 lowercase hex characters")]
    BadDigest { digest: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("split ratio {ratio} is outside (0, 1)")]
    BadRatio { ratio: f64 },
    #[error("corpus needs at least 2 examples to split, got {n}")]
    TooSmallToSplit { n: usize },
    #[error("corpus line {line} in {path} is not label<TAB>source<TAB>text")]
    BadCorpusLine { path: String, line: usize },
}

/// The supported input schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Jigsaw,
    Davidson,
    Hasoc,
}

impl Schema {
    pub fn text_column(self) -> &'static str {
        match self {
            Schema::Jigsaw => "comment_text",
            Schema::Davidson => "tweet",
            Schema::Hasoc => "text",
        }
    }

    pub fn label_column(self) -> &'static str {
        match self {
            Schema::Jigsaw => "target",
            Schema::Davidson => "class",
            Schema::Hasoc => "task_2",
        }
    }

    /// Optional id column; the row number stands in when absent.
    pub fn id_column(self) -> Option<&'static str> {
        match self {
            Schema::Jigsaw => Some("id"),
            Schema::Davidson => None,
            Schema::Hasoc => Some("text_id"),
        }
    }

    pub fn source(self) -> Source {
        match self {
            Schema::Jigsaw => Source::Jigsaw,
            Schema::Davidson => Source::Davidson,
            Schema::Hasoc => Source::Hasoc,
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Schema::Jigsaw => "jigsaw",
            Schema::Davidson => "davidson",
            Schema::Hasoc => "hasoc",
        };
        f.write_str(name)
    }
}

impl FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jigsaw" => Ok(Schema::Jigsaw),
            "davidson" => Ok(Schema::Davidson),
            "hasoc" => Ok(Schema::Hasoc),
            other => Err(format!(
                "unknown schema {other:?}, expected jigsaw, davidson or hasoc"
            )),
        }
    }
}

/// Schema-specific label payload carried by a parsed row.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Fraction of annotators that marked the comment toxic.
    Fraction(f64),
    /// Davidson class code: 0 hate, 1 offensive, 2 neither.
    ClassCode(i64),
    /// HASOC task-2 code: HATE, OFFN, PRFN or NONE.
    TaskCode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub text: String,
    pub payload: Payload,
}

/// Which dataset an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Jigsaw,
    Davidson,
    Hasoc,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Jigsaw => "jigsaw",
            Source::Davidson => "davidson",
            Source::Hasoc => "hasoc",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jigsaw" => Ok(Source::Jigsaw),
            "davidson" => Ok(Source::Davidson),
            "hasoc" => Ok(Source::Hasoc),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// One comment with its binary hate label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub text: String,
    pub label: u8,
    pub source: Source,
}

/// Deterministic train/test partition of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub seed: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub n_total: usize,
    pub n_positive: usize,
    pub positive_fraction: f64,
}

/// Rows parsed from one CSV file. Rows whose text is empty are dropped and
/// counted instead of failing the parse.
#[derive(Debug, Clone)]
pub struct CsvParse {
    pub records: Vec<RawRecord>,
    pub dropped_empty_text: usize,
}

pub fn parse_csv(path: &Path, schema: Schema) -> Result<CsvParse, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv_reader(file, schema, &path.display().to_string())
}

pub fn parse_csv_reader<R: Read>(
    reader: R,
    schema: Schema,
    path: &str,
) -> Result<CsvParse, CorpusError> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);

    let headers = csv_reader
        .headers()
        .map_err(|e| CorpusError::MalformedRow {
            path: path.to_string(),
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let text_idx = find(schema.text_column()).ok_or(CorpusError::MissingColumn {
        path: path.to_string(),
        schema,
        column: schema.text_column(),
    })?;
    let label_idx = find(schema.label_column()).ok_or(CorpusError::MissingColumn {
        path: path.to_string(),
        schema,
        column: schema.label_column(),
    })?;
    let id_idx = schema.id_column().and_then(find);

    let mut records = Vec::new();
    let mut dropped_empty_text = 0usize;
    for (i, row) in csv_reader.records().enumerate() {
        // Row numbers are 1-based data rows; the header is row 0.
        let row_number = i + 1;
        let row = row.map_err(|e| CorpusError::MalformedRow {
            path: path.to_string(),
            row: row_number,
            reason: e.to_string(),
        })?;
        let field = |idx: usize| {
            row.get(idx).ok_or_else(|| CorpusError::MalformedRow {
                path: path.to_string(),
                row: row_number,
                reason: format!("missing field {idx}"),
            })
        };

        let text = field(text_idx)?.to_string();
        if text.is_empty() {
            dropped_empty_text += 1;
            continue;
        }
        let label_field = field(label_idx)?;
        let payload = match schema {
            Schema::Jigsaw => {
                Payload::Fraction(label_field.trim().parse::<f64>().map_err(|_| {
                    CorpusError::MalformedRow {
                        path: path.to_string(),
                        row: row_number,
                        reason: format!("target {label_field:?} is not a number"),
                    }
                })?)
            }
            Schema::Davidson => {
                Payload::ClassCode(label_field.trim().parse::<i64>().map_err(|_| {
                    CorpusError::MalformedRow {
                        path: path.to_string(),
                        row: row_number,
                        reason: format!("class {label_field:?} is not an integer"),
                    }
                })?)
            }
            Schema::Hasoc => Payload::TaskCode(label_field.trim().to_string()),
        };
        let id = match id_idx {
            Some(idx) => field(idx)?.to_string(),
            None => row_number.to_string(),
        };
        records.push(RawRecord { id, text, payload });
    }

    Ok(CsvParse {
        records,
        dropped_empty_text,
    })
}

/// Binarizes a fractional toxicity target: label 1 iff `target >= threshold`.
pub fn binarize_jigsaw(record: &RawRecord, threshold: f64) -> Result<LabeledExample, CorpusError> {
    let target = match record.payload {
        Payload::Fraction(t) => t,
        _ => {
            return Err(CorpusError::Domain {
                id: record.id.clone(),
                reason: "payload is not a fractional target".to_string(),
            })
        }
    };
    if !(0.0..=1.0).contains(&target) {
        return Err(CorpusError::Domain {
            id: record.id.clone(),
            reason: format!("target {target} is outside [0, 1]"),
        });
    }
    Ok(LabeledExample {
        text: record.text.clone(),
        label: u8::from(target >= threshold),
        source: Source::Jigsaw,
    })
}

/// Maps a Davidson class code; class 1 (offensive) rows are dropped.
pub fn map_davidson(record: &RawRecord) -> Result<Option<LabeledExample>, CorpusError> {
    let class = match record.payload {
        Payload::ClassCode(c) => c,
        _ => {
            return Err(CorpusError::Domain {
                id: record.id.clone(),
                reason: "payload is not a class code".to_string(),
            })
        }
    };
    let label = match class {
        0 => 1,
        1 => return Ok(None),
        2 => 0,
        other => {
            return Err(CorpusError::Domain {
                id: record.id.clone(),
                reason: format!("class code {other} is not in {{0, 1, 2}}"),
            })
        }
    };
    Ok(Some(LabeledExample {
        text: record.text.clone(),
        label,
        source: Source::Davidson,
    }))
}

/// Maps a HASOC task-2 code; OFFN and PRFN rows are dropped.
pub fn map_hasoc(record: &RawRecord) -> Result<Option<LabeledExample>, CorpusError> {
    let code = match &record.payload {
        Payload::TaskCode(c) => c.as_str(),
        _ => {
            return Err(CorpusError::Domain {
                id: record.id.clone(),
                reason: "payload is not a task-2 code".to_string(),
            })
        }
    };
    let label = match code {
        "HATE" => 1,
        "NONE" => 0,
        "OFFN" | "PRFN" => return Ok(None),
        other => {
            return Err(CorpusError::Domain {
                id: record.id.clone(),
                reason: format!("unknown task-2 code {other:?}"),
            })
        }
    };
    Ok(Some(LabeledExample {
        text: record.text.clone(),
        label,
        source: Source::Hasoc,
    }))
}

/// Applies the schema's label mapping to every record, dropping rows the
/// mapping excludes.
pub fn map_records(
    records: &[RawRecord],
    schema: Schema,
    jigsaw_threshold: f64,
) -> Result<Vec<LabeledExample>, CorpusError> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let mapped = match schema {
            Schema::Jigsaw => Some(binarize_jigsaw(record, jigsaw_threshold)?),
            Schema::Davidson => map_davidson(record)?,
            Schema::Hasoc => map_hasoc(record)?,
        };
        if let Some(example) = mapped {
            out.push(example);
        }
    }
    Ok(out)
}

/// First `n` examples in original order, clamped to the corpus size.
pub fn take_prefix(corpus: &[LabeledExample], n: usize) -> Vec<LabeledExample> {
    corpus[..n.min(corpus.len())].to_vec()
}

/// Shuffles deterministically by seed, then takes the last
/// `round(ratio * n)` examples as the test set.
pub fn split(corpus: &[LabeledExample], ratio: f64, seed: u64) -> Result<SplitCorpus, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    if corpus.len() < 2 {
        return Err(CorpusError::TooSmallToSplit { n: corpus.len() });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio { ratio });
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let test_size = ((ratio * n as f64).round() as usize).min(n);
    let boundary = n - test_size;
    let train = order[..boundary]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    let test = order[boundary..]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    Ok(SplitCorpus {
        train,
        test,
        seed,
        ratio,
    })
}

pub fn class_balance(corpus: &[LabeledExample]) -> Result<ClassBalance, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let n_positive = corpus.iter().filter(|e| e.label == 1).count();
    Ok(ClassBalance {
        n_total: corpus.len(),
        n_positive,
        positive_fraction: n_positive as f64 / corpus.len() as f64,
    })
}

// ---------------------------------------------------------------------------
// Canonical corpus file: one record per line, `label<TAB>source<TAB>text`,
// with backslash, tab, CR and LF escaped in the text field.
// ---------------------------------------------------------------------------

fn escape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            _ => out.push(ch),
        }
    }
    out
}

fn unescape_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

pub fn write_corpus(path: &Path, corpus: &[LabeledExample]) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = String::new();
    for example in corpus {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            example.label,
            example.source.as_str(),
            escape_text(&example.text)
        ));
    }
    file.write_all(out.as_bytes())
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub fn read_corpus(path: &Path) -> Result<Vec<LabeledExample>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.is_empty() {
            continue;
        }
        let bad_line = || CorpusError::BadCorpusLine {
            path: path.display().to_string(),
            line: i + 1,
        };
        let mut parts = line.splitn(3, '\t');
        let label = match parts.next() {
            Some("0") => 0,
            Some("1") => 1,
            _ => return Err(bad_line()),
        };
        let source = parts
            .next()
            .and_then(|s| Source::from_str(s).ok())
            .ok_or_else(bad_line)?;
        let text = unescape_text(parts.next().ok_or_else(bad_line)?);
        out.push(LabeledExample {
            text,
            label,
            source,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset acquisition with digest verification.
// ---------------------------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn sha256_hex_file(path: &Path) -> Result<String, CorpusError> {
    let mut file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(format!("{:x}", hasher.finalize()))
}

/// Downloads `source_url` to `dest` unless a file with the expected SHA-256
/// digest is already cached there. `http://` and `https://` URLs go over the
/// network; anything else is treated as a local path to copy. A re-run with
/// a valid cache performs no download.
pub fn fetch_dataset(
    source_url: &str,
    expected_digest: &str,
    dest: &Path,
) -> Result<PathBuf, CorpusError> {
    let expected = expected_digest.to_ascii_lowercase();
    if expected.len() != 64 || !expected.bytes().all(|b| b.is_ascii_hexdigit()) {
        return Err(CorpusError::BadDigest {
            digest: expected_digest.to_string(),
        });
    }

    if dest.exists() && sha256_hex_file(dest)? == expected {
        return Ok(dest.to_path_buf());
    }

    if let Some(parent) = dest.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| CorpusError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
    }

    let mut part_name = dest.as_os_str().to_os_string();
    part_name.push(".part");
    let part = PathBuf::from(part_name);
    let download = || -> Result<(), CorpusError> {
        let mut out = fs::File::create(&part).map_err(|source| CorpusError::Io {
            path: part.display().to_string(),
            source,
        })?;
        if source_url.starts_with("http://") || source_url.starts_with("https://") {
            let response = ureq::get(source_url)
                .call()
                .map_err(|e| CorpusError::Fetch {
                    url: source_url.to_string(),
                    reason: e.to_string(),
                })?;
            std::io::copy(&mut response.into_reader(), &mut out).map_err(|e| {
                CorpusError::Fetch {
                    url: source_url.to_string(),
                    reason: e.to_string(),
                }
            })?;
        } else {
            let mut src = fs::File::open(source_url).map_err(|e| CorpusError::Fetch {
                url: source_url.to_string(),
                reason: e.to_string(),
            })?;
            std::io::copy(&mut src, &mut out).map_err(|e| CorpusError::Fetch {
                url: source_url.to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(())
    };

    if let Err(e) = download() {
        let _ = fs::remove_file(&part);
        return Err(e);
    }

    let actual = sha256_hex_file(&part)?;
    if actual != expected {
        let _ = fs::remove_file(&part);
        // A stale cached file that also fails verification must not linger.
        let _ = fs::remove_file(dest);
        return Err(CorpusError::DigestMismatch {
            path: dest.display().to_string(),
            expected,
            actual,
        });
    }
    fs::rename(&part, dest).map_err(|source| CorpusError::Io {
        path: dest.display().to_string(),
        source,
    })?;
    Ok(dest.to_path_buf())
}
