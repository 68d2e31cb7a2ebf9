//! Deterministic text cleaning: rule-based stripping, stop-word removal,
//! noun-plural lemmatization and corpus length statistics.
//!
//! The cleaning pipeline is a fixed eight-rule sequence followed by stop-word
//! removal and lemmatization. Every step is pure and locale-independent, so
//! the same input bytes always produce the same tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords.txt");
const BUNDLED_LEMMA_EXCEPTIONS: &str = include_str!("../data/lemma_exceptions.txt");

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("lemma exception line {line} needs two fields: {text:?}")]
    BadLemmaLine { line: usize, text: String },
    #[error("stop-word list entry {line} is not lowercase: {text:?}")]
    BadStopword { line: usize, text: String },
    #[error("duplicate stop-word entry {text:?} at line {line}")]
    DuplicateStopword { line: usize, text: String },
}

/// Tokens produced by [`clean`]: lowercase `[a-z]+` words with stop words
/// removed and plurals reduced.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CleanTokens {
    pub tokens: Vec<String>,
}

impl CleanTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Stop-word list and lemma exception table driving [`clean`].
#[derive(Debug, Clone)]
pub struct CleaningConfig {
    stopword_order: Vec<String>,
    stopwords: HashSet<String>,
    lemma_exceptions: HashMap<String, String>,
}

impl CleaningConfig {
    /// The bundled assets: a 179-entry English stop-word list and an
    /// irregular-plural table.
    pub fn bundled() -> Self {
        Self::from_sources(BUNDLED_STOPWORDS, BUNDLED_LEMMA_EXCEPTIONS)
            .expect("bundled data assets are valid")
    }

    pub fn from_files(stopword_path: &Path, lemma_path: &Path) -> Result<Self, PreprocessError> {
        let read = |path: &Path| {
            std::fs::read_to_string(path).map_err(|source| PreprocessError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Self::from_sources(&read(stopword_path)?, &read(lemma_path)?)
    }

    /// Parses the two line-oriented formats: one entry per line, UTF-8,
    /// `#` starts a comment line, blank lines ignored.
    pub fn from_sources(stopwords: &str, lemmas: &str) -> Result<Self, PreprocessError> {
        let mut stopword_order = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in stopwords.lines().enumerate() {
            let entry = line.trim();
            if entry.is_empty() || entry.starts_with('#') {
                continue;
            }
            if entry != entry.to_lowercase() {
                return Err(PreprocessError::BadStopword {
                    line: idx + 1,
                    text: entry.to_string(),
                });
            }
            if !seen.insert(entry.to_string()) {
                return Err(PreprocessError::DuplicateStopword {
                    line: idx + 1,
                    text: entry.to_string(),
                });
            }
            stopword_order.push(entry.to_string());
        }

        let mut lemma_exceptions = HashMap::new();
        for (idx, line) in lemmas.lines().enumerate() {
            let entry = line.trim();
            if entry.is_empty() || entry.starts_with('#') {
                continue;
            }
            let mut fields = entry.split_whitespace();
            match (fields.next(), fields.next(), fields.next()) {
                (Some(form), Some(lemma), None) => {
                    lemma_exceptions.insert(form.to_string(), lemma.to_string());
                }
                _ => {
                    return Err(PreprocessError::BadLemmaLine {
                        line: idx + 1,
                        text: entry.to_string(),
                    })
                }
            }
        }

        Ok(Self {
            stopwords: stopword_order.iter().cloned().collect(),
            stopword_order,
            lemma_exceptions,
        })
    }

    pub fn stopwords(&self) -> &[String] {
        &self.stopword_order
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(token)
    }
}

/// Per-document token-count distribution over a cleaned corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LengthHistogram {
    pub bins: BTreeMap<usize, usize>,
    pub max_observed: usize,
}

impl LengthHistogram {
    /// `length,count` rows sorted by length ascending.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("length,count\n");
        for (length, count) in &self.bins {
            let _ = writeln!(out, "{length},{count}");
        }
        out
    }
}

/// Cleans raw text into tokens. Rules run in a fixed order:
///
/// 1. lowercase
/// 2. delete URL spans (`http://…`, `https://…`, `www.…` up to whitespace)
/// 3. delete HTML entities `&word;` and tags `<…>`
/// 4. delete `@mentions`; keep hashtag words without the `#`
/// 5. delete `[bracketed]` spans
/// 6. delete non-ASCII bytes
/// 7. replace remaining non-alphabetic characters with spaces
/// 8. split on whitespace
///
/// then stop-word removal and lemmatization. A final stop-word pass drops
/// the rare token whose lemma lands on a stop word, which keeps the output
/// free of stop words and makes `clean` idempotent.
pub fn clean(text: &str, config: &CleaningConfig) -> CleanTokens {
    let lowered = text.to_lowercase();
    let no_urls = strip_url_spans(&lowered);
    let no_html = strip_html(&no_urls);
    let no_handles = strip_handles(&no_html);
    let no_brackets = strip_bracketed(&no_handles);
    let ascii: String = no_brackets.chars().filter(char::is_ascii).collect();
    let spaced: String = ascii
        .chars()
        .map(|c| if c.is_ascii_lowercase() { c } else { ' ' })
        .collect();

    let tokens = spaced
        .split_whitespace()
        .filter(|t| !config.is_stopword(t))
        .map(|t| lemmatize(t, config))
        .filter(|t| !config.is_stopword(t))
        .collect();
    CleanTokens { tokens }
}

/// Reduces a noun plural to its singular. The exception table wins; otherwise
/// the first matching suffix rule applies: `-sses` -> `-ss`, `-ies` -> `-y`
/// (length > 4), `-s` dropped unless the word ends in `ss`, `us` or `is`.
pub fn lemmatize(token: &str, config: &CleaningConfig) -> String {
    if let Some(lemma) = config.lemma_exceptions.get(token) {
        return lemma.clone();
    }
    if let Some(stem) = token.strip_suffix("sses") {
        return format!("{stem}ss");
    }
    if token.len() > 4 {
        if let Some(stem) = token.strip_suffix("ies") {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = token.strip_suffix('s') {
        if !token.ends_with("ss") && !token.ends_with("us") && !token.ends_with("is") {
            return stem.to_string();
        }
    }
    token.to_string()
}

/// Exact per-length document counts for a cleaned corpus.
pub fn length_histogram(corpus: &[CleanTokens]) -> LengthHistogram {
    let mut bins = BTreeMap::new();
    let mut max_observed = 0;
    for doc in corpus {
        let len = doc.len();
        *bins.entry(len).or_insert(0) += 1;
        max_observed = max_observed.max(len);
    }
    LengthHistogram { bins, max_observed }
}

fn strip_url_spans(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let rest = &text[i..];
        if rest.starts_with("http://") || rest.starts_with("https://") || rest.starts_with("www.") {
            let span = rest.find(char::is_whitespace).unwrap_or(rest.len());
            i += span;
            continue;
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

fn strip_html(text: &str) -> String {
    // Entities `&word;` first, then tags `<...>`.
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch == '&' {
            let mut entity = String::new();
            while let Some(&next) = chars.peek() {
                if next.is_alphanumeric() || next == '_' {
                    entity.push(next);
                    chars.next();
                } else {
                    break;
                }
            }
            if !entity.is_empty() && chars.peek() == Some(&';') {
                chars.next();
                continue;
            }
            out.push(ch);
            out.push_str(&entity);
            continue;
        }
        if ch == '<' {
            let mut consumed = Vec::new();
            let mut closed = false;
            while let Some(&next) = chars.peek() {
                consumed.push(next);
                chars.next();
                if next == '>' {
                    closed = true;
                    break;
                }
            }
            if closed {
                continue;
            }
            out.push(ch);
            out.extend(consumed);
            continue;
        }
        out.push(ch);
    }
    out
}

fn strip_handles(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '@' => {
                let mut took = false;
                while let Some(&next) = chars.peek() {
                    if next.is_alphanumeric() || next == '_' {
                        chars.next();
                        took = true;
                    } else {
                        break;
                    }
                }
                if !took {
                    out.push(ch);
                }
            }
            // Keep the hashtag word, drop the marker.
            '#' => {}
            _ => out.push(ch),
        }
    }
    out
}

fn strip_bracketed(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch == '[' {
            let mut consumed = Vec::new();
            let mut closed = false;
            while let Some(&next) = chars.peek() {
                consumed.push(next);
                chars.next();
                if next == ']' {
                    closed = true;
                    break;
                }
            }
            if closed {
                continue;
            }
            out.push(ch);
            out.extend(consumed);
            continue;
        }
        out.push(ch);
    }
    out
}
