//! Vocabulary construction, pretrained word-vector loading and fixed-length
//! encoding with attention masks.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{sha256_hex, LabeledExample};
use crate::preprocess::{clean, CleanTokens, CleaningConfig};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Magic bytes of the encoded-corpus binary format.
pub const ENCODED_MAGIC: &[u8; 4] = b"TXEC";
pub const ENCODED_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("vocabulary cannot be built from an empty corpus")]
    EmptyCorpus,
    #[error("min_freq must be >= 1, got {0}")]
    BadMinFreq(usize),
    #[error("max_size must be >= 3 to hold PAD, UNK and a token, got {0}")]
    BadMaxSize(usize),
    #[error("line {line} of {path}: expected a word and {dim} values: {reason}")]
    VectorFormat {
        path: String,
        line: usize,
        dim: usize,
        reason: String,
    },
    #[error("vocabulary file {path} is invalid at line {line}: {reason}")]
    VocabFormat {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("encoded corpus {path} is corrupt: {reason}")]
    EncodedFormat { path: String, reason: String },
    #[error("max_len must be >= 1")]
    BadMaxLen,
}

/// Token-to-id mapping with dense ids; PAD is 0, UNK is 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Ranks train-split tokens by (frequency desc, token asc), keeps those
    /// with frequency >= `min_freq`, and truncates to `max_size` ids
    /// including the two reserved ones.
    pub fn build(
        train_corpus: &[CleanTokens],
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self, VocabError> {
        if train_corpus.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        if min_freq < 1 {
            return Err(VocabError::BadMinFreq(min_freq));
        }
        if max_size < 3 {
            return Err(VocabError::BadMaxSize(max_size));
        }

        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in train_corpus {
            for token in &doc.tokens {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, count)| count >= min_freq)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - 2);

        let mut tokens = Vec::with_capacity(ranked.len() + 2);
        tokens.push(PAD_TOKEN.to_string());
        tokens.push(UNK_TOKEN.to_string());
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, falling back to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// SHA-256 over the canonical serialization (one token per line in id
    /// order). Saving then hashing the file yields the same value.
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_bytes().as_bytes())
    }

    fn canonical_bytes(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        fs::write(path, self.canonical_bytes()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let fail = |line: usize, reason: &str| VocabError::VocabFormat {
            path: path.display().to_string(),
            line,
            reason: reason.to_string(),
        };
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(fail(1, "file must start with the PAD and UNK tokens"));
        }
        let mut seen = HashMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(fail(i + 1, "empty token"));
            }
            if seen.insert(token.clone(), i).is_some() {
                return Err(fail(i + 1, "duplicate token"));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Row provenance for the embedding matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowProvenance {
    Pretrained,
    Initialized,
}

/// Dense `[vocab_size x dim]` embedding table aligned with vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    values: Vec<f64>,
    provenance: Vec<RowProvenance>,
}

impl EmbeddingMatrix {
    pub fn rows(&self) -> usize {
        self.provenance.len()
    }

    pub fn row(&self, id: u32) -> &[f64] {
        let start = id as usize * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn provenance(&self, id: u32) -> RowProvenance {
        self.provenance[id as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Fraction of non-reserved vocabulary rows found in the vector file.
    pub fn coverage(&self) -> f64 {
        let candidates = self.rows().saturating_sub(2);
        if candidates == 0 {
            return 0.0;
        }
        let pretrained = self
            .provenance
            .iter()
            .filter(|&&p| p == RowProvenance::Pretrained)
            .count();
        pretrained as f64 / candidates as f64
    }
}

/// Loads whitespace-delimited word vectors (`word v1 .. v_dim` per line)
/// into a matrix aligned with `vocab`. Vocabulary rows missing from the file
/// are seeded uniform(-0.05, 0.05) from `seed`; the PAD row stays zero.
pub fn load_embeddings(
    vector_file: &Path,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingMatrix, VocabError> {
    let file = fs::File::open(vector_file).map_err(|source| VocabError::Io {
        path: vector_file.display().to_string(),
        source,
    })?;
    load_embeddings_reader(
        BufReader::new(file),
        vocab,
        dim,
        seed,
        &vector_file.display().to_string(),
    )
}

pub fn load_embeddings_reader<R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
    path: &str,
) -> Result<EmbeddingMatrix, VocabError> {
    let mut pretrained: HashMap<u32, Vec<f64>> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| VocabError::Io {
            path: path.to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < dim + 1 {
            return Err(VocabError::VectorFormat {
                path: path.to_string(),
                line: i + 1,
                dim,
                reason: format!("found {} fields", fields.len()),
            });
        }
        // Trailing `dim` fields are the vector; the prefix (possibly
        // containing spaces) is the word.
        let split_at = fields.len() - dim;
        let mut vector = Vec::with_capacity(dim);
        for field in &fields[split_at..] {
            let value = field.parse::<f64>().map_err(|_| VocabError::VectorFormat {
                path: path.to_string(),
                line: i + 1,
                dim,
                reason: format!("{field:?} is not a number"),
            })?;
            vector.push(value);
        }
        let word = fields[..split_at].join(" ");
        if let Some(id) = vocab.lookup(&word) {
            if id != PAD_ID {
                pretrained.insert(id, vector);
            }
        }
    }

    let rows = vocab.size();
    let mut values = vec![0.0; rows * dim];
    let mut provenance = vec![RowProvenance::Initialized; rows];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in 0..rows as u32 {
        let start = id as usize * dim;
        if id == PAD_ID {
            continue; // stays zero
        }
        if let Some(vector) = pretrained.get(&id) {
            values[start..start + dim].copy_from_slice(vector);
            provenance[id as usize] = RowProvenance::Pretrained;
        } else {
            for v in &mut values[start..start + dim] {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }

    Ok(EmbeddingMatrix {
        dim,
        values,
        provenance,
    })
}

/// Fixed-length token-id sequence with its attention mask and label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub label: u8,
}

impl EncodedExample {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Maps the first `max_len` tokens to ids (UNK for out-of-vocabulary) and
/// right-pads with PAD; the mask is 1 on real positions, 0 on padding.
pub fn encode(
    tokens: &CleanTokens,
    vocab: &Vocabulary,
    max_len: usize,
    label: u8,
) -> EncodedExample {
    let kept = tokens.tokens.len().min(max_len);
    let mut ids = Vec::with_capacity(max_len);
    let mut mask = Vec::with_capacity(max_len);
    for token in &tokens.tokens[..kept] {
        ids.push(vocab.id(token));
        mask.push(1);
    }
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, 0);
    EncodedExample { ids, mask, label }
}

/// Cleans and encodes labeled examples, dropping those whose cleaned token
/// sequence is empty. Returns the encoded corpus and the dropped count.
pub fn encode_labeled(
    examples: &[LabeledExample],
    cleaning: &CleaningConfig,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<EncodedExample>, usize), VocabError> {
    if max_len == 0 {
        return Err(VocabError::BadMaxLen);
    }
    let mut encoded = Vec::with_capacity(examples.len());
    let mut dropped = 0usize;
    for example in examples {
        let tokens = clean(&example.text, cleaning);
        if tokens.is_empty() {
            dropped += 1;
            continue;
        }
        encoded.push(encode(&tokens, vocab, max_len, example.label));
    }
    Ok((encoded, dropped))
}

// ---------------------------------------------------------------------------
// Encoded corpus binary format: header {magic, version, max_len, count},
// then per-example records of little-endian u32 ids, u8 mask, u8 label.
// ---------------------------------------------------------------------------

pub fn write_encoded(
    path: &Path,
    examples: &[EncodedExample],
    max_len: usize,
) -> Result<(), VocabError> {
    let io_err = |source| VocabError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::with_capacity(16 + examples.len() * (max_len * 5 + 1));
    out.extend_from_slice(ENCODED_MAGIC);
    out.extend_from_slice(&ENCODED_VERSION.to_le_bytes());
    out.extend_from_slice(&(max_len as u32).to_le_bytes());
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    for example in examples {
        debug_assert_eq!(example.ids.len(), max_len);
        for &id in &example.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&example.mask);
        out.push(example.label);
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&out).map_err(io_err)
}

pub fn read_encoded(path: &Path) -> Result<(Vec<EncodedExample>, usize), VocabError> {
    let io_err = |source| VocabError::Io {
        path: path.display().to_string(),
        source,
    };
    let corrupt = |reason: &str| VocabError::EncodedFormat {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };

    let mut file = fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() < 20 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[0..4] != ENCODED_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != ENCODED_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let max_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if max_len == 0 {
        return Err(corrupt("zero max_len"));
    }
    let record = max_len * 4 + max_len + 1;
    let expected = 20 + count * record;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes for {count} records, found {}",
            bytes.len()
        )));
    }

    let mut examples = Vec::with_capacity(count);
    let mut offset = 20;
    for _ in 0..count {
        let mut ids = Vec::with_capacity(max_len);
        for _ in 0..max_len {
            ids.push(u32::from_le_bytes(
                bytes[offset..offset + 4].try_into().unwrap(),
            ));
            offset += 4;
        }
        let mask = bytes[offset..offset + max_len].to_vec();
        offset += max_len;
        let label = bytes[offset];
        offset += 1;
        if mask.iter().any(|&m| m > 1) || label > 1 {
            return Err(corrupt("mask and label bytes must be 0 or 1"));
        }
        examples.push(EncodedExample { ids, mask, label });
    }
    Ok((examples, max_len))
}
