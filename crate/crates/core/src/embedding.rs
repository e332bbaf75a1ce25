//! Utterance vector providers.
//!
//! Sentence embeddings are computed offline by a frozen encoder and imported
//! through a JSON-lines exchange file. Word vectors back the isolated
//! baseline, and [`hash_embed`] gives a deterministic stand-in when no real
//! vectors are available.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Corpus, Dialog, Utterance};

pub type EmbeddingVector = Array1<f64>;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("line {line}: expected dimension {expected}, found {found}")]
    DimMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("cannot pool an empty sequence")]
    EmptySequence,
    #[error("vectors have mismatched dimensions")]
    MixedDimensions,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("bad embedding source `{0}` (expected a file path or `hash:<dim>[:<seed>]`)")]
    BadSource(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

/// Key of an utterance in a sentence-embedding store: `dialogId#index`.
pub fn utterance_key(dialog_id: &str, index: usize) -> String {
    format!("{dialog_id}#{index}")
}

fn seeded_rng(seed: u64, text: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Deterministic unit-norm pseudo-embedding of `text`.
pub fn hash_embed(text: &str, dim: usize, seed: u64) -> EmbeddingVector {
    assert!(dim >= 1, "hash_embed needs dim >= 1");
    let mut rng = seeded_rng(seed, text);
    let mut v: Array1<f64> = (0..dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
    } else {
        v /= norm;
    }
    v
}

/// Lowercases, splits on whitespace and detaches trailing punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let word = word.to_lowercase();
        let stem = word.trim_end_matches(|c: char| c.is_ascii_punctuation());
        if stem.is_empty() || stem.len() == word.len() {
            tokens.push(word);
        } else {
            let punct = word[stem.len()..].to_string();
            tokens.push(stem.to_string());
            tokens.push(punct);
        }
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum OovPolicy {
    Zero,
    Hashed { seed: u64 },
}

impl Default for OovPolicy {
    fn default() -> Self {
        OovPolicy::Hashed { seed: 0 }
    }
}

/// Token → vector table in the common word-vector text format.
#[derive(Debug, Clone)]
pub struct WordEmbeddingTable {
    vocabulary: HashMap<String, EmbeddingVector>,
    dim: usize,
    oov: OovPolicy,
}

impl WordEmbeddingTable {
    /// An empty table: every token falls through to the OOV policy.
    pub fn empty(dim: usize, oov: OovPolicy) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        Ok(Self {
            vocabulary: HashMap::new(),
            dim,
            oov,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn oov_policy(&self) -> OovPolicy {
        self.oov
    }

    pub fn insert(&mut self, token: &str, vector: EmbeddingVector) -> Result<()> {
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                line: 0,
                expected: self.dim,
                found: vector.len(),
            });
        }
        self.vocabulary.insert(token.to_string(), vector);
        Ok(())
    }

    /// Reads `token v1 ... vd` lines. A leading `count dim` header (fastText
    /// `.vec` files) is accepted and checked.
    pub fn read(reader: impl BufRead, oov: OovPolicy) -> Result<Self> {
        let mut vocabulary = HashMap::new();
        let mut dim: Option<usize> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else {
                continue;
            };
            let rest: Vec<&str> = fields.collect();
            if lineno == 1 && rest.len() == 1 {
                if let (Ok(_), Ok(d)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                    if d == 0 {
                        return Err(EmbeddingError::ZeroDimension);
                    }
                    dim = Some(d);
                    continue;
                }
            }
            let values = rest
                .iter()
                .map(|f| parse_finite(f, lineno))
                .collect::<Result<Vec<_>>>()?;
            let expected = *dim.get_or_insert(values.len());
            if values.len() != expected || expected == 0 {
                return Err(EmbeddingError::DimMismatch {
                    line: lineno,
                    expected,
                    found: values.len(),
                });
            }
            if vocabulary
                .insert(token.to_string(), Array1::from(values))
                .is_some()
            {
                return Err(EmbeddingError::DuplicateKey {
                    line: lineno,
                    key: token.to_string(),
                });
            }
        }
        let dim = dim.ok_or(EmbeddingError::MalformedRecord {
            line: 0,
            reason: "word table has no vectors".into(),
        })?;
        Ok(Self {
            vocabulary,
            dim,
            oov,
        })
    }

    pub fn load(path: &Path, oov: OovPolicy) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?), oov)
    }

    pub fn lookup(&self, token: &str) -> EmbeddingVector {
        match (self.vocabulary.get(token), self.oov) {
            (Some(v), _) => v.clone(),
            (None, OovPolicy::Zero) => Array1::zeros(self.dim),
            (None, OovPolicy::Hashed { seed }) => hash_embed(token, self.dim, seed),
        }
    }
}

fn parse_finite(field: &str, line: usize) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(EmbeddingError::MalformedRecord {
            line,
            reason: format!("`{field}` is not a finite number"),
        }),
    }
}

/// One vector per token of the utterance, in order.
pub fn embed_words(utterance: &Utterance, table: &WordEmbeddingTable) -> Vec<EmbeddingVector> {
    tokenize(&utterance.text)
        .iter()
        .map(|t| table.lookup(t))
        .collect()
}

pub fn mean_pool(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector> {
    let first = vectors.first().ok_or(EmbeddingError::EmptySequence)?;
    let mut sum = Array1::zeros(first.len());
    for v in vectors {
        if v.len() != first.len() {
            return Err(EmbeddingError::MixedDimensions);
        }
        sum += v;
    }
    Ok(sum / vectors.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    provider: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreRecord {
    key: String,
    vector: Vec<f64>,
}

/// Frozen per-utterance sentence embeddings. There is no mutable access to
/// stored vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbeddingStore {
    provider: String,
    dim: usize,
    entries: BTreeMap<String, EmbeddingVector>,
}

impl SentenceEmbeddingStore {
    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&EmbeddingVector> {
        self.entries.get(key)
    }

    pub fn get_utterance(&self, dialog: &Dialog, index: usize) -> Option<&EmbeddingVector> {
        self.get(&utterance_key(&dialog.id, index))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses the JSON-lines exchange format: a `{"provider", "dim"}` header
    /// followed by `{"key", "vector"}` records.
    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => {
                    return Err(EmbeddingError::MalformedRecord {
                        line: 1,
                        reason: "missing header".into(),
                    })
                }
                Some((_, line)) if line.as_ref().is_ok_and(|l| l.trim().is_empty()) => continue,
                Some((i, line)) => {
                    let line = line?;
                    let header: StoreHeader = serde_json::from_str(&line).map_err(|e| {
                        EmbeddingError::MalformedRecord {
                            line: i + 1,
                            reason: format!("bad header: {e}"),
                        }
                    })?;
                    if header.dim == 0 {
                        return Err(EmbeddingError::ZeroDimension);
                    }
                    break header;
                }
            }
        };
        let mut entries = BTreeMap::new();
        for (i, line) in lines {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: StoreRecord =
                serde_json::from_str(&line).map_err(|e| EmbeddingError::MalformedRecord {
                    line: lineno,
                    reason: e.to_string(),
                })?;
            if record.vector.len() != header.dim {
                return Err(EmbeddingError::DimMismatch {
                    line: lineno,
                    expected: header.dim,
                    found: record.vector.len(),
                });
            }
            if record.vector.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::MalformedRecord {
                    line: lineno,
                    reason: "non-finite value".into(),
                });
            }
            if entries.contains_key(&record.key) {
                return Err(EmbeddingError::DuplicateKey {
                    line: lineno,
                    key: record.key,
                });
            }
            entries.insert(record.key, Array1::from(record.vector));
        }
        Ok(Self {
            provider: header.provider,
            dim: header.dim,
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let header = StoreHeader {
            provider: self.provider.clone(),
            dim: self.dim,
        };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for (key, vector) in &self.entries {
            let record = StoreRecord {
                key: key.clone(),
                vector: vector.to_vec(),
            };
            writeln!(out, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        }
        Ok(())
    }

    /// Builds a store by embedding every utterance of `corpora` with
    /// [`hash_embed`].
    pub fn hashed<'a>(corpora: impl IntoIterator<Item = &'a Corpus>, dim: usize, seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        for corpus in corpora {
            for dialog in &corpus.dialogs {
                for u in &dialog.utterances {
                    entries.insert(utterance_key(&dialog.id, u.index), hash_embed(&u.text, dim, seed));
                }
            }
        }
        Self {
            provider: format!("hash-{dim}-{seed}"),
            dim,
            entries,
        }
    }

    /// Assembles a store from explicit vectors.
    pub fn from_entries(
        provider: &str,
        dim: usize,
        entries: impl IntoIterator<Item = (String, EmbeddingVector)>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDimension);
        }
        let mut map = BTreeMap::new();
        for (i, (key, v)) in entries.into_iter().enumerate() {
            if v.len() != dim {
                return Err(EmbeddingError::DimMismatch {
                    line: i + 1,
                    expected: dim,
                    found: v.len(),
                });
            }
            if map.insert(key.clone(), v).is_some() {
                return Err(EmbeddingError::DuplicateKey { line: i + 1, key });
            }
        }
        Ok(Self {
            provider: provider.to_string(),
            dim,
            entries: map,
        })
    }
}

/// Where sentence embeddings come from: an exported file, or hashed text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EmbeddingSource {
    File(std::path::PathBuf),
    Hashed { dim: usize, seed: u64 },
}

impl EmbeddingSource {
    pub fn resolve<'a>(
        &self,
        corpora: impl IntoIterator<Item = &'a Corpus>,
    ) -> Result<SentenceEmbeddingStore> {
        match self {
            EmbeddingSource::File(path) => SentenceEmbeddingStore::load(path),
            EmbeddingSource::Hashed { dim, seed } => {
                Ok(SentenceEmbeddingStore::hashed(corpora, *dim, *seed))
            }
        }
    }
}

impl FromStr for EmbeddingSource {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("hash:") else {
            if s.is_empty() {
                return Err(EmbeddingError::BadSource(s.to_string()));
            }
            return Ok(EmbeddingSource::File(s.into()));
        };
        let bad = || EmbeddingError::BadSource(s.to_string());
        let mut parts = rest.split(':');
        let dim: usize = parts.next().and_then(|d| d.parse().ok()).ok_or_else(bad)?;
        let seed: u64 = match parts.next() {
            Some(p) => p.parse().map_err(|_| bad())?,
            None => 0,
        };
        if dim == 0 || parts.next().is_some() {
            return Err(bad());
        }
        Ok(EmbeddingSource::Hashed { dim, seed })
    }
}

impl TryFrom<String> for EmbeddingSource {
    type Error = EmbeddingError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EmbeddingSource> for String {
    fn from(src: EmbeddingSource) -> String {
        match src {
            EmbeddingSource::File(p) => p.display().to_string(),
            EmbeddingSource::Hashed { dim, seed } => format!("hash:{dim}:{seed}"),
        }
    }
}
