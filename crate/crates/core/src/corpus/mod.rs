//! Synthetic PII-bearing corpora, the gazetteer matcher and scrubbing.

mod gazetteer;
mod matcher;
mod templates;
mod vocab;

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use gazetteer::{Gazetteer, GAZETTEER_FORMAT, GAZETTEER_VERSION};
pub use matcher::{match_pii, scrub, PiiMatcher};
pub use templates::{generate_private_corpus, generate_public_corpus, GenerationConfig, Piece, Template, TemplateSet};
pub use vocab::{Vocab, BOS, EOS, MASK};

pub const CORPUS_FORMAT: &str = "patchlab-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("template slot {{{0}}} has no gazetteer type")]
    UnknownSlot(String),
    #[error("invalid templates: {0}")]
    Template(String),
    #[error("invalid gazetteer: {0}")]
    Gazetteer(String),
    #[error("{pii_type} value {value:?} is in both the public and private partitions")]
    PartitionOverlap { pii_type: PiiType, value: String },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("document {id}: {reason}")]
    InvalidDocument { id: String, reason: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PiiType {
    Name,
    Location,
    Race,
}

impl PiiType {
    pub const ALL: [PiiType; 3] = [PiiType::Name, PiiType::Location, PiiType::Race];

    pub fn as_str(&self) -> &'static str {
        match self {
            PiiType::Name => "name",
            PiiType::Location => "location",
            PiiType::Race => "race",
        }
    }
}

impl fmt::Display for PiiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PiiType {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        PiiType::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| CorpusError::UnknownSlot(s.to_string()))
    }
}

/// A PII span `[start, end)` in token positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub pii_type: PiiType,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<usize>,
    pub annotations: Vec<Annotation>,
}

impl Document {
    /// Checks the span invariants: in bounds, sorted, non-overlapping, and
    /// each span detokenizes to its value.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        let bad = |reason: String| CorpusError::InvalidDocument { id: self.id.clone(), reason };
        let mut prev_end = 0;
        for a in &self.annotations {
            if a.start >= a.end || a.end > self.tokens.len() {
                return Err(bad(format!("span {}..{} out of bounds", a.start, a.end)));
            }
            if a.start < prev_end {
                return Err(bad(format!("span {}..{} overlaps or is unsorted", a.start, a.end)));
            }
            if vocab.decode(&self.tokens[a.start..a.end]) != a.value {
                return Err(bad(format!("span {}..{} does not spell {:?}", a.start, a.end, a.value)));
            }
            prev_end = a.end;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub split: Split,
    pub seed: u64,
    pub template_set: String,
    pub documents: Vec<Document>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub validation: Corpus,
    pub test: Corpus,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    split: Split,
    seed: u64,
    template_set: String,
    vocab: String,
    n_docs: usize,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: String,
    tokens: Vec<String>,
    annotations: Vec<Annotation>,
}

impl Corpus {
    pub(crate) fn clone_header(&self) -> Corpus {
        Corpus { split: self.split, seed: self.seed, template_set: self.template_set.clone(), documents: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }

    /// Model inputs: each document wrapped in `<bos>` ... `<eos>`.
    pub fn sequences(&self, vocab: &Vocab) -> Vec<Vec<usize>> {
        self.documents
            .iter()
            .map(|d| {
                let mut s = Vec::with_capacity(d.tokens.len() + 2);
                s.push(vocab.bos());
                s.extend_from_slice(&d.tokens);
                s.push(vocab.eos());
                s
            })
            .collect()
    }

    /// Distinct `(type, value)` pairs annotated anywhere in the corpus.
    pub fn pii_values(&self) -> std::collections::BTreeSet<(PiiType, String)> {
        self.documents.iter().flat_map(|d| d.annotations.iter().map(|a| (a.pii_type, a.value.clone()))).collect()
    }

    /// One header line, then one document per line.
    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let header = Header {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            split: self.split,
            seed: self.seed,
            template_set: self.template_set.clone(),
            vocab: vocab.fingerprint(),
            n_docs: self.documents.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for d in &self.documents {
            let record = DocRecord {
                id: d.id.clone(),
                tokens: d.tokens.iter().map(|&t| vocab.token(t).unwrap_or("<unk>").to_string()).collect(),
                annotations: d.annotations.clone(),
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| CorpusError::Format(format!("{}: empty corpus file", path.display())))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(CorpusError::Format(format!("unsupported corpus {} v{}", header.format, header.version)));
        }
        if header.vocab != vocab.fingerprint() {
            return Err(CorpusError::Format(format!(
                "corpus was written with vocabulary {} but {} was supplied",
                header.vocab,
                vocab.fingerprint()
            )));
        }
        let mut documents = Vec::with_capacity(header.n_docs);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DocRecord = serde_json::from_str(&line)?;
            let tokens = r
                .tokens
                .iter()
                .map(|t| vocab.id(t).ok_or_else(|| CorpusError::UnknownToken(t.clone())))
                .collect::<Result<Vec<_>>>()?;
            let doc = Document { id: r.id, tokens, annotations: r.annotations };
            doc.validate(vocab)?;
            documents.push(doc);
        }
        if documents.len() != header.n_docs {
            return Err(CorpusError::Format(format!("header declares {} documents, found {}", header.n_docs, documents.len())));
        }
        Ok(Self { split: header.split, seed: header.seed, template_set: header.template_set, documents })
    }
}

#[cfg(test)]
mod tests;
