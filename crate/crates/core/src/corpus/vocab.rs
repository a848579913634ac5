use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusError, Gazetteer, Result, TemplateSet};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "<mask>";

/// Closed word-level vocabulary. Specials come first, then every other
/// word in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::Format(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Format(format!("duplicate token {t:?}")));
            }
        }
        for s in [BOS, EOS, MASK] {
            if !index.contains_key(s) {
                return Err(CorpusError::Format(format!("vocabulary lacks {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn build(templates: &TemplateSet, gazetteer: &Gazetteer) -> Self {
        let mut words = BTreeSet::new();
        words.extend(templates.words().map(str::to_string));
        for (_, v) in gazetteer.iter() {
            words.extend(v.split_whitespace().map(str::to_string));
        }
        let mut tokens: Vec<String> = [BOS, EOS, MASK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| ![BOS, EOS, MASK].contains(&w.as_str())));
        Self::from_tokens(tokens).expect("words are whitespace-free")
    }

    /// Vocabulary of the builtin templates and full builtin gazetteer.
    pub fn builtin() -> Self {
        Self::build(&TemplateSet::builtin(), &Gazetteer::builtin())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn mask(&self) -> usize {
        self.index[MASK]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| CorpusError::UnknownToken(w.to_string()))).collect()
    }

    /// Space-joined surface form; out-of-range ids render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { format: "patchlab-vocab".into(), version: 1, tokens: self.tokens.clone() };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.format != "patchlab-vocab" || file.version != 1 {
            return Err(CorpusError::Format(format!("unsupported vocabulary {} v{}", file.format, file.version)));
        }
        Self::from_tokens(file.tokens)
    }
}
