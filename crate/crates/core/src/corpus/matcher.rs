use std::collections::HashMap;

use super::{Annotation, Corpus, Document, Gazetteer, PiiType, Vocab};

/// Exact gazetteer matcher over token ids.
#[derive(Clone, Debug)]
pub struct PiiMatcher {
    /// First token -> candidate forms, longest first.
    by_first: HashMap<usize, Vec<(Vec<usize>, PiiType, String)>>,
}

impl PiiMatcher {
    /// Values containing words outside `vocab` can never be emitted, so
    /// they are dropped.
    pub fn new(gazetteer: &Gazetteer, vocab: &Vocab) -> Self {
        let mut by_first: HashMap<usize, Vec<(Vec<usize>, PiiType, String)>> = HashMap::new();
        for (t, v) in gazetteer.iter() {
            if let Ok(ids) = vocab.encode(v) {
                by_first.entry(ids[0]).or_default().push((ids, t, v.to_string()));
            }
        }
        for forms in by_first.values_mut() {
            forms.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        Self { by_first }
    }

    /// Left-to-right, longest-match, non-overlapping spans.
    pub fn find(&self, tokens: &[usize]) -> Vec<Annotation> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self
                .by_first
                .get(&tokens[i])
                .and_then(|forms| forms.iter().find(|(ids, _, _)| tokens[i..].starts_with(ids)));
            match hit {
                Some((ids, t, v)) => {
                    out.push(Annotation { start: i, end: i + ids.len(), pii_type: *t, value: v.clone() });
                    i += ids.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

pub fn match_pii(tokens: &[usize], matcher: &PiiMatcher) -> Vec<Annotation> {
    matcher.find(tokens)
}

/// Replaces every annotated span with a single mask token. Only spans of
/// `types` are touched when given.
pub fn scrub(corpus: &Corpus, mask_token: usize, types: Option<&[PiiType]>) -> Corpus {
    let documents = corpus
        .documents
        .iter()
        .map(|doc| {
            let mut tokens = Vec::with_capacity(doc.tokens.len());
            let mut kept = Vec::new();
            let mut cursor = 0;
            for a in &doc.annotations {
                tokens.extend_from_slice(&doc.tokens[cursor..a.start]);
                if types.is_none_or(|ts| ts.contains(&a.pii_type)) {
                    tokens.push(mask_token);
                } else {
                    let start = tokens.len();
                    tokens.extend_from_slice(&doc.tokens[a.start..a.end]);
                    kept.push(Annotation { start, end: tokens.len(), ..a.clone() });
                }
                cursor = a.end;
            }
            tokens.extend_from_slice(&doc.tokens[cursor..]);
            Document { id: doc.id.clone(), tokens, annotations: kept }
        })
        .collect();
    Corpus { documents, ..corpus.clone_header() }
}
