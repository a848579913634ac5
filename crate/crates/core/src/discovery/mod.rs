//! Clean/corrupt prompt pairs and integrated-gradient edge attribution.
//!
//! A pair asks the model to complete a memorized multi-token PII value. The
//! clean prompt ends just before the value's last token; the corrupt prompt
//! swaps the value's leading tokens for those of another value of the same
//! type and length. Edge scores pair the source node's clean-minus-corrupt
//! output difference with the averaged gradient of the leakage metric at the
//! destination's input, along a straight path from the clean to the corrupt
//! embedding.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Gazetteer, PiiType, Vocab};
use crate::model::{Activations, EdgeId, InputSlot, Model, ModelError, NodeId, RunOptions};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::seeds;

pub const CIRCUIT_FORMAT: &str = "patchlab-circuit";
pub const CIRCUIT_VERSION: u32 = 1;
pub const DEFAULT_IG_STEPS: usize = 5;
pub const DEFAULT_PAIRS: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("only {available} distinct {pii_type} spans available, {requested} requested (short by {})", requested - available)]
    Shortfall { pii_type: PiiType, requested: usize, available: usize },
    #[error("no prompt pairs")]
    NoPairs,
    #[error("ig_steps must be at least 1")]
    InvalidSteps,
    #[error("prompt pair {index}: {reason}")]
    InvalidPair { index: usize, reason: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiscoveryError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub pii_type: PiiType,
    pub clean: Vec<usize>,
    pub corrupt: Vec<usize>,
    pub target_pos: usize,
    pub clean_answer: usize,
    pub corrupt_answer: usize,
}

impl PromptPair {
    /// Equal lengths, a single contiguous differing span, distinct answers
    /// and an in-range target position.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.clean.is_empty() || self.clean.len() != self.corrupt.len() {
            return Err(format!("lengths {} and {} differ or are zero", self.clean.len(), self.corrupt.len()));
        }
        if self.target_pos >= self.clean.len() {
            return Err(format!("target_pos {} outside prompt of length {}", self.target_pos, self.clean.len()));
        }
        if self.clean_answer == self.corrupt_answer {
            return Err("clean and corrupt answers coincide".into());
        }
        let diff: Vec<usize> = (0..self.clean.len()).filter(|&i| self.clean[i] != self.corrupt[i]).collect();
        if let (Some(&a), Some(&b)) = (diff.first(), diff.last()) {
            if b - a + 1 != diff.len() {
                return Err("prompts differ outside one contiguous span".into());
            }
        }
        Ok(())
    }
}

/// Builds `n` distinct pairs for `pii_type` from the annotated spans of
/// `corpus`. Only values of two or more tokens qualify.
pub fn build_prompt_pairs(
    corpus: &Corpus,
    pii_type: PiiType,
    n: usize,
    gazetteer: &Gazetteer,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    // Candidate replacements grouped by token length.
    let mut by_len: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for value in gazetteer.values(pii_type) {
        let ids = vocab.encode(value)?;
        by_len.entry(ids.len()).or_default().push(ids);
    }

    let mut seen = HashSet::new();
    let mut spans = Vec::new();
    for doc in &corpus.documents {
        for a in doc.annotations.iter().filter(|a| a.pii_type == pii_type && a.end - a.start >= 2) {
            let mut clean = Vec::with_capacity(a.end);
            clean.push(vocab.bos());
            clean.extend_from_slice(&doc.tokens[..a.end - 1]);
            if seen.insert(clean.clone()) {
                // Span offsets shift by one for the leading <bos>.
                spans.push((clean, a.start + 1, a.end - a.start, doc.tokens[a.end - 1]));
            }
        }
    }
    if spans.len() < n {
        return Err(DiscoveryError::Shortfall { pii_type, requested: n, available: spans.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("pairs/{pii_type}")));
    spans.shuffle(&mut rng);
    spans.truncate(n);

    let mut pairs = Vec::with_capacity(n);
    for (clean, start, len, answer) in spans {
        let prefix = &clean[start..start + len - 1];
        let options: Vec<&Vec<usize>> = by_len
            .get(&len)
            .map(|v| v.iter().filter(|c| &c[..len - 1] != prefix && c[len - 1] != answer).collect())
            .unwrap_or_default();
        let Some(replacement) = options.choose(&mut rng) else {
            continue;
        };
        let mut corrupt = clean.clone();
        corrupt[start..start + len - 1].copy_from_slice(&replacement[..len - 1]);
        let target_pos = clean.len() - 1;
        pairs.push(PromptPair { pii_type, clean, corrupt, target_pos, clean_answer: answer, corrupt_answer: replacement[len - 1] });
    }
    if pairs.len() < n {
        return Err(DiscoveryError::Shortfall { pii_type, requested: n, available: pairs.len() });
    }
    Ok(pairs)
}

/// Logit of the true continuation minus that of the corrupt one at the target.
pub fn leakage_metric(logits: &Tensor, pair: &PromptPair) -> f64 {
    let row = logits.row(pair.target_pos);
    row[pair.clean_answer] - row[pair.corrupt_answer]
}

/// Mean metric over pairs for an unpatched model on the clean or corrupt prompts.
pub fn mean_metric(model: &Model, pairs: &[PromptPair], corrupt: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DiscoveryError::NoPairs);
    }
    let mut total = 0.0;
    for p in pairs {
        let logits = model.forward(if corrupt { &p.corrupt } else { &p.clean })?;
        total += leakage_metric(&logits, p);
    }
    Ok(total / pairs.len() as f64)
}

fn metric_var(tape: &mut Tape, logits: Var, pair: &PromptPair, vocab: usize) -> Result<Var> {
    let row = tape.slice_rows(logits, pair.target_pos, 1)?;
    let mut sel = Tensor::zeros(&[1, vocab]);
    sel.data_mut()[pair.clean_answer] = 1.0;
    sel.data_mut()[pair.corrupt_answer] = -1.0;
    let sel = tape.constant(sel);
    let prod = tape.mul(row, sel)?;
    Ok(tape.sum(prod)?)
}

/// Edge scores for every edge of the model graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub pii_type: PiiType,
    pub model_fingerprint: String,
    pub ig_steps: usize,
    pub n_pairs: usize,
    /// One entry per graph edge, in canonical order.
    pub scores: Vec<(EdgeId, f64)>,
}

#[derive(Serialize, Deserialize)]
struct EdgeScore {
    edge_id: EdgeId,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct CircuitFile {
    format: String,
    version: u32,
    model_fingerprint: String,
    pii_type: PiiType,
    ig_steps: usize,
    n_pairs: usize,
    edges: Vec<EdgeScore>,
}

impl Circuit {
    pub fn score(&self, edge: &EdgeId) -> Option<f64> {
        self.scores.iter().find(|(e, _)| e == edge).map(|(_, s)| *s)
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgeId> {
        self.scores.iter().map(|(e, _)| e)
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|(_, s)| *s).collect()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Checks that the scores cover `model`'s graph once each, in order, and are finite.
    pub fn validate_against(&self, model: &Model) -> Result<()> {
        let edges = model.graph().edges();
        if edges.len() != self.scores.len() || edges.iter().zip(&self.scores).any(|(a, (b, _))| a != b) {
            return Err(DiscoveryError::Format("circuit edges do not match the model graph".into()));
        }
        if let Some((e, s)) = self.scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(DiscoveryError::Format(format!("edge {e} has non-finite score {s}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CircuitFile {
            format: CIRCUIT_FORMAT.into(),
            version: CIRCUIT_VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            pii_type: self.pii_type,
            ig_steps: self.ig_steps,
            n_pairs: self.n_pairs,
            edges: self.scores.iter().map(|(e, s)| EdgeScore { edge_id: *e, score: *s }).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CircuitFile = serde_json::from_str(text)?;
        if file.format != CIRCUIT_FORMAT || file.version != CIRCUIT_VERSION {
            return Err(DiscoveryError::Format(format!("unsupported circuit file {} v{}", file.format, file.version)));
        }
        let mut seen = HashSet::new();
        for e in &file.edges {
            if !seen.insert(e.edge_id) {
                return Err(DiscoveryError::Format(format!("edge {} listed twice", e.edge_id)));
            }
            if !e.score.is_finite() {
                return Err(DiscoveryError::Format(format!("edge {} has non-finite score", e.edge_id)));
            }
        }
        Ok(Self {
            pii_type: file.pii_type,
            model_fingerprint: file.model_fingerprint,
            ig_steps: file.ig_steps,
            n_pairs: file.n_pairs,
            scores: file.edges.into_iter().map(|e| (e.edge_id, e.score)).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_pairs(pairs: &[PromptPair]) -> Result<PiiType> {
    let first = pairs.first().ok_or(DiscoveryError::NoPairs)?;
    for (index, p) in pairs.iter().enumerate() {
        p.check().map_err(|reason| DiscoveryError::InvalidPair { index, reason })?;
        if p.pii_type != first.pii_type {
            return Err(DiscoveryError::InvalidPair { index, reason: "mixed PII types".into() });
        }
    }
    Ok(first.pii_type)
}

/// Per-edge sum over the source positions and features of
/// `(clean_out(u) - corrupt_out(u)) * grad(v, channel)`.
fn edge_dots(model: &Model, clean: &Activations, corrupt: &Activations, slot_grads: &[(InputSlot, Tensor)], into: &mut [f64]) -> Result<()> {
    let graph = model.graph();
    let diffs: BTreeMap<NodeId, Tensor> = clean
        .outputs
        .iter()
        .map(|(n, c)| Ok((*n, c.sub(corrupt.output(n).expect("same graph"))?)))
        .collect::<std::result::Result<_, NumericsError>>()?;
    for (slot, range) in graph.slots() {
        let g = &slot_grads.iter().find(|(s, _)| s == slot).expect("every slot has a gradient").1;
        for i in range.clone() {
            let src = graph.edges()[i].src;
            into[i] += diffs[&src].dot(g)?;
        }
    }
    Ok(())
}

fn clean_corrupt_caches(model: &Model, pair: &PromptPair) -> Result<(Activations, Activations)> {
    let (_, clean) = model.forward_with_cache(&pair.clean)?;
    let (_, corrupt) = model.forward_with_cache(&pair.corrupt)?;
    Ok((clean, corrupt))
}

fn pair_scores(model: &Model, pair: &PromptPair, m: usize, into: &mut [f64]) -> Result<()> {
    let (clean, corrupt) = clean_corrupt_caches(model, pair)?;
    let x_clean = clean.output(&NodeId::Input).expect("input cached");
    let x_corrupt = corrupt.output(&NodeId::Input).expect("input cached");
    let mut grads: Vec<(InputSlot, Tensor)> = Vec::new();
    for k in 1..=m {
        let alpha = k as f64 / m as f64;
        let x = x_clean.scale(1.0 - alpha).add(&x_corrupt.scale(alpha))?;
        let mut tape = Tape::new();
        let opts = RunOptions { input_override: Some(&x), slot_handles: true, track_input: true, ..Default::default() };
        let trace = model.run(&mut tape, &pair.clean, &opts)?;
        let metric = metric_var(&mut tape, trace.logits, pair, model.config().vocab_size)?;
        let g = tape.backward(metric)?;
        for (i, (slot, v)) in trace.inputs.iter().enumerate() {
            let gv = g.get_or_zeros(*v).expect("slot handles are tracked");
            if k == 1 {
                grads.push((*slot, gv));
            } else {
                grads[i].1.add_assign(&gv)?;
            }
        }
    }
    for (_, g) in &mut grads {
        *g = g.scale(1.0 / m as f64);
    }
    edge_dots(model, &clean, &corrupt, &grads, into)
}

/// Per-edge score sums over `pairs` (not yet divided by the pair count).
pub fn eapig_sums(model: &Model, pairs: &[PromptPair], ig_steps: usize) -> Result<Vec<f64>> {
    if ig_steps == 0 {
        return Err(DiscoveryError::InvalidSteps);
    }
    check_pairs(pairs)?;
    let mut sums = vec![0.0; model.graph().edges().len()];
    for (i, pair) in pairs.iter().enumerate() {
        pair_scores(model, pair, ig_steps, &mut sums)?;
        if (i + 1) % 50 == 0 {
            tracing::debug!(done = i + 1, total = pairs.len(), "scored pairs");
        }
    }
    Ok(sums)
}

fn finish(model: &Model, pii_type: PiiType, ig_steps: usize, n: usize, sums: Vec<f64>) -> Circuit {
    Circuit {
        pii_type,
        model_fingerprint: model.fingerprint(),
        ig_steps,
        n_pairs: n,
        scores: model.graph().edges().iter().copied().zip(sums.into_iter().map(|s| s / n as f64)).collect(),
    }
}

/// Integrated-gradient edge scores averaged over `pairs`. Positive scores
/// mark edges that push the model toward the true PII continuation.
pub fn eapig_scores(model: &Model, pairs: &[PromptPair], ig_steps: usize) -> Result<Circuit> {
    let sums = eapig_sums(model, pairs, ig_steps)?;
    Ok(finish(model, pairs[0].pii_type, ig_steps, pairs.len(), sums))
}

/// Single-gradient attribution taken on the corrupt run itself, with
/// gradients reaching the slots through the parameters rather than through
/// an interpolated input.
pub fn eap_scores(model: &Model, pairs: &[PromptPair]) -> Result<Circuit> {
    let pii_type = check_pairs(pairs)?;
    let mut sums = vec![0.0; model.graph().edges().len()];
    for pair in pairs {
        let (clean, corrupt) = clean_corrupt_caches(model, pair)?;
        let mut tape = Tape::new();
        let opts = RunOptions { slot_handles: true, track_params: true, ..Default::default() };
        let trace = model.run(&mut tape, &pair.corrupt, &opts)?;
        let metric = metric_var(&mut tape, trace.logits, pair, model.config().vocab_size)?;
        let g = tape.backward(metric)?;
        let grads: Vec<_> =
            trace.inputs.iter().map(|(s, v)| (*s, g.get_or_zeros(*v).expect("slot handles are tracked"))).collect();
        edge_dots(model, &clean, &corrupt, &grads, &mut sums)?;
    }
    Ok(finish(model, pii_type, 1, pairs.len(), sums))
}

#[cfg(test)]
mod tests;
