//! Edge ablation plans, the patched model, and the end-to-end pipeline from
//! prompt pairs to a patched model with a hashed artifact manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuits::{self, Combine, EdgeSelection, Ranking, SharedEdges};
use crate::corpus::{Corpus, Gazetteer, PiiType, Vocab};
use crate::discovery::{self, Circuit, PromptPair};
use crate::model::{Decoder, EdgePatch, Model, ModelError, NodeId, Replacement};
use crate::numerics::Tensor;

pub const PLAN_FORMAT: &str = "patchlab-patch-plan";
pub const MANIFEST_FORMAT: &str = "patchlab-manifest";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("no reference prompts for mean ablation")]
    EmptyReference,
    #[error("plan was built for model {plan}, not {model}")]
    FingerprintMismatch { plan: String, model: String },
    #[error("mean-ablation plan lacks a mean for node {0}")]
    MissingMean(NodeId),
    #[error("zero-ablation plan carries node means")]
    UnexpectedMeans,
    #[error("mean for node {node} has length {got}, expected {expected}")]
    MeanShape { node: NodeId, expected: usize, got: usize },
    #[error("no PII types requested")]
    NoTypes,
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Discovery(#[from] discovery::DiscoveryError),
    #[error(transparent)]
    Circuits(#[from] circuits::CircuitsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PatchError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    #[default]
    Zero,
    Mean,
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationMode::Zero => "zero",
            AblationMode::Mean => "mean",
        })
    }
}

impl std::str::FromStr for AblationMode {
    type Err = PatchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AblationMode::Zero),
            "mean" => Ok(AblationMode::Mean),
            _ => Err(PatchError::Format(format!("unknown ablation mode {s:?} (expected zero or mean)"))),
        }
    }
}

/// Where mean-ablation means are taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanReference {
    /// The clean discovery prompts of every requested type.
    #[default]
    CleanPrompts,
    /// Every sequence of the corpus handed to the pipeline.
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub percentile: Option<f64>,
    pub pii_types: Vec<PiiType>,
    pub circuit_fingerprints: Vec<String>,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub format: String,
    pub version: u32,
    pub mode: AblationMode,
    pub edges: SharedEdges,
    pub node_means: Option<BTreeMap<NodeId, Vec<f64>>>,
    pub provenance: Provenance,
}

impl PatchPlan {
    pub fn new(
        mode: AblationMode,
        edges: SharedEdges,
        node_means: Option<BTreeMap<NodeId, Vec<f64>>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let plan = Self { format: PLAN_FORMAT.into(), version: FORMAT_VERSION, mode, edges, node_means, provenance };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != PLAN_FORMAT || self.version != FORMAT_VERSION {
            return Err(PatchError::Format(format!("unsupported plan file {} v{}", self.format, self.version)));
        }
        match (self.mode, &self.node_means) {
            (AblationMode::Zero, Some(_)) => Err(PatchError::UnexpectedMeans),
            (AblationMode::Zero, None) => Ok(()),
            (AblationMode::Mean, means) => {
                for e in &self.edges.edges {
                    if !means.as_ref().is_some_and(|m| m.contains_key(&e.src)) {
                        return Err(PatchError::MissingMean(e.src));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        plan.validate()?;
        Ok(plan)
    }
}

fn add_rows(acc: &mut [f64], t: &Tensor) {
    for r in 0..t.rows() {
        for (a, v) in acc.iter_mut().zip(t.row(r)) {
            *a += v;
        }
    }
}

/// Mean output of every non-logit node over all positions of `prompts`.
pub fn compute_means(model: &Model, prompts: &[Vec<usize>]) -> Result<BTreeMap<NodeId, Vec<f64>>> {
    if prompts.is_empty() {
        return Err(PatchError::EmptyReference);
    }
    let d = model.config().d_model;
    let mut sums: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    let mut count = 0usize;
    for prompt in prompts {
        let (_, acts) = model.forward_with_cache(prompt)?;
        for (node, out) in &acts.outputs {
            add_rows(sums.entry(*node).or_insert_with(|| vec![0.0; d]), out);
        }
        count += prompt.len();
    }
    for v in sums.values_mut() {
        for x in v.iter_mut() {
            *x /= count as f64;
        }
    }
    Ok(sums)
}

/// A model paired with a fixed edge intervention. Weights are shared with
/// the source model and never modified.
#[derive(Clone, Debug)]
pub struct PatchedModel {
    model: Model,
    patch: EdgePatch,
}

impl PatchedModel {
    pub fn unpatched(model: &Model) -> Self {
        Self { model: model.clone(), patch: EdgePatch::new() }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn patch(&self) -> &EdgePatch {
        &self.patch
    }

    pub fn is_identity(&self) -> bool {
        self.patch.is_empty()
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.model.edge_patched_forward(tokens, &self.patch)?)
    }

    pub fn decoder(&self) -> Result<Decoder<'_>> {
        Ok(Decoder::new(&self.model, Some(&self.patch))?)
    }

    /// Applies `plan` on top of the current intervention. Planned edges are
    /// replaced, so re-applying a plan changes nothing.
    pub fn with_plan(&self, plan: &PatchPlan) -> Result<Self> {
        let fp = self.model.fingerprint();
        if plan.edges.model_fingerprint != fp {
            return Err(PatchError::FingerprintMismatch { plan: plan.edges.model_fingerprint.clone(), model: fp });
        }
        plan.validate()?;
        let d = self.model.config().d_model;
        let mut patch = self.patch.clone();
        for e in &plan.edges.edges {
            if !self.model.graph().contains(e) {
                return Err(ModelError::UnknownEdge(e.to_string()).into());
            }
            let repl = match plan.mode {
                AblationMode::Zero => Replacement::zeros(d),
                AblationMode::Mean => {
                    let mean = &plan.node_means.as_ref().expect("validated")[&e.src];
                    if mean.len() != d {
                        return Err(PatchError::MeanShape { node: e.src, expected: d, got: mean.len() });
                    }
                    Replacement::Broadcast(Arc::new(mean.clone()))
                }
            };
            patch.insert(*e, repl);
        }
        Ok(Self { model: self.model.clone(), patch })
    }
}

pub fn apply_patch(model: &Model, plan: &PatchPlan) -> Result<PatchedModel> {
    PatchedModel::unpatched(model).with_plan(plan)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub pii_types: Vec<PiiType>,
    pub percentile: f64,
    pub mode: AblationMode,
    pub ig_steps: usize,
    pub n_pairs: usize,
    pub seed: u64,
    pub ranking: Ranking,
    pub combine: Combine,
    pub mean_reference: MeanReference,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pii_types: PiiType::ALL.to_vec(),
            percentile: 95.0,
            mode: AblationMode::Zero,
            ig_steps: discovery::DEFAULT_IG_STEPS,
            n_pairs: discovery::DEFAULT_PAIRS,
            seed: 0,
            ranking: Ranking::Absolute,
            combine: Combine::Intersection,
            mean_reference: MeanReference::CleanPrompts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub stage: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model_fingerprint: String,
    pub corpus_hash: String,
    pub config: PipelineConfig,
    pub artifacts: Vec<ArtifactRecord>,
    pub shared_edges: usize,
    /// Set when the combined edge set was empty and the model was left unpatched.
    pub empty_intersection: bool,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT || m.version != FORMAT_VERSION {
            return Err(PatchError::Format(format!("unsupported manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }
}

pub struct PipelineOutcome {
    pub patched: PatchedModel,
    pub pairs: BTreeMap<PiiType, Vec<PromptPair>>,
    pub circuits: Vec<Circuit>,
    pub selections: Vec<EdgeSelection>,
    pub shared: SharedEdges,
    pub plan: PatchPlan,
    pub manifest: Manifest,
}

struct ArtifactWriter<'a> {
    dir: &'a Path,
    records: Vec<ArtifactRecord>,
}

impl ArtifactWriter<'_> {
    fn write(&mut self, stage: &str, name: &str, text: String) -> Result<()> {
        std::fs::write(self.dir.join(name), &text)?;
        self.records.push(ArtifactRecord { stage: stage.into(), path: name.into(), sha256: sha256_hex(text.as_bytes()) });
        Ok(())
    }
}

/// Prompt pairs and EAP-IG circuits for every type in `cfg`, in order.
pub fn discover_circuits(
    model: &Model,
    corpus: &Corpus,
    gazetteer: &Gazetteer,
    vocab: &Vocab,
    cfg: &PipelineConfig,
) -> Result<(BTreeMap<PiiType, Vec<PromptPair>>, Vec<Circuit>)> {
    if cfg.pii_types.is_empty() {
        return Err(PatchError::NoTypes);
    }
    let mut pairs = BTreeMap::new();
    let mut circuits = Vec::new();
    for &t in &cfg.pii_types {
        let ps = discovery::build_prompt_pairs(corpus, t, cfg.n_pairs, gazetteer, vocab, cfg.seed)?;
        tracing::info!(pii_type = %t, pairs = ps.len(), "scoring edges");
        circuits.push(discovery::eapig_scores(model, &ps, cfg.ig_steps)?);
        pairs.insert(t, ps);
    }
    Ok((pairs, circuits))
}

/// Pairs, circuits, thresholds, shared edges and the patch, for each
/// requested PII type. Every intermediate artifact is written to `out_dir`
/// and listed with its hash in `manifest.json`.
pub fn patch_pipeline(
    model: &Model,
    corpus: &Corpus,
    gazetteer: &Gazetteer,
    vocab: &Vocab,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<PipelineOutcome> {
    let (pairs, circuits) = discover_circuits(model, corpus, gazetteer, vocab, cfg)?;
    patch_with_circuits(model, corpus, vocab, cfg, pairs, circuits, out_dir)
}

/// The pipeline after discovery, for circuits already computed under the
/// same model and `cfg`. Produces the same artifacts as [`patch_pipeline`].
pub fn patch_with_circuits(
    model: &Model,
    corpus: &Corpus,
    vocab: &Vocab,
    cfg: &PipelineConfig,
    pairs: BTreeMap<PiiType, Vec<PromptPair>>,
    circuits: Vec<Circuit>,
    out_dir: &Path,
) -> Result<PipelineOutcome> {
    if cfg.pii_types.is_empty() {
        return Err(PatchError::NoTypes);
    }
    let fingerprint = model.fingerprint();
    let types: Vec<PiiType> = circuits.iter().map(|c| c.pii_type).collect();
    if types != cfg.pii_types || pairs.keys().copied().collect::<std::collections::BTreeSet<_>>() != types.iter().copied().collect() {
        return Err(PatchError::Format("circuits do not match the configured PII types".into()));
    }
    for c in &circuits {
        if c.model_fingerprint != fingerprint {
            return Err(PatchError::FingerprintMismatch { plan: c.model_fingerprint.clone(), model: fingerprint });
        }
        if c.ig_steps != cfg.ig_steps || c.n_pairs != pairs[&c.pii_type].len() {
            return Err(PatchError::Format(format!("circuit for {} was scored with other settings", c.pii_type)));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut w = ArtifactWriter { dir: out_dir, records: Vec::new() };
    let mut selections = Vec::new();
    for c in &circuits {
        let t = c.pii_type;
        w.write("pairs", &format!("pairs-{t}.json"), serde_json::to_string(&pairs[&t])? + "\n")?;
        w.write("circuit", &format!("circuit-{t}.json"), c.to_json()? + "\n")?;
        let sel = circuits::select_top(c, cfg.percentile, cfg.ranking)?;
        w.write("selection", &format!("selection-{t}.json"), serde_json::to_string_pretty(&sel)? + "\n")?;
        selections.push(sel);
    }
    let shared = circuits::combine(&selections, cfg.combine)?;
    w.write("shared", "shared.json", serde_json::to_string_pretty(&shared)? + "\n")?;
    let empty = shared.edges.is_empty();
    if empty {
        tracing::warn!("no edges are shared by every circuit; the model is left unpatched");
    }

    let (node_means, reference) = match (cfg.mode, cfg.mean_reference) {
        (AblationMode::Zero, _) => (None, "none".to_string()),
        (AblationMode::Mean, MeanReference::CleanPrompts) => {
            let prompts: Vec<Vec<usize>> = pairs.values().flatten().map(|p| p.clean.clone()).collect();
            (Some(compute_means(model, &prompts)?), "clean-prompts".to_string())
        }
        (AblationMode::Mean, MeanReference::Corpus) => {
            let seqs: Vec<Vec<usize>> = corpus
                .sequences(vocab)
                .into_iter()
                .map(|mut s| {
                    s.truncate(model.config().max_seq_len);
                    s
                })
                .collect();
            (Some(compute_means(model, &seqs)?), format!("corpus:{}", corpus.split))
        }
    };
    let provenance = Provenance {
        percentile: Some(cfg.percentile),
        pii_types: cfg.pii_types.clone(),
        circuit_fingerprints: circuits
            .iter()
            .map(|c| c.to_json().map(|j| sha256_hex(j.as_bytes())[..16].to_string()))
            .collect::<std::result::Result<_, _>>()?,
        reference,
    };
    let plan = PatchPlan::new(cfg.mode, shared.clone(), node_means, provenance)?;
    w.write("plan", "plan.json", serde_json::to_string_pretty(&plan)? + "\n")?;
    let patched = apply_patch(model, &plan)?;

    let corpus_hash = {
        let mut h = Sha256::new();
        for d in &corpus.documents {
            h.update(d.id.as_bytes());
            for t in &d.tokens {
                h.update((*t as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    };
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: FORMAT_VERSION,
        model_fingerprint: fingerprint,
        corpus_hash,
        config: cfg.clone(),
        artifacts: w.records,
        shared_edges: shared.edges.len(),
        empty_intersection: empty,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(PipelineOutcome { patched, pairs, circuits, selections, shared, plan, manifest })
}

#[cfg(test)]
mod tests;
