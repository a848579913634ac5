//! Percentile thresholding, edge selection, cross-type intersection, Jaccard
//! overlap and faithfulness of scored circuits.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::PiiType;
use crate::discovery::{leakage_metric, mean_metric, Circuit, DiscoveryError, PromptPair};
use crate::model::{EdgeId, EdgePatch, Model, ModelError, NodeId, Replacement};

pub const SELECTION_FORMAT: &str = "patchlab-selection";
pub const SHARED_FORMAT: &str = "patchlab-shared-edges";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CircuitsError {
    #[error("circuit has no edges")]
    EmptyCircuit,
    #[error("percentile must lie strictly between 0 and 100, got {0}")]
    InvalidPercentile(f64),
    #[error("threshold must be finite or -inf, got {0}")]
    InvalidThreshold(f64),
    #[error("no edge selections given")]
    NoSelections,
    #[error("model fingerprint mismatch: {expected} vs {got}")]
    FingerprintMismatch { expected: String, got: String },
    #[error("model does not separate clean from corrupt prompts (baseline {baseline}, corrupted {corrupted})")]
    DegenerateFaithfulness { baseline: f64, corrupted: f64 },
    #[error("edge {0} is not in the model graph")]
    UnknownEdge(EdgeId),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CircuitsError>;

/// Statistic an edge is ranked by before thresholding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    #[default]
    Absolute,
    Signed,
}

impl Ranking {
    pub fn apply(self, score: f64) -> f64 {
        match self {
            Ranking::Absolute => score.abs(),
            Ranking::Signed => score,
        }
    }
}

/// Linear interpolation between closest ranks: index `(n - 1) * p / 100`
/// into the ascending order statistics.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

pub fn compute_threshold(circuit: &Circuit, p: f64, ranking: Ranking) -> Result<f64> {
    if !(p > 0.0 && p < 100.0) {
        return Err(CircuitsError::InvalidPercentile(p));
    }
    let stats: Vec<f64> = circuit.values().into_iter().map(|s| ranking.apply(s)).collect();
    percentile(&stats, p).ok_or(CircuitsError::EmptyCircuit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSelection {
    pub format: String,
    pub version: u32,
    pub pii_type: PiiType,
    pub model_fingerprint: String,
    /// Absent when the threshold was given directly.
    pub percentile: Option<f64>,
    pub threshold: f64,
    pub ranking: Ranking,
    /// Canonical graph order.
    pub edges: Vec<EdgeId>,
}

/// Edges whose ranking statistic is at least `threshold`.
pub fn select_edges(circuit: &Circuit, threshold: f64, ranking: Ranking) -> Result<EdgeSelection> {
    if threshold.is_nan() || threshold == f64::INFINITY {
        return Err(CircuitsError::InvalidThreshold(threshold));
    }
    let mut edges: Vec<EdgeId> =
        circuit.scores.iter().filter(|(_, s)| ranking.apply(*s) >= threshold).map(|(e, _)| *e).collect();
    edges.sort();
    Ok(EdgeSelection {
        format: SELECTION_FORMAT.into(),
        version: FORMAT_VERSION,
        pii_type: circuit.pii_type,
        model_fingerprint: circuit.model_fingerprint.clone(),
        percentile: None,
        threshold,
        ranking,
        edges,
    })
}

/// Threshold at percentile `p`, then select.
pub fn select_top(circuit: &Circuit, p: f64, ranking: Ranking) -> Result<EdgeSelection> {
    let tau = compute_threshold(circuit, p, ranking)?;
    let mut sel = select_edges(circuit, tau, ranking)?;
    sel.percentile = Some(p);
    Ok(sel)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    #[default]
    Intersection,
    Union,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedEdges {
    pub format: String,
    pub version: u32,
    pub pii_types: Vec<PiiType>,
    pub model_fingerprint: String,
    pub percentile: Option<f64>,
    pub combine: Combine,
    pub edges: Vec<EdgeId>,
}

fn common_fingerprint(selections: &[EdgeSelection]) -> Result<String> {
    let first = selections.first().ok_or(CircuitsError::NoSelections)?;
    for s in &selections[1..] {
        if s.model_fingerprint != first.model_fingerprint {
            return Err(CircuitsError::FingerprintMismatch {
                expected: first.model_fingerprint.clone(),
                got: s.model_fingerprint.clone(),
            });
        }
    }
    Ok(first.model_fingerprint.clone())
}

pub fn combine(selections: &[EdgeSelection], how: Combine) -> Result<SharedEdges> {
    let fingerprint = common_fingerprint(selections)?;
    let mut acc: BTreeSet<EdgeId> = selections[0].edges.iter().copied().collect();
    for s in &selections[1..] {
        let next: BTreeSet<EdgeId> = s.edges.iter().copied().collect();
        acc = match how {
            Combine::Intersection => acc.intersection(&next).copied().collect(),
            Combine::Union => acc.union(&next).copied().collect(),
        };
    }
    let pii_types: BTreeSet<PiiType> = selections.iter().map(|s| s.pii_type).collect();
    let percentile = selections[0].percentile.filter(|p| selections.iter().all(|s| s.percentile == Some(*p)));
    Ok(SharedEdges {
        format: SHARED_FORMAT.into(),
        version: FORMAT_VERSION,
        pii_types: pii_types.into_iter().collect(),
        model_fingerprint: fingerprint,
        percentile,
        combine: how,
        edges: acc.into_iter().collect(),
    })
}

/// Edges present in every selection.
pub fn intersect(selections: &[EdgeSelection]) -> Result<SharedEdges> {
    combine(selections, Combine::Intersection)
}

fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Option<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return None;
    }
    Some(100.0 * a.intersection(b).count() as f64 / union as f64)
}

/// Jaccard index of the two edge sets, as a percentage. `None` when both are empty.
pub fn overlap(a: &EdgeSelection, b: &EdgeSelection) -> Result<Option<f64>> {
    common_fingerprint(&[a.clone(), b.clone()])?;
    let sa: BTreeSet<EdgeId> = a.edges.iter().copied().collect();
    let sb: BTreeSet<EdgeId> = b.edges.iter().copied().collect();
    Ok(jaccard(&sa, &sb))
}

/// Nodes touched by at least one selected edge, at either end.
pub fn selected_nodes(sel: &EdgeSelection) -> BTreeSet<NodeId> {
    sel.edges.iter().flat_map(|e| [e.src, e.dst]).collect()
}

/// Jaccard index of the node sets touched by each selection.
pub fn node_overlap(a: &EdgeSelection, b: &EdgeSelection) -> Result<Option<f64>> {
    common_fingerprint(&[a.clone(), b.clone()])?;
    Ok(jaccard(&selected_nodes(a), &selected_nodes(b)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapRow {
    pub a: PiiType,
    pub b: PiiType,
    pub nodes: Option<f64>,
    pub edges: Option<f64>,
}

/// Node and edge overlap for every unordered pair of selections.
pub fn overlap_matrix(selections: &[EdgeSelection]) -> Result<Vec<OverlapRow>> {
    let mut rows = Vec::new();
    for i in 0..selections.len() {
        for j in i + 1..selections.len() {
            let (a, b) = (&selections[i], &selections[j]);
            rows.push(OverlapRow { a: a.pii_type, b: b.pii_type, nodes: node_overlap(a, b)?, edges: overlap(a, b)? });
        }
    }
    Ok(rows)
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

pub fn overlap_csv(rows: &[OverlapRow]) -> String {
    let mut out = String::from("type_a,type_b,nodes,edges\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.a, r.b, fmt_pct(r.nodes), fmt_pct(r.edges));
    }
    out
}

/// Metric recovery when every edge outside `circuit_edges` carries its
/// corrupt-run activation: `(P_method - P_corrupt) / (P_clean - P_corrupt)`.
pub fn faithfulness(model: &Model, circuit_edges: &[EdgeId], pairs: &[PromptPair]) -> Result<f64> {
    let graph = model.graph();
    if let Some(e) = circuit_edges.iter().find(|e| !graph.contains(e)) {
        return Err(CircuitsError::UnknownEdge(*e));
    }
    let baseline = mean_metric(model, pairs, false)?;
    let corrupted = mean_metric(model, pairs, true)?;
    if (baseline - corrupted).abs() <= 1e-9 {
        return Err(CircuitsError::DegenerateFaithfulness { baseline, corrupted });
    }
    let keep: HashSet<&EdgeId> = circuit_edges.iter().collect();
    let mut total = 0.0;
    for pair in pairs {
        let (_, corrupt) = model.forward_with_cache(&pair.corrupt)?;
        let mut patch = EdgePatch::new();
        for e in graph.edges().iter().filter(|e| !keep.contains(e)) {
            let src = corrupt.outputs.get(&e.src).expect("every node cached");
            patch.insert(*e, Replacement::Activation(Arc::clone(src)));
        }
        let logits = model.edge_patched_forward(&pair.clean, &patch)?;
        total += leakage_metric(&logits, pair);
    }
    let method = total / pairs.len() as f64;
    Ok((method - corrupted) / (baseline - corrupted))
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

impl EdgeSelection {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.format != SELECTION_FORMAT || s.version != FORMAT_VERSION {
            return Err(CircuitsError::Format(format!("unsupported selection file {} v{}", s.format, s.version)));
        }
        Ok(s)
    }
}

impl SharedEdges {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if s.format != SHARED_FORMAT || s.version != FORMAT_VERSION {
            return Err(CircuitsError::Format(format!("unsupported shared-edge file {} v{}", s.format, s.version)));
        }
        Ok(s)
    }
}
