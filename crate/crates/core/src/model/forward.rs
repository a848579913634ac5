//! The decomposed forward pass.
//!
//! Each node reads its input as an explicit left-to-right sum over its
//! incoming edges, in topological source order. Without interventions that
//! sum is exactly the running residual stream, so the unpatched pass reuses
//! the running sum; a destination with any patched edge recomputes the fold
//! with replacements substituted. Both produce the same floating-point
//! additions in the same order.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::graph::{Channel, EdgeId, InputSlot, NodeId};
use super::params::HeadParams;
use super::{Model, ModelError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Value routed along a patched edge instead of the source node's output.
#[derive(Clone, Debug, PartialEq)]
pub enum Replacement {
    /// A full `seq_len x d_model` activation, e.g. from a cached corrupt run.
    Activation(Arc<Tensor>),
    /// A single `d_model` row used at every position (zero or mean ablation).
    Broadcast(Arc<Vec<f64>>),
}

impl Replacement {
    pub fn zeros(d_model: usize) -> Self {
        Replacement::Broadcast(Arc::new(vec![0.0; d_model]))
    }

    /// Row `pos` of the replacement.
    pub(crate) fn row(&self, pos: usize) -> Option<&[f64]> {
        match self {
            Replacement::Activation(t) => (pos < t.rows()).then(|| t.row(pos)),
            Replacement::Broadcast(r) => Some(r.as_slice()),
        }
    }
}

/// Edge interventions applied during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgePatch {
    edges: BTreeMap<EdgeId, Replacement>,
}

impl EdgePatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, edge: EdgeId, replacement: Replacement) {
        self.edges.insert(edge, replacement);
    }

    pub fn get(&self, edge: &EdgeId) -> Option<&Replacement> {
        self.edges.get(edge)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EdgeId, &Replacement)> {
        self.edges.iter()
    }

    /// Per destination slot, the replacement (if any) for each source in
    /// topological order. Validates edge membership and replacement widths.
    pub(crate) fn by_slot(&self, model: &Model) -> Result<HashMap<InputSlot, Vec<(NodeId, Option<&Replacement>)>>> {
        let d = model.config().d_model;
        let mut out: HashMap<InputSlot, Vec<(NodeId, Option<&Replacement>)>> = HashMap::new();
        for (edge, repl) in &self.edges {
            if !model.graph().contains(edge) {
                return Err(ModelError::UnknownEdge(edge.to_string()));
            }
            let width = match repl {
                Replacement::Activation(t) => t.cols(),
                Replacement::Broadcast(r) => r.len(),
            };
            if width != d {
                return Err(ModelError::ReplacementShape { edge: edge.to_string(), expected: d, got: width });
            }
            let slot = edge.slot();
            let entry = out
                .entry(slot)
                .or_insert_with(|| model.graph().sources(&slot.node).into_iter().map(|s| (s, None)).collect());
            let idx = entry.iter().position(|(s, _)| *s == edge.src).expect("graph edge has a source");
            entry[idx].1 = Some(repl);
        }
        Ok(out)
    }
}

/// Cached node outputs (residual-stream basis) and node inputs of one run.
#[derive(Clone, Debug)]
pub struct Activations {
    pub outputs: BTreeMap<NodeId, Arc<Tensor>>,
    pub inputs: BTreeMap<InputSlot, Arc<Tensor>>,
}

impl Activations {
    pub fn output(&self, node: &NodeId) -> Option<&Tensor> {
        self.outputs.get(node).map(|t| t.as_ref())
    }

    pub fn input(&self, slot: &InputSlot) -> Option<&Tensor> {
        self.inputs.get(slot).map(|t| t.as_ref())
    }
}

#[derive(Default)]
pub(crate) struct RunOptions<'a> {
    pub patch: Option<&'a EdgePatch>,
    /// Replaces the input node's output (token plus position embeddings).
    pub input_override: Option<&'a Tensor>,
    /// Give every destination slot its own tape handle so gradients with
    /// respect to each node input are kept apart.
    pub slot_handles: bool,
    pub track_params: bool,
    /// Record `input_override` as a tracked leaf.
    pub track_input: bool,
}


pub(crate) struct Trace {
    pub logits: Var,
    pub outputs: Vec<(NodeId, Var)>,
    pub inputs: Vec<(InputSlot, Var)>,
    pub params: Vec<Var>,
}

impl Trace {
    pub fn activations(&self, tape: &Tape) -> Activations {
        Activations {
            outputs: self.outputs.iter().map(|(n, v)| (*n, tape.value_shared(*v))).collect(),
            inputs: self.inputs.iter().map(|(s, v)| (*s, tape.value_shared(*v))).collect(),
        }
    }
}

struct HeadVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
}

fn head_vars(p: &[Var], h: &HeadParams) -> HeadVars {
    HeadVars { wq: p[h.wq], bq: p[h.bq], wk: p[h.wk], bk: p[h.bk], wv: p[h.wv], bv: p[h.bv], wo: p[h.wo] }
}

fn layer_norm_memo(tape: &mut Tape, memo: &mut HashMap<Var, Var>, x: Var, g: Var, b: Var) -> Result<Var> {
    if let Some(y) = memo.get(&x) {
        return Ok(*y);
    }
    let y = tape.layer_norm(x, g, b)?;
    memo.insert(x, y);
    Ok(y)
}

fn head_forward(tape: &mut Tape, hv: &HeadVars, q_in: Var, k_in: Var, v_in: Var, d_head: usize) -> Result<Var> {
    let q = tape.matmul(q_in, hv.wq)?;
    let q = tape.add(q, hv.bq)?;
    let k = tape.matmul(k_in, hv.wk)?;
    let k = tape.add(k, hv.bk)?;
    let v = tape.matmul(v_in, hv.wv)?;
    let v = tape.add(v, hv.bv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt())?;
    let pattern = tape.softmax_causal(scores)?;
    let z = tape.matmul(pattern, v)?;
    Ok(tape.matmul(z, hv.wo)?)
}

fn mlp_forward(tape: &mut Tape, model: &Model, p: &[Var], layer: usize, x: Var) -> Result<Var> {
    let lp = &model.layout.layers[layer];
    let n = tape.layer_norm(x, p[lp.ln2_g], p[lp.ln2_b])?;
    let h = tape.matmul(n, p[lp.w_in])?;
    let h = tape.add(h, p[lp.b_in])?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, p[lp.w_out])?;
    Ok(tape.add(o, p[lp.b_out])?)
}

fn unembed(tape: &mut Tape, model: &Model, p: &[Var], x: Var) -> Result<Var> {
    let l = &model.layout;
    let n = tape.layer_norm(x, p[l.lnf_g], p[l.lnf_b])?;
    let logits = tape.matmul(n, p[l.w_u])?;
    Ok(tape.add(logits, p[l.b_u])?)
}

fn embed(tape: &mut Tape, model: &Model, p: &[Var], tokens: &[usize]) -> Result<Var> {
    let l = &model.layout;
    let tok = tape.embedding(p[l.tok], tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.embedding(p[l.pos], &positions)?;
    Ok(tape.add(tok, pos)?)
}

fn param_vars(tape: &mut Tape, model: &Model, track: bool) -> Vec<Var> {
    model
        .params()
        .iter()
        .map(|t| if track { tape.leaf_shared(Arc::clone(t)) } else { tape.constant_shared(Arc::clone(t)) })
        .collect()
}

impl Model {
    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config().max_seq_len {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.config().max_seq_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config().vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config().vocab_size });
        }
        Ok(())
    }

    /// Records the decomposed forward pass on `tape`.
    pub(crate) fn run(&self, tape: &mut Tape, tokens: &[usize], opts: &RunOptions<'_>) -> Result<Trace> {
        self.check_tokens(tokens)?;
        let cfg = self.config();
        let t_len = tokens.len();
        let patched = match opts.patch {
            Some(p) if !p.is_empty() => p.by_slot(self)?,
            _ => HashMap::new(),
        };
        let p = param_vars(tape, self, opts.track_params);

        let input_out = match opts.input_override {
            Some(x) => {
                if x.shape() != [t_len, cfg.d_model] {
                    return Err(ModelError::ReplacementShape { edge: "input".into(), expected: cfg.d_model, got: x.cols() });
                }
                if opts.track_input {
                    tape.leaf(x.clone())
                } else {
                    tape.constant(x.clone())
                }
            }
            None => embed(tape, self, &p, tokens)?,
        };

        let mut outputs: Vec<(NodeId, Var)> = vec![(NodeId::Input, input_out)];
        let mut inputs: Vec<(InputSlot, Var)> = Vec::new();
        let mut resid = input_out;

        let mut read = |tape: &mut Tape, outputs: &[(NodeId, Var)], resid: Var, slot: InputSlot| -> Result<Var> {
            let x = match patched.get(&slot) {
                None => resid,
                Some(sources) => {
                    let mut acc: Option<Var> = None;
                    for (src, repl) in sources {
                        let term = match repl {
                            None => outputs.iter().find(|(n, _)| n == src).expect("source computed").1,
                            Some(r) => replacement_var(tape, r, t_len, cfg.d_model, src, &slot)?,
                        };
                        acc = Some(match acc {
                            None => term,
                            Some(a) => tape.add(a, term)?,
                        });
                    }
                    acc.expect("every destination has a source")
                }
            };
            let x = if opts.slot_handles { tape.alias(x)? } else { x };
            inputs.push((slot, x));
            Ok(x)
        };

        for layer in 0..cfg.n_layers {
            let lp = self.layout.layers[layer].clone();
            let mut memo = HashMap::new();
            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for (head, hp) in lp.heads.iter().enumerate() {
                let node = NodeId::Head { layer, head };
                let mut normed = [None; 3];
                for (i, ch) in Channel::ALL.iter().enumerate() {
                    let x = read(tape, &outputs, resid, InputSlot { node, channel: Some(*ch) })?;
                    normed[i] = Some(layer_norm_memo(tape, &mut memo, x, p[lp.ln1_g], p[lp.ln1_b])?);
                }
                let hv = head_vars(&p, hp);
                let out = head_forward(
                    tape,
                    &hv,
                    normed[0].expect("q"),
                    normed[1].expect("k"),
                    normed[2].expect("v"),
                    cfg.d_head,
                )?;
                head_outs.push((node, out));
            }
            for (node, out) in head_outs {
                outputs.push((node, out));
                resid = tape.add(resid, out)?;
            }
            let node = NodeId::Mlp { layer };
            let x = read(tape, &outputs, resid, InputSlot { node, channel: None })?;
            let out = mlp_forward(tape, self, &p, layer, x)?;
            outputs.push((node, out));
            resid = tape.add(resid, out)?;
        }
        let x = read(tape, &outputs, resid, InputSlot { node: NodeId::Logits, channel: None })?;
        let logits = unembed(tape, self, &p, x)?;
        Ok(Trace { logits, outputs, inputs, params: p })
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let trace = self.run(&mut tape, tokens, &RunOptions::default())?;
        Ok(tape.value(trace.logits).clone())
    }

    pub fn forward_with_cache(&self, tokens: &[usize]) -> Result<(Tensor, Activations)> {
        self.patched_forward_with_cache(tokens, &EdgePatch::new())
    }

    pub fn edge_patched_forward(&self, tokens: &[usize], patch: &EdgePatch) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let trace = self.run(&mut tape, tokens, &RunOptions { patch: Some(patch), ..Default::default() })?;
        Ok(tape.value(trace.logits).clone())
    }

    pub fn patched_forward_with_cache(&self, tokens: &[usize], patch: &EdgePatch) -> Result<(Tensor, Activations)> {
        let mut tape = Tape::inference();
        let trace = self.run(&mut tape, tokens, &RunOptions { patch: Some(patch), ..Default::default() })?;
        Ok((tape.value(trace.logits).clone(), trace.activations(&tape)))
    }

    /// Recomputes one node's output from explicit inputs. For heads, `inputs`
    /// must hold the q, k and v slots; for the logits node the result is the
    /// logits themselves. The input node is recomputed from `tokens`.
    pub fn node_forward(&self, node: NodeId, inputs: &BTreeMap<InputSlot, Arc<Tensor>>, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = param_vars(&mut tape, self, false);
        let fetch = |tape: &mut Tape, channel: Option<Channel>| -> Result<Var> {
            let slot = InputSlot { node, channel };
            let t = inputs.get(&slot).ok_or_else(|| ModelError::MissingInput(slot.to_string()))?;
            Ok(tape.constant_shared(Arc::clone(t)))
        };
        let out = match node {
            NodeId::Input => {
                self.check_tokens(tokens)?;
                embed(&mut tape, self, &p, tokens)?
            }
            NodeId::Head { layer, head } => {
                let lp = self.layout.layers[layer].clone();
                let mut normed = Vec::new();
                for ch in Channel::ALL {
                    let x = fetch(&mut tape, Some(ch))?;
                    normed.push(tape.layer_norm(x, p[lp.ln1_g], p[lp.ln1_b])?);
                }
                let hv = head_vars(&p, &lp.heads[head]);
                head_forward(&mut tape, &hv, normed[0], normed[1], normed[2], self.config().d_head)?
            }
            NodeId::Mlp { layer } => {
                let x = fetch(&mut tape, None)?;
                mlp_forward(&mut tape, self, &p, layer, x)?
            }
            NodeId::Logits => {
                let x = fetch(&mut tape, None)?;
                unembed(&mut tape, self, &p, x)?
            }
        };
        Ok(tape.value(out).clone())
    }
}

fn replacement_var(
    tape: &mut Tape,
    r: &Replacement,
    t_len: usize,
    d: usize,
    src: &NodeId,
    slot: &InputSlot,
) -> Result<Var> {
    match r {
        Replacement::Activation(t) => {
            if t.shape() != [t_len, d] {
                return Err(ModelError::ReplacementShape {
                    edge: format!("{src}->{slot}"),
                    expected: t_len * d,
                    got: t.len(),
                });
            }
            Ok(tape.constant_shared(Arc::clone(t)))
        }
        Replacement::Broadcast(row) => {
            let mut data = Vec::with_capacity(t_len * d);
            for _ in 0..t_len {
                data.extend_from_slice(row);
            }
            Ok(tape.constant(Tensor::matrix(t_len, d, data)))
        }
    }
}
