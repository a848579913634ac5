//! Position-by-position evaluation for generation, plus top-k sampling.
//!
//! Node inputs at position `t` depend only on node outputs at `t`, so the
//! decoder evaluates the same per-destination edge sums one position at a
//! time and keeps each head's keys and values for earlier positions. Several
//! sequences advance in lockstep as rows of one matrix.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{EdgePatch, Replacement};
use super::graph::{Channel, InputSlot, NodeId};
use super::{Model, ModelError, Result};
use crate::numerics::{gelu, gemm, layer_norm, softmax_prefix, Tensor};

/// `x` (rows x k) times `w` (k x n), plus `bias` on every row.
fn affine(x: &[f64], rows: usize, w: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, false, w.data(), false, &mut out, false);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(n) {
            add_assign(row, b.data());
        }
    }
    out
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    layer_norm(x, g.len(), g.data(), b.data()).0
}

type SlotPatch = HashMap<InputSlot, Vec<(NodeId, Option<Replacement>)>>;

/// Incremental evaluator over a fixed set of sequences that grow together.
/// A sequence left out of a step is finished and cannot be fed again.
pub struct BatchDecoder<'m> {
    model: &'m Model,
    patch: SlotPatch,
    /// Per sequence, per head: flattened keys and values of earlier positions.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    pos: usize,
}

impl<'m> BatchDecoder<'m> {
    pub fn new(model: &'m Model, patch: Option<&EdgePatch>, n_seqs: usize) -> Result<Self> {
        let patch = match patch {
            Some(p) => p
                .by_slot(model)?
                .into_iter()
                .map(|(slot, srcs)| (slot, srcs.into_iter().map(|(n, r)| (n, r.cloned())).collect()))
                .collect(),
            None => HashMap::new(),
        };
        let heads = model.config().n_layers * model.config().n_heads;
        Ok(Self {
            model,
            patch,
            keys: vec![vec![Vec::new(); heads]; n_seqs],
            values: vec![vec![Vec::new(); heads]; n_seqs],
            pos: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn read(&self, slot: InputSlot, outputs: &[(NodeId, Vec<f64>)], resid: &[f64], rows: usize) -> Result<Vec<f64>> {
        let Some(sources) = self.patch.get(&slot) else {
            return Ok(resid.to_vec());
        };
        let d = self.model.config().d_model;
        let mut acc: Option<Vec<f64>> = None;
        for (src, repl) in sources {
            let term: Vec<f64> = match repl {
                None => outputs.iter().find(|(n, _)| n == src).expect("source computed").1.clone(),
                Some(r) => {
                    let row = r.row(self.pos).ok_or(ModelError::SequenceTooLong { len: self.pos + 1, max: self.pos })?;
                    let mut t = Vec::with_capacity(rows * d);
                    for _ in 0..rows {
                        t.extend_from_slice(row);
                    }
                    t
                }
            };
            match acc.as_mut() {
                None => acc = Some(term),
                Some(a) => add_assign(a, &term),
            }
        }
        Ok(acc.expect("every destination has a source"))
    }

    /// Feeds `tokens[i]` to sequence `seqs[i]` and returns each row's
    /// next-token logits.
    pub fn step(&mut self, seqs: &[usize], tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let m = self.model;
        let cfg = m.config();
        assert_eq!(seqs.len(), tokens.len(), "one token per sequence");
        if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: cfg.vocab_size });
        }
        if self.pos >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong { len: self.pos + 1, max: cfg.max_seq_len });
        }
        for &s in seqs {
            if s >= self.keys.len() || self.keys[s][0].len() != self.pos * cfg.d_head {
                return Err(ModelError::InvalidSampling(format!("sequence {s} is not at position {}", self.pos)));
            }
        }
        let rows = seqs.len();
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let lay = &m.layout;
        let mut input = Vec::with_capacity(rows * d);
        for &t in tokens {
            input.extend_from_slice(m.param(lay.tok).row(t));
            let at = input.len() - d;
            add_assign(&mut input[at..], m.param(lay.pos).row(self.pos));
        }
        let mut resid = input.clone();
        let mut outputs: Vec<(NodeId, Vec<f64>)> = vec![(NodeId::Input, input)];
        let scale = 1.0 / (dh as f64).sqrt();

        for layer in 0..cfg.n_layers {
            let lp = &lay.layers[layer];
            let (g1, b1) = (m.param(lp.ln1_g), m.param(lp.ln1_b));
            let shared = norm(&resid, g1, b1);
            let mut head_outs = Vec::with_capacity(cfg.n_heads);
            for (head, hp) in lp.heads.iter().enumerate() {
                let node = NodeId::Head { layer, head };
                let mut normed: Vec<Vec<f64>> = Vec::with_capacity(3);
                for ch in Channel::ALL {
                    let slot = InputSlot { node, channel: Some(ch) };
                    if self.patch.contains_key(&slot) {
                        normed.push(norm(&self.read(slot, &outputs, &resid, rows)?, g1, b1));
                    } else {
                        normed.push(shared.clone());
                    }
                }
                let q = affine(&normed[0], rows, m.param(hp.wq), Some(m.param(hp.bq)));
                let k = affine(&normed[1], rows, m.param(hp.wk), Some(m.param(hp.bk)));
                let v = affine(&normed[2], rows, m.param(hp.wv), Some(m.param(hp.bv)));
                let idx = layer * cfg.n_heads + head;
                let mut z = vec![0.0; rows * dh];
                for (r, &s) in seqs.iter().enumerate() {
                    self.keys[s][idx].extend_from_slice(&k[r * dh..(r + 1) * dh]);
                    self.values[s][idx].extend_from_slice(&v[r * dh..(r + 1) * dh]);
                    let qr = &q[r * dh..(r + 1) * dh];
                    let mut scores: Vec<f64> = self.keys[s][idx]
                        .chunks_exact(dh)
                        .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale)
                        .collect();
                    softmax_prefix(&mut scores, self.pos + 1);
                    let zr = &mut z[r * dh..(r + 1) * dh];
                    for (a, vr) in scores.iter().zip(self.values[s][idx].chunks_exact(dh)) {
                        for (zi, vi) in zr.iter_mut().zip(vr) {
                            *zi += a * vi;
                        }
                    }
                }
                head_outs.push((node, affine(&z, rows, m.param(hp.wo), None)));
            }
            for (node, out) in head_outs {
                add_assign(&mut resid, &out);
                outputs.push((node, out));
            }
            let node = NodeId::Mlp { layer };
            let x = self.read(InputSlot { node, channel: None }, &outputs, &resid, rows)?;
            let n = norm(&x, m.param(lp.ln2_g), m.param(lp.ln2_b));
            let mut h = affine(&n, rows, m.param(lp.w_in), Some(m.param(lp.b_in)));
            h.iter_mut().for_each(|v| *v = gelu(*v));
            let out = affine(&h, rows, m.param(lp.w_out), Some(m.param(lp.b_out)));
            add_assign(&mut resid, &out);
            outputs.push((node, out));
        }
        let x = self.read(InputSlot { node: NodeId::Logits, channel: None }, &outputs, &resid, rows)?;
        let n = norm(&x, m.param(lay.lnf_g), m.param(lay.lnf_b));
        let logits = affine(&n, rows, m.param(lay.w_u), Some(m.param(lay.b_u)));
        self.pos += 1;
        Ok(logits.chunks_exact(cfg.vocab_size).map(<[f64]>::to_vec).collect())
    }
}

/// Incremental evaluator over one growing sequence.
pub struct Decoder<'m>(BatchDecoder<'m>);

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model, patch: Option<&EdgePatch>) -> Result<Self> {
        Ok(Self(BatchDecoder::new(model, patch, 1)?))
    }

    pub fn position(&self) -> usize {
        self.0.position()
    }

    /// Feeds one token and returns the next-token logits at this position.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        Ok(self.0.step(&[0], &[token])?.pop().expect("one row"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub max_new: usize,
    /// Generation ends after this token is emitted.
    pub stop_token: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { top_k: 40, temperature: 1.0, max_new: 64, stop_token: None }
    }
}

/// The `top_k` most probable tokens (ties broken by lower id) with their
/// renormalized probabilities at `temperature`.
pub fn top_k_distribution(logits: &[f64], top_k: usize, temperature: f64) -> Vec<(usize, f64)> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(top_k.max(1));
    let scaled: Vec<f64> = ids.iter().map(|&i| logits[i] / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    ids.into_iter().zip(weights).map(|(i, w)| (i, w / total)).collect()
}

/// Draws one token from the top-k distribution.
pub fn sample_token(logits: &[f64], top_k: usize, temperature: f64, rng: &mut impl Rng) -> usize {
    let dist = top_k_distribution(logits, top_k, temperature);
    if dist.len() == 1 {
        return dist[0].0;
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(id, p) in &dist {
        cum += p;
        if u < cum {
            return id;
        }
    }
    dist.last().expect("non-empty").0
}

fn validate_sampling(cfg: &SamplingConfig) -> Result<()> {
    if cfg.top_k == 0 {
        return Err(ModelError::InvalidSampling("top_k must be at least 1".into()));
    }
    if cfg.temperature.is_nan() || cfg.temperature <= 0.0 {
        return Err(ModelError::InvalidSampling("temperature must be positive".into()));
    }
    Ok(())
}

/// Extends `prompt` with up to `max_new` sampled tokens (never past the
/// context window). Deterministic in `seed`.
pub fn sample_with(
    model: &Model,
    patch: Option<&EdgePatch>,
    prompt: &[usize],
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    Ok(sample_batch(model, patch, prompt, cfg, &[seed])?.pop().expect("one sequence"))
}

/// One continuation of `prompt` per seed, decoded in lockstep. Each
/// sequence draws from its own generator, so a sequence's tokens depend only
/// on its seed (up to floating-point differences between batch shapes).
pub fn sample_batch(
    model: &Model,
    patch: Option<&EdgePatch>,
    prompt: &[usize],
    cfg: &SamplingConfig,
    seeds: &[u64],
) -> Result<Vec<Vec<usize>>> {
    validate_sampling(cfg)?;
    model.check_tokens(prompt)?;
    let n = seeds.len();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut decoder = BatchDecoder::new(model, patch, n)?;
    let mut outs: Vec<Vec<usize>> = vec![prompt.to_vec(); n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = decoder.step(&active, &vec![t; n])?;
    }
    let budget = cfg.max_new.min(model.config().max_seq_len - prompt.len());
    for i in 0..budget {
        let mut next_active = Vec::with_capacity(active.len());
        let mut next_tokens = Vec::with_capacity(active.len());
        for (row, &s) in active.iter().enumerate() {
            let tok = sample_token(&logits[row], cfg.top_k, cfg.temperature, &mut rngs[s]);
            outs[s].push(tok);
            if Some(tok) != cfg.stop_token {
                next_active.push(s);
                next_tokens.push(tok);
            }
        }
        if next_active.is_empty() || i + 1 == budget {
            break;
        }
        logits = decoder.step(&next_active, &next_tokens)?;
        active = next_active;
    }
    Ok(outs)
}
