//! Training loops (plain and differentially private) and perplexity.
//!
//! Both loops compute one gradient per example and sum them in batch order,
//! so a DP run with no noise and a non-binding clip performs exactly the
//! same arithmetic as a plain run.

mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use optim::AdamW;

use crate::model::{EdgePatch, Model, ModelError, RunOptions};
use crate::numerics::{log_softmax, NumericsError, Tape, Tensor};
use crate::seeds;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("training diverged in epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence {index} has fewer than two tokens")]
    ShortSequence { index: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    LinearDecay,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::LinearDecay,
            weight_decay: 0.01,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(TrainError::InvalidConfig { field, reason: reason.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be finite and non-negative");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len", "must be at least 2");
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => self.learning_rate * (1.0 - step as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Carried into reports only; no privacy accounting is done.
    pub epsilon_label: Option<String>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self { clip_norm: 1.0, noise_multiplier: 1.0, epsilon_label: None }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::InvalidConfig { field: "clip_norm", reason: "must be positive".into() });
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(TrainError::InvalidConfig { field: "noise_multiplier", reason: "must be finite and >= 0".into() });
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    /// Clipped per-example gradient norms, one entry per example step (DP only).
    pub clipped_norms: Vec<f64>,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("epoch,split,loss,perplexity\n");
    for p in curve {
        writeln!(out, "{},{},{},{}", p.epoch, p.split, p.loss, p.perplexity).expect("write to string");
    }
    out
}

/// Mean next-token loss of one sequence and its gradient for every parameter.
pub fn example_gradient(model: &Model, seq: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
    let mut tape = Tape::new();
    let trace = model.run(&mut tape, inputs, &RunOptions { track_params: true, ..Default::default() })?;
    let loss = tape.cross_entropy(trace.logits, targets).map_err(ModelError::from)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss).map_err(ModelError::from)?;
    let g = trace
        .params
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, g))
}

fn check_sequences(model: &Model, seqs: &[Vec<usize>], cfg: &TrainConfig) -> Result<()> {
    if seqs.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let limit = cfg.max_seq_len.min(model.config().max_seq_len + 1);
    for (index, s) in seqs.iter().enumerate() {
        if s.len() < 2 {
            return Err(TrainError::ShortSequence { index });
        }
        if s.len() > limit {
            return Err(ModelError::SequenceTooLong { len: s.len(), max: limit }.into());
        }
        model.check_tokens(s)?;
    }
    Ok(())
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
}

fn add_into(acc: &mut Option<Vec<Tensor>>, g: Vec<Tensor>) {
    match acc {
        None => *acc = Some(g),
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y).expect("matching parameter shapes")),
    }
}

/// Clips each example's gradient to `clip_norm` (global L2 norm), averages
/// over the batch and adds Gaussian noise with standard deviation
/// `noise_multiplier * clip_norm / batch`. Returns the noisy mean and the
/// clipped norms.
pub fn privatize(per_example: Vec<Vec<Tensor>>, dp: &DpConfig, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<f64>) {
    let batch = per_example.len();
    let mut norms = Vec::with_capacity(batch);
    let mut acc: Option<Vec<Tensor>> = None;
    for mut g in per_example {
        let norm = global_norm(&g);
        let factor = if norm > dp.clip_norm { dp.clip_norm / norm } else { 1.0 };
        if factor != 1.0 {
            g.iter_mut().for_each(|t| *t = t.scale(factor));
        }
        norms.push(norm * factor);
        add_into(&mut acc, g);
    }
    let mut mean: Vec<Tensor> = acc.expect("non-empty batch").into_iter().map(|t| t.scale(1.0 / batch as f64)).collect();
    let std = dp.noise_multiplier * dp.clip_norm / batch as f64;
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for t in &mut mean {
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
        }
    }
    (mean, norms)
}

fn run_training(
    model: &Model,
    seqs: &[Vec<usize>],
    cfg: &TrainConfig,
    dp: Option<&DpConfig>,
    eval: Option<&[Vec<usize>]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(dp) = dp {
        dp.validate()?;
    }
    check_sequences(model, seqs, cfg)?;
    let mut params: Vec<Tensor> = model.params().iter().map(|p| (**p).clone()).collect();
    let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
    let mut opt = AdamW::new(&shapes, cfg.weight_decay);
    let steps_per_epoch = seqs.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "train/noise"));
    let mut current = model.clone();
    let mut curve = Vec::new();
    let mut clipped_norms = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive_indexed(cfg.seed, "train/shuffle", epoch as u64)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut per_example = Vec::with_capacity(batch.len());
            for &i in batch {
                let (loss, g) = example_gradient(&current, &seqs[i]).map_err(|e| match e {
                    TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. })) => TrainError::Diverged { epoch },
                    e => e,
                })?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                loss_sum += loss;
                per_example.push(g);
            }
            let grads = match dp {
                Some(dp) => {
                    let (g, norms) = privatize(per_example, dp, &mut noise_rng);
                    clipped_norms.extend(norms);
                    g
                }
                None => {
                    let n = per_example.len();
                    let mut acc = None;
                    per_example.into_iter().for_each(|g| add_into(&mut acc, g));
                    acc.expect("non-empty batch").into_iter().map(|t| t.scale(1.0 / n as f64)).collect()
                }
            };
            opt.update(&mut params, &grads, cfg.lr_at(step, total));
            step += 1;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            current = model.with_params(params.clone())?;
        }
        let loss = loss_sum / seqs.len() as f64;
        tracing::debug!(epoch, loss, "epoch finished");
        curve.push(CurvePoint { epoch, split: "train".into(), loss, perplexity: loss.exp() });
        if let Some(eval) = eval {
            let ppl = perplexity(&current, eval)?;
            curve.push(CurvePoint { epoch, split: "validation".into(), loss: ppl.ln(), perplexity: ppl });
        }
    }
    Ok(TrainOutcome { model: current, curve, clipped_norms })
}

/// Fine-tunes (or pretrains) `model` on `seqs`. Deterministic in `cfg.seed`.
pub fn train(model: &Model, seqs: &[Vec<usize>], cfg: &TrainConfig, eval: Option<&[Vec<usize>]>) -> Result<TrainOutcome> {
    run_training(model, seqs, cfg, None, eval)
}

pub fn dp_train(
    model: &Model,
    seqs: &[Vec<usize>],
    cfg: &TrainConfig,
    dp: &DpConfig,
    eval: Option<&[Vec<usize>]>,
) -> Result<TrainOutcome> {
    run_training(model, seqs, cfg, Some(dp), eval)
}

/// Summed negative log-likelihood of every next-token prediction in `seq`,
/// and the number of predictions.
pub fn sequence_nll(model: &Model, patch: Option<&EdgePatch>, seq: &[usize]) -> Result<(f64, usize)> {
    if seq.len() < 2 {
        return Ok((0.0, 0));
    }
    let input = &seq[..seq.len() - 1];
    let logits = match patch {
        Some(p) => model.edge_patched_forward(input, p)?,
        None => model.forward(input)?,
    };
    let nll = seq[1..].iter().enumerate().map(|(t, &y)| -log_softmax(logits.row(t))[y]).sum();
    Ok((nll, seq.len() - 1))
}

/// exp of the token-weighted mean next-token loss.
pub fn perplexity(model: &Model, seqs: &[Vec<usize>]) -> Result<f64> {
    perplexity_patched(model, None, seqs)
}

/// Perplexity with an edge intervention active.
pub fn perplexity_patched(model: &Model, patch: Option<&EdgePatch>, seqs: &[Vec<usize>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0;
    for s in seqs {
        let (a, b) = sequence_nll(model, patch, s)?;
        nll += a;
        n += b;
    }
    if n == 0 {
        return Err(TrainError::EmptyCorpus);
    }
    Ok((nll / n as f64).exp())
}
