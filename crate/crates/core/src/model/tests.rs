use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::Tensor;

fn model(l: usize, h: usize, seed: u64) -> Model {
    // Larger init than the default so the test signals are not all near zero.
    let m = Model::init(&ModelConfig::tiny(l, h, 23, seed)).unwrap();
    let params = m.params().iter().map(|t| t.map(|v| v * 20.0 + 0.01)).collect();
    m.with_params(params).unwrap()
}

const CLEAN: [usize; 7] = [1, 5, 9, 2, 7, 7, 3];
const CORRUPT: [usize; 7] = [1, 5, 11, 2, 7, 4, 3];

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn logits_input_is_the_sum_of_all_node_outputs() {
    let m = model(2, 2, 3);
    let (_, acts) = m.forward_with_cache(&CLEAN).unwrap();
    let mut sum: Option<Tensor> = None;
    for node in m.graph().nodes().iter().filter(|n| **n != NodeId::Logits) {
        let out = acts.output(node).unwrap();
        sum = Some(match sum {
            None => out.clone(),
            Some(s) => s.add(out).unwrap(),
        });
    }
    let slot = InputSlot { node: NodeId::Logits, channel: None };
    assert_eq!(acts.input(&slot).unwrap(), &sum.unwrap());
}

#[test]
fn empty_patch_is_bitwise_identity() {
    let m = model(2, 2, 4);
    let plain = m.forward(&CLEAN).unwrap();
    let patched = m.edge_patched_forward(&CLEAN, &EdgePatch::new()).unwrap();
    assert_eq!(plain, patched);
}

#[test]
fn patching_every_edge_with_corrupt_outputs_reproduces_the_corrupt_run() {
    let m = model(2, 2, 5);
    let (corrupt_logits, corrupt) = m.forward_with_cache(&CORRUPT).unwrap();
    let mut patch = EdgePatch::new();
    for e in m.graph().edges() {
        patch.insert(*e, Replacement::Activation(Arc::clone(&corrupt.outputs[&e.src])));
    }
    let patched = m.edge_patched_forward(&CLEAN, &patch).unwrap();
    assert_eq!(patched, corrupt_logits);
    assert_ne!(m.forward(&CLEAN).unwrap(), corrupt_logits);
}

#[test]
fn patching_one_edge_changes_only_downstream_nodes() {
    let m = model(2, 2, 6);
    let (_, clean) = m.forward_with_cache(&CLEAN).unwrap();
    let edge: EdgeId = "a0.h1->a1.h0<v>".parse().unwrap();
    let mut patch = EdgePatch::new();
    patch.insert(edge, Replacement::zeros(m.config().d_model));
    let (_, patched) = m.patched_forward_with_cache(&CLEAN, &patch).unwrap();
    for node in m.graph().nodes().iter().filter(|n| **n != NodeId::Logits) {
        let same = clean.outputs[node] == patched.outputs[node];
        if node < &edge.dst {
            assert!(same, "{node} should be untouched");
        }
    }
    assert_ne!(clean.outputs[&edge.dst], patched.outputs[&edge.dst]);
    // The other channels of the destination still read the clean residual.
    let q = InputSlot { node: edge.dst, channel: Some(Channel::Q) };
    assert_eq!(clean.inputs[&q], patched.inputs[&q]);
}

#[test]
fn node_replay_matches_cached_outputs() {
    let m = model(2, 2, 7);
    let (logits, acts) = m.forward_with_cache(&CLEAN).unwrap();
    for node in m.graph().nodes() {
        let inputs: BTreeMap<InputSlot, Arc<Tensor>> =
            acts.inputs.iter().filter(|(s, _)| s.node == *node).map(|(s, t)| (*s, Arc::clone(t))).collect();
        let replay = m.node_forward(*node, &inputs, &CLEAN).unwrap();
        let expected = if *node == NodeId::Logits { &logits } else { acts.output(node).unwrap() };
        assert_eq!(&replay, expected, "{node}");
    }
}

#[test]
fn missing_replay_input_is_reported() {
    let m = model(1, 1, 0);
    let err = m.node_forward(NodeId::Mlp { layer: 0 }, &BTreeMap::new(), &CLEAN).unwrap_err();
    assert!(matches!(err, ModelError::MissingInput(s) if s == "m0"));
}

#[test]
fn single_token_shapes() {
    let m = model(1, 1, 1);
    let (logits, acts) = m.forward_with_cache(&[4]).unwrap();
    assert_eq!(logits.shape(), &[1, 23]);
    assert!(acts.outputs.values().all(|t| t.shape() == [1, m.config().d_model]));
    assert_eq!(acts.inputs.len(), 3 + 1 + 1);
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = model(1, 1, 1);
    assert!(matches!(m.forward(&[]), Err(ModelError::EmptyInput)));
    assert!(matches!(m.forward(&[23]), Err(ModelError::TokenOutOfRange { token: 23, vocab: 23 })));
    assert!(matches!(m.forward(&[0; 33]), Err(ModelError::SequenceTooLong { len: 33, max: 32 })));
    let mut patch = EdgePatch::new();
    patch.insert("input->m0".parse().unwrap(), Replacement::zeros(3));
    assert!(matches!(m.edge_patched_forward(&[1], &patch), Err(ModelError::ReplacementShape { .. })));
    let mut patch = EdgePatch::new();
    patch.insert("m1->logits".parse().unwrap(), Replacement::zeros(8));
    assert!(matches!(m.edge_patched_forward(&[1], &patch), Err(ModelError::UnknownEdge(_))));
}

#[test]
fn decoder_matches_full_forward() {
    let m = model(2, 2, 8);
    let full = m.forward(&CLEAN).unwrap();
    let mut dec = Decoder::new(&m, None).unwrap();
    for (t, &tok) in CLEAN.iter().enumerate() {
        let row = dec.step(tok).unwrap();
        assert!(max_abs_diff(&row, full.row(t)) < 1e-9, "position {t}");
    }
    assert_eq!(dec.position(), CLEAN.len());
}

#[test]
fn decoder_matches_patched_forward() {
    let m = model(2, 2, 9);
    let (_, corrupt) = m.forward_with_cache(&CORRUPT).unwrap();
    let mut patch = EdgePatch::new();
    patch.insert("a0.h0->a1.h1<k>".parse().unwrap(), Replacement::zeros(m.config().d_model));
    patch.insert("input->m1".parse().unwrap(), Replacement::Broadcast(Arc::new(vec![0.3; m.config().d_model])));
    let src = NodeId::Mlp { layer: 0 };
    patch.insert("m0->logits".parse().unwrap(), Replacement::Activation(Arc::clone(&corrupt.outputs[&src])));
    let full = m.edge_patched_forward(&CLEAN, &patch).unwrap();
    assert!(max_abs_diff(full.data(), m.forward(&CLEAN).unwrap().data()) > 1e-3);
    let mut dec = Decoder::new(&m, Some(&patch)).unwrap();
    for (t, &tok) in CLEAN.iter().enumerate() {
        let row = dec.step(tok).unwrap();
        assert!(max_abs_diff(&row, full.row(t)) < 1e-9, "position {t}");
    }
}

#[test]
fn batched_rows_match_single_sequences() {
    let m = model(2, 2, 12);
    let seqs = [CLEAN.to_vec(), CORRUPT.to_vec(), vec![2, 2, 2, 2, 2]];
    let mut batch = BatchDecoder::new(&m, None, 3).unwrap();
    for t in 0..CLEAN.len() {
        // The third sequence drops out after its last token.
        let live: Vec<usize> = (0..3).filter(|&s| t < seqs[s].len()).collect();
        let toks: Vec<usize> = live.iter().map(|&s| seqs[s][t]).collect();
        let rows = batch.step(&live, &toks).unwrap();
        for (r, &s) in live.iter().enumerate() {
            let full = m.forward(&seqs[s][..=t]).unwrap();
            assert!(max_abs_diff(&rows[r], full.row(t)) < 1e-9, "sequence {s} position {t}");
        }
    }
    // A finished sequence cannot be fed again.
    let mut batch = BatchDecoder::new(&m, None, 2).unwrap();
    batch.step(&[0, 1], &[1, 1]).unwrap();
    batch.step(&[0], &[1]).unwrap();
    assert!(batch.step(&[0, 1], &[1, 1]).is_err());
}

#[test]
fn batch_sampling_follows_per_sequence_seeds() {
    let m = model(1, 2, 13);
    let cfg = SamplingConfig { top_k: 10, temperature: 1.0, max_new: 12, stop_token: Some(4) };
    let seeds = [3, 17, 99, 5];
    let batch = sample_batch(&m, None, &[1], &cfg, &seeds).unwrap();
    for (s, out) in seeds.iter().zip(&batch) {
        assert_eq!(out, &sample_with(&m, None, &[1], &cfg, *s).unwrap());
    }
    let reordered = sample_batch(&m, None, &[1], &cfg, &[99, 3]).unwrap();
    assert_eq!((&reordered[0], &reordered[1]), (&batch[2], &batch[0]));
}

#[test]
fn greedy_sampling_picks_the_argmax() {
    let m = model(1, 2, 10);
    let cfg = SamplingConfig { top_k: 1, temperature: 1.0, max_new: 5, stop_token: None };
    let out = sample_with(&m, None, &[1, 2], &cfg, 99).unwrap();
    assert_eq!(out.len(), 7);
    for t in 2..out.len() {
        let logits = m.forward(&out[..t]).unwrap();
        let last = logits.row(t - 1);
        let argmax = (0..last.len()).fold(0, |b, i| if last[i] > last[b] { i } else { b });
        assert_eq!(out[t], argmax);
    }
}

#[test]
fn sampling_is_seeded_and_stops() {
    let m = model(1, 2, 11);
    let cfg = SamplingConfig { top_k: 23, temperature: 1.0, max_new: 20, stop_token: None };
    let a = sample_with(&m, None, &[1], &cfg, 5).unwrap();
    assert_eq!(a, sample_with(&m, None, &[1], &cfg, 5).unwrap());
    assert_ne!(a, sample_with(&m, None, &[1], &cfg, 6).unwrap());
    let stop = a[3];
    let first_stop = 1 + a[1..].iter().position(|&t| t == stop).unwrap();
    let cfg = SamplingConfig { stop_token: Some(stop), ..cfg };
    let b = sample_with(&m, None, &[1], &cfg, 5).unwrap();
    assert_eq!(b, a[..=first_stop]);
    // Generation never runs past the context window.
    let long = vec![2; 30];
    let cfg = SamplingConfig { stop_token: None, ..cfg };
    assert_eq!(sample_with(&m, None, &long, &cfg, 1).unwrap().len(), 32);
}

#[test]
fn bad_sampling_settings_are_rejected() {
    let m = model(1, 1, 0);
    let cfg = SamplingConfig { top_k: 0, ..Default::default() };
    assert!(matches!(sample_with(&m, None, &[1], &cfg, 0), Err(ModelError::InvalidSampling(_))));
    let cfg = SamplingConfig { temperature: 0.0, ..Default::default() };
    assert!(sample_with(&m, None, &[1], &cfg, 0).is_err());
}

#[test]
fn top_k_distribution_matches_restricted_softmax() {
    let logits = [0.5, 2.0, -1.0, 2.0, 1.5, 0.0];
    let dist = top_k_distribution(&logits, 3, 0.7);
    // Ties keep the lower id first.
    assert_eq!(dist.iter().map(|d| d.0).collect::<Vec<_>>(), vec![1, 3, 4]);
    let w: Vec<f64> = [2.0f64, 2.0, 1.5].iter().map(|l| (l / 0.7).exp()).collect();
    let z: f64 = w.iter().sum();
    for ((_, p), wi) in dist.iter().zip(&w) {
        assert!((p - wi / z).abs() < 1e-12);
    }
}

#[test]
fn sampled_frequencies_match_the_distribution() {
    let logits = [1.0, 0.2, -0.5, 0.9, -3.0, 0.0];
    let dist = top_k_distribution(&logits, 4, 1.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 100_000;
    let mut counts = [0usize; 6];
    for _ in 0..n {
        counts[sample_token(&logits, 4, 1.3, &mut rng)] += 1;
    }
    for (id, p) in &dist {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[*id] as f64 - n as f64 * p).abs() < 3.0 * sigma, "token {id}");
    }
    assert_eq!(counts[4] + counts[2], 0);
}
