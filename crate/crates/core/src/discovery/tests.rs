use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::corpus::{generate_private_corpus, Annotation, Document, GenerationConfig, Split, TemplateSet};
use crate::model::ModelConfig;

const V: usize = 19;

fn scaled(seed: u64, scale: f64) -> Model {
    let m = Model::init(&ModelConfig::tiny(2, 2, V, seed)).unwrap();
    let params = m.params().iter().map(|t| t.map(|v| v * scale + 0.01)).collect();
    m.with_params(params).unwrap()
}

fn model(seed: u64) -> Model {
    scaled(seed, 10.0)
}

fn pair(clean: &[usize], corrupt: &[usize], answers: (usize, usize)) -> PromptPair {
    PromptPair {
        pii_type: PiiType::Name,
        clean: clean.to_vec(),
        corrupt: corrupt.to_vec(),
        target_pos: clean.len() - 1,
        clean_answer: answers.0,
        corrupt_answer: answers.1,
    }
}

fn pairs() -> Vec<PromptPair> {
    vec![
        pair(&[0, 4, 5, 6, 7], &[0, 4, 9, 6, 7], (8, 10)),
        pair(&[0, 3, 12, 13], &[0, 3, 14, 13], (15, 16)),
        pair(&[0, 2, 2, 5, 7, 11], &[0, 2, 2, 17, 18, 11], (1, 3)),
        pair(&[0, 6, 9], &[0, 8, 9], (4, 5)),
    ]
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

#[test]
fn metric_examples() {
    let p = pair(&[0, 1], &[0, 2], (3, 4));
    let flat = Tensor::filled(&[2, 6], 0.7);
    assert_eq!(leakage_metric(&flat, &p), 0.0);
    let mut onehot = Tensor::zeros(&[2, 6]);
    onehot.row_mut(1)[3] = 2.5;
    onehot.row_mut(1)[4] = -0.5;
    assert_eq!(leakage_metric(&onehot, &p), 3.0);
}

#[test]
fn degenerate_pairs_score_exactly_zero() {
    let m = model(1);
    let same = vec![pair(&[0, 4, 5, 6], &[0, 4, 5, 6], (7, 8)), pair(&[0, 9, 3], &[0, 9, 3], (1, 2))];
    for steps in [1, 3] {
        let c = eapig_scores(&m, &same, steps).unwrap();
        assert_eq!(c.len(), 46);
        assert!(c.values().iter().all(|&s| s == 0.0));
    }
}

#[test]
fn one_step_equals_the_corrupt_endpoint_gradient() {
    let m = model(2);
    let ig = eapig_scores(&m, &pairs(), 1).unwrap();
    let eap = eap_scores(&m, &pairs()).unwrap();
    assert_eq!(ig.scores.len(), eap.scores.len());
    for ((e, a), (_, b)) in ig.scores.iter().zip(&eap.scores) {
        assert!(close(*a, *b, 1e-12), "{e}: {a} vs {b}");
    }
    assert!(ig.values().iter().any(|s| s.abs() > 1e-6));
}

#[test]
fn input_edges_satisfy_completeness() {
    // The embedding reaches the network only through slot reads, so the input
    // node's edge scores add up to the integrated gradient along the path,
    // which tends to metric(clean) - metric(corrupt).
    let m = scaled(3, 3.0);
    for p in pairs() {
        let target = leakage_metric(&m.forward(&p.clean).unwrap(), &p) - leakage_metric(&m.forward(&p.corrupt).unwrap(), &p);
        let c = eapig_scores(&m, std::slice::from_ref(&p), 1000).unwrap();
        let total: f64 = c.scores.iter().filter(|(e, _)| e.src == NodeId::Input).map(|(_, s)| s).sum();
        assert!((total - target).abs() <= 0.01 * target.abs() + 1e-9, "{total} vs {target}");
    }
}

#[test]
fn scores_are_additive_over_pair_batches() {
    let m = model(4);
    let all = pairs();
    let (a, b) = all.split_at(1);
    let ca = eapig_scores(&m, a, 3).unwrap();
    let cb = eapig_scores(&m, b, 3).unwrap();
    let cab = eapig_scores(&m, &all, 3).unwrap();
    for i in 0..cab.len() {
        let weighted = (ca.scores[i].1 * a.len() as f64 + cb.scores[i].1 * b.len() as f64) / all.len() as f64;
        assert!(close(cab.scores[i].1, weighted, 1e-12));
    }
}

#[test]
fn circuit_file_round_trips_bit_exactly() {
    let m = model(5);
    let c = eapig_scores(&m, &pairs(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("circuit.json");
    c.save(&path).unwrap();
    let back = Circuit::load(&path).unwrap();
    assert_eq!(back, c);
    assert!(back.values().iter().zip(c.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    back.validate_against(&m).unwrap();
    assert_eq!(c.model_fingerprint, m.fingerprint());
    let text = c.to_json().unwrap();
    let first = text.find("\"edge_id\"").unwrap();
    assert!(text[first..].starts_with("\"edge_id\": \"input->a0.h0<q>\""), "{}", &text[first..first + 40]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = model(6);
    assert!(matches!(eapig_scores(&m, &[], 3), Err(DiscoveryError::NoPairs)));
    assert!(matches!(eapig_scores(&m, &pairs(), 0), Err(DiscoveryError::InvalidSteps)));
    let bad = pair(&[0, 1, 2], &[0, 1], (3, 4));
    assert!(matches!(eapig_scores(&m, &[bad], 1), Err(DiscoveryError::InvalidPair { index: 0, .. })));
    let same_answer = pair(&[0, 1], &[0, 2], (3, 3));
    assert!(same_answer.check().is_err());
    let split = pair(&[0, 1, 2, 3], &[0, 5, 2, 6], (3, 4));
    assert!(split.check().is_err());
    assert!(Circuit::from_json("{\"format\":\"other\"}").is_err());
}

fn one_doc_corpus(text: &str, spans: &[(usize, usize, PiiType, &str)], vocab: &Vocab) -> Corpus {
    let doc = Document {
        id: "d".into(),
        tokens: vocab.encode(text).unwrap(),
        annotations: spans
            .iter()
            .map(|&(start, end, pii_type, value)| Annotation { start, end, pii_type, value: value.into() })
            .collect(),
    };
    doc.validate(vocab).unwrap();
    Corpus { split: Split::Train, seed: 0, template_set: "t".into(), documents: vec![doc] }
}

#[test]
fn name_pair_swaps_the_first_name() {
    let vocab = Vocab::from_tokens(
        ["<bos>", "<eos>", "<mask>", "Mr.", "John", "Smith", "Heidi", "Weber", "v.", "The", "State"].map(String::from).to_vec(),
    )
    .unwrap();
    let mut values = BTreeMap::new();
    values.insert(PiiType::Name, vec!["John Smith".to_string(), "Heidi Weber".to_string()]);
    let gaz = Gazetteer::new("private", values).unwrap();
    let corpus = one_doc_corpus("Mr. John Smith v. The State", &[(1, 3, PiiType::Name, "John Smith")], &vocab);
    let pairs = build_prompt_pairs(&corpus, PiiType::Name, 1, &gaz, &vocab, 0).unwrap();
    let p = &pairs[0];
    assert_eq!(vocab.decode(&p.clean), "<bos> Mr. John");
    assert_eq!(vocab.decode(&p.corrupt), "<bos> Mr. Heidi");
    assert_eq!(p.target_pos, 2);
    assert_eq!(vocab.token(p.clean_answer), Some("Smith"));
    assert_eq!(vocab.token(p.corrupt_answer), Some("Weber"));

    let err = build_prompt_pairs(&corpus, PiiType::Name, 3, &gaz, &vocab, 0).unwrap_err();
    assert!(matches!(err, DiscoveryError::Shortfall { requested: 3, available: 1, .. }));
    assert!(err.to_string().contains("short by 2"));
}

#[test]
fn generated_pairs_satisfy_the_invariants() {
    let gaz = Gazetteer::builtin_private();
    let vocab = Vocab::builtin();
    let splits = generate_private_corpus(3, &GenerationConfig::new(400), &gaz, &TemplateSet::builtin(), &vocab).unwrap();
    for t in PiiType::ALL {
        let pairs = build_prompt_pairs(&splits.train, t, 40, &gaz, &vocab, 9).unwrap();
        assert_eq!(pairs, build_prompt_pairs(&splits.train, t, 40, &gaz, &vocab, 9).unwrap());
        let distinct: HashSet<&Vec<usize>> = pairs.iter().map(|p| &p.clean).collect();
        assert_eq!(distinct.len(), 40);
        for p in &pairs {
            p.check().unwrap();
            let diff: Vec<usize> = (0..p.clean.len()).filter(|&i| p.clean[i] != p.corrupt[i]).collect();
            assert!(!diff.is_empty() && *diff.last().unwrap() == p.target_pos);
            // The corrupt prefix plus its answer spells a gazetteer value of the same type.
            let mut value: Vec<usize> = diff.iter().map(|&i| p.corrupt[i]).collect();
            value.push(p.corrupt_answer);
            assert!(gaz.contains(t, &vocab.decode(&value)), "{}", vocab.decode(&value));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn pair_order_does_not_change_scores(seed in 0u64..1000) {
        let m = model(7);
        let mut shuffled = pairs();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = eapig_scores(&m, &pairs(), 2).unwrap();
        let b = eapig_scores(&m, &shuffled, 2).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }
}

