use super::*;
use crate::circuits::intersect;
use crate::corpus::{generate_private_corpus, GenerationConfig, TemplateSet};
use crate::model::{EdgeId, ModelConfig};

fn model(vocab: usize, seed: u64) -> Model {
    let cfg = ModelConfig { max_seq_len: 64, ..ModelConfig::tiny(2, 2, vocab, seed) };
    let m = Model::init(&cfg).unwrap();
    let params = m.params().iter().map(|t| t.map(|v| v * 5.0 + 0.01)).collect();
    m.with_params(params).unwrap()
}

fn shared(m: &Model, edges: Vec<EdgeId>) -> SharedEdges {
    SharedEdges {
        format: circuits::SHARED_FORMAT.into(),
        version: circuits::FORMAT_VERSION,
        pii_types: vec![PiiType::Name],
        model_fingerprint: m.fingerprint(),
        percentile: Some(95.0),
        combine: Combine::Intersection,
        edges,
    }
}

fn provenance() -> Provenance {
    Provenance { percentile: Some(95.0), pii_types: vec![PiiType::Name], circuit_fingerprints: vec![], reference: "test".into() }
}

fn zero_plan(m: &Model, edges: Vec<EdgeId>) -> PatchPlan {
    PatchPlan::new(AblationMode::Zero, shared(m, edges), None, provenance()).unwrap()
}

const A: [usize; 6] = [0, 3, 7, 2, 9, 4];
const B: [usize; 6] = [0, 8, 1, 5, 5, 6];

#[test]
fn means_of_single_position_and_symmetric_rows() {
    let m = model(13, 1);
    let means = compute_means(&m, &[vec![5]]).unwrap();
    let (_, acts) = m.forward_with_cache(&[5]).unwrap();
    for (node, out) in &acts.outputs {
        assert_eq!(means[node].as_slice(), out.data());
    }
    let a = Tensor::matrix(2, 3, vec![1.5, -2.0, 0.25, 3.0, 7.0, -1.0]);
    let mut acc = vec![0.0; 3];
    add_rows(&mut acc, &a);
    add_rows(&mut acc, &a.scale(-1.0));
    assert_eq!(acc, vec![0.0; 3]);
    assert!(matches!(compute_means(&m, &[]), Err(PatchError::EmptyReference)));
}

#[test]
fn means_do_not_depend_on_prompt_order() {
    let m = model(13, 2);
    let prompts = vec![A.to_vec(), B.to_vec(), vec![0, 1, 2], vec![4, 4, 4, 4, 11]];
    let mut rev = prompts.clone();
    rev.reverse();
    let (x, y) = (compute_means(&m, &prompts).unwrap(), compute_means(&m, &rev).unwrap());
    for (node, v) in &x {
        for (a, b) in v.iter().zip(&y[node]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn empty_plan_is_the_identity() {
    let m = model(13, 3);
    let p = apply_patch(&m, &zero_plan(&m, vec![])).unwrap();
    assert!(p.is_identity());
    assert_eq!(p.forward(&A).unwrap(), m.forward(&A).unwrap());
}

#[test]
fn applying_a_plan_twice_matches_once() {
    let m = model(13, 4);
    let edges = m.graph().edges()[3..9].to_vec();
    let plan = zero_plan(&m, edges);
    let once = apply_patch(&m, &plan).unwrap();
    let twice = once.with_plan(&plan).unwrap();
    assert_eq!(once.forward(&A).unwrap(), twice.forward(&A).unwrap());
    assert_ne!(once.forward(&A).unwrap(), m.forward(&A).unwrap());
    // The weights are untouched.
    assert_eq!(once.model().fingerprint(), m.fingerprint());
}

#[test]
fn zeroing_every_logit_edge_gives_input_independent_logits() {
    let m = model(13, 5);
    let into_logits: Vec<EdgeId> = m.graph().edges().iter().copied().filter(|e| e.dst == NodeId::Logits).collect();
    let p = apply_patch(&m, &zero_plan(&m, into_logits)).unwrap();
    let (la, lb) = (p.forward(&A).unwrap(), p.forward(&B).unwrap());
    assert_eq!(la, lb);
    for r in 1..la.rows() {
        assert_eq!(la.row(r), la.row(0));
    }
}

#[test]
fn mean_ablation_on_its_own_single_token_reference_is_exact() {
    let m = model(13, 6);
    let means = compute_means(&m, &[vec![7]]).unwrap();
    let edges: Vec<EdgeId> = m.graph().edges().iter().copied().step_by(3).collect();
    let plan = PatchPlan::new(AblationMode::Mean, shared(&m, edges), Some(means), provenance()).unwrap();
    let p = apply_patch(&m, &plan).unwrap();
    assert_eq!(p.forward(&[7]).unwrap(), m.forward(&[7]).unwrap());
}

#[test]
fn plan_validation_and_fingerprints() {
    let m = model(13, 7);
    let other = model(13, 8);
    let plan = zero_plan(&m, m.graph().edges()[..2].to_vec());
    assert!(matches!(apply_patch(&other, &plan), Err(PatchError::FingerprintMismatch { .. })));
    let edges = m.graph().edges()[..2].to_vec();
    let err = PatchPlan::new(AblationMode::Mean, shared(&m, edges.clone()), Some(BTreeMap::new()), provenance()).unwrap_err();
    assert!(matches!(err, PatchError::MissingMean(NodeId::Input)));
    let err = PatchPlan::new(AblationMode::Zero, shared(&m, edges), Some(BTreeMap::new()), provenance()).unwrap_err();
    assert!(matches!(err, PatchError::UnexpectedMeans));
    assert_eq!("mean".parse::<AblationMode>().unwrap(), AblationMode::Mean);
    assert!("half".parse::<AblationMode>().is_err());
}

#[test]
fn plan_file_round_trips() {
    let m = model(13, 9);
    let means = compute_means(&m, &[A.to_vec()]).unwrap();
    let plan = PatchPlan::new(AblationMode::Mean, shared(&m, m.graph().edges()[..5].to_vec()), Some(means), provenance()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("plan.json");
    plan.save(&path).unwrap();
    let back = PatchPlan::load(&path).unwrap();
    assert_eq!(back, plan);
    assert_eq!(apply_patch(&m, &back).unwrap().forward(&B).unwrap(), apply_patch(&m, &plan).unwrap().forward(&B).unwrap());
}

fn pipeline_inputs() -> (Model, Corpus, Gazetteer, Vocab) {
    let gaz = Gazetteer::builtin_private();
    let vocab = Vocab::builtin();
    let splits = generate_private_corpus(5, &GenerationConfig::new(200), &gaz, &TemplateSet::builtin(), &vocab).unwrap();
    (model(vocab.len(), 10), splits.train, gaz, vocab)
}

#[test]
fn pipeline_is_deterministic_and_consistent() {
    let (m, corpus, gaz, vocab) = pipeline_inputs();
    let cfg = PipelineConfig { n_pairs: 6, ig_steps: 2, seed: 3, ..Default::default() };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = patch_pipeline(&m, &corpus, &gaz, &vocab, &cfg, d1.path()).unwrap();
    let b = patch_pipeline(&m, &corpus, &gaz, &vocab, &cfg, d2.path()).unwrap();
    assert_eq!(std::fs::read(d1.path().join("manifest.json")).unwrap(), std::fs::read(d2.path().join("manifest.json")).unwrap());
    assert_eq!(a.manifest.artifacts.len(), 3 * 3 + 2);
    for rec in &a.manifest.artifacts {
        let bytes = std::fs::read(d1.path().join(&rec.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), rec.sha256);
    }
    assert_eq!(a.shared, intersect(&a.selections).unwrap());
    assert_eq!(a.manifest.empty_intersection, a.shared.edges.is_empty());
    assert_eq!(a.patched.is_identity(), a.shared.edges.is_empty());
    assert_eq!(a.patched.patch().len(), b.patched.patch().len());
    let loaded = Manifest::load(&d1.path().join("manifest.json")).unwrap();
    assert_eq!(loaded, a.manifest);
}

#[test]
fn precomputed_circuits_reproduce_the_pipeline() {
    let (m, corpus, gaz, vocab) = pipeline_inputs();
    let cfg = PipelineConfig { n_pairs: 5, ig_steps: 2, seed: 4, mode: AblationMode::Mean, ..Default::default() };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    patch_pipeline(&m, &corpus, &gaz, &vocab, &cfg, d1.path()).unwrap();
    let (pairs, circuits) = discover_circuits(&m, &corpus, &gaz, &vocab, &cfg).unwrap();
    patch_with_circuits(&m, &corpus, &vocab, &cfg, pairs.clone(), circuits.clone(), d2.path()).unwrap();
    for name in ["manifest.json", "plan.json", "shared.json", "circuit-race.json"] {
        assert_eq!(std::fs::read(d1.path().join(name)).unwrap(), std::fs::read(d2.path().join(name)).unwrap(), "{name}");
    }
    let other = PipelineConfig { ig_steps: 3, ..cfg.clone() };
    assert!(matches!(
        patch_with_circuits(&m, &corpus, &vocab, &other, pairs.clone(), circuits.clone(), d2.path()),
        Err(PatchError::Format(_))
    ));
    let fewer = PipelineConfig { pii_types: vec![PiiType::Name], ..cfg };
    assert!(patch_with_circuits(&m, &corpus, &vocab, &fewer, pairs, circuits, d2.path()).is_err());
}

#[test]
fn disjoint_selections_leave_the_model_unpatched() {
    let (m, corpus, gaz, vocab) = pipeline_inputs();
    // A selection and its complement share no edge.
    let cfg = PipelineConfig { n_pairs: 4, ig_steps: 1, seed: 1, pii_types: vec![PiiType::Name], ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let out = patch_pipeline(&m, &corpus, &gaz, &vocab, &cfg, dir.path()).unwrap();
    let mut complement = out.selections[0].clone();
    complement.pii_type = PiiType::Race;
    complement.edges = m.graph().edges().iter().copied().filter(|e| !out.selections[0].edges.contains(e)).collect();
    let empty = intersect(&[out.selections[0].clone(), complement]).unwrap();
    assert!(empty.edges.is_empty());
    let plan = PatchPlan::new(AblationMode::Zero, empty, None, provenance()).unwrap();
    let patched = apply_patch(&m, &plan).unwrap();
    assert!(patched.is_identity());
    assert_eq!(patched.forward(&A).unwrap(), m.forward(&A).unwrap());
}
