use std::collections::{BTreeMap, BTreeSet, HashMap};

use proptest::prelude::*;

use super::*;

fn setup() -> (Gazetteer, Gazetteer, TemplateSet, Vocab) {
    (Gazetteer::builtin_private(), Gazetteer::builtin_public(), TemplateSet::builtin(), Vocab::builtin())
}

fn private(seed: u64, n: usize) -> CorpusSplits {
    let (g, _, t, v) = setup();
    generate_private_corpus(seed, &GenerationConfig::new(n), &g, &t, &v).unwrap()
}

#[test]
fn builtin_gazetteer_shape() {
    let all = Gazetteer::builtin();
    let vocab = Vocab::builtin();
    for t in PiiType::ALL {
        assert!(all.values(t).len() >= 50, "{t}");
        assert!(all.values(t).iter().all(|v| vocab.encode(v).is_ok_and(|ids| !ids.is_empty())));
    }
    assert!(Gazetteer::builtin_private().overlap(&Gazetteer::builtin_public()).is_empty());
    assert!(all.contains(PiiType::Location, "New York") && all.contains(PiiType::Location, "York"));
    assert!(vocab.len() < 700);
}

#[test]
fn cross_type_duplicates_are_rejected() {
    let mut m = BTreeMap::new();
    m.insert(PiiType::Name, vec!["Jordan".to_string()]);
    m.insert(PiiType::Location, vec!["Jordan".to_string()]);
    assert!(matches!(Gazetteer::new("x", m), Err(CorpusError::Gazetteer(_))));
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(private(7, 500), private(7, 500));
    assert_ne!(private(7, 500).train, private(8, 500).train);
}

#[test]
fn splits_are_disjoint_and_complete() {
    let s = private(3, 500);
    assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (400, 50, 50));
    let ids: BTreeSet<&str> =
        [&s.train, &s.validation, &s.test].iter().flat_map(|c| c.documents.iter().map(|d| d.id.as_str())).collect();
    assert_eq!(ids.len(), 500);
}

#[test]
fn annotations_are_gazetteer_members_and_valid() {
    let (g, _, _, v) = setup();
    let s = private(1, 300);
    for doc in &s.train.documents {
        doc.validate(&v).unwrap();
        assert_eq!(doc.annotations.len(), 3);
        for a in &doc.annotations {
            assert!(g.contains(a.pii_type, &a.value));
        }
        assert!(doc.tokens.len() + 2 <= 64);
    }
}

#[test]
fn top_decile_values_repeat_across_documents() {
    let s = private(11, 500);
    for t in PiiType::ALL {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for c in [&s.train, &s.validation, &s.test] {
            for d in &c.documents {
                for a in d.annotations.iter().filter(|a| a.pii_type == t) {
                    *freq.entry(a.value.as_str()).or_default() += 1;
                }
            }
        }
        let mut counts: Vec<usize> = freq.into_values().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let decile = counts.len().div_ceil(10);
        assert!(counts[..decile].iter().all(|&c| c >= 10), "{t}: {:?}", &counts[..decile]);
    }
}

#[test]
fn matcher_recovers_generated_annotations() {
    let (_, _, _, v) = setup();
    let matcher = PiiMatcher::new(&Gazetteer::builtin(), &v);
    for doc in private(5, 200).train.documents {
        assert_eq!(match_pii(&doc.tokens, &matcher), doc.annotations);
    }
}

#[test]
fn matcher_examples() {
    let v = Vocab::builtin();
    let m = PiiMatcher::new(&Gazetteer::builtin(), &v);
    let plain = v.encode("The Government contested that argument .").unwrap();
    assert!(match_pii(&plain, &m).is_empty());
    let berlin = v.encode("The applicant was arrested in Berlin .").unwrap();
    let hits = match_pii(&berlin, &m);
    assert_eq!(hits.len(), 1);
    assert_eq!((hits[0].pii_type, hits[0].value.as_str(), hits[0].start), (PiiType::Location, "Berlin", 5));
    let ny = v.encode("The applicant lives in New York .").unwrap();
    let hits = match_pii(&ny, &m);
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].value, "New York");
    let york = v.encode("The applicant lives in York .").unwrap();
    assert_eq!(match_pii(&york, &m)[0].value, "York");
}

#[test]
fn scrubbing_masks_every_span() {
    let v = Vocab::builtin();
    let m = PiiMatcher::new(&Gazetteer::builtin(), &v);
    let train = private(2, 200).train;
    let scrubbed = scrub(&train, v.mask(), None);
    assert_eq!(scrubbed.len(), train.len());
    for (before, after) in train.documents.iter().zip(&scrubbed.documents) {
        assert!(after.annotations.is_empty());
        assert!(match_pii(&after.tokens, &m).is_empty());
        let removed: usize = before.annotations.iter().map(|a| a.end - a.start - 1).sum();
        assert_eq!(after.tokens.len(), before.tokens.len() - removed);
        assert_eq!(after.tokens.iter().filter(|&&t| t == v.mask()).count(), before.annotations.len());
    }
    assert_eq!(scrub(&scrubbed, v.mask(), None), scrubbed);
}

#[test]
fn scrubbing_one_type_keeps_the_others_aligned() {
    let v = Vocab::builtin();
    let train = private(2, 50).train;
    let scrubbed = scrub(&train, v.mask(), Some(&[PiiType::Location]));
    for doc in &scrubbed.documents {
        doc.validate(&v).unwrap();
        assert_eq!(doc.annotations.len(), 2);
        assert!(doc.annotations.iter().all(|a| a.pii_type != PiiType::Location));
    }
}

#[test]
fn document_without_pii_is_unchanged_by_scrubbing() {
    let v = Vocab::builtin();
    let doc = Document { id: "x".into(), tokens: v.encode("The proceedings lasted for several years .").unwrap(), annotations: vec![] };
    let c = Corpus { split: Split::Train, seed: 0, template_set: "t".into(), documents: vec![doc.clone()] };
    assert_eq!(scrub(&c, v.mask(), None).documents[0], doc);
}

#[test]
fn public_corpus_uses_only_held_out_values() {
    let (private_g, public_g, t, v) = setup();
    let cfg = GenerationConfig::new(300);
    let public = generate_public_corpus(4, &cfg, &public_g, &private_g, &t, &v).unwrap();
    let private_vals = private(4, 300).train.pii_values();
    assert!(public.train.pii_values().is_disjoint(&private_vals));
    assert_eq!(public, generate_public_corpus(4, &cfg, &public_g, &private_g, &t, &v).unwrap());
    let err = generate_public_corpus(4, &cfg, &private_g, &private_g, &t, &v).unwrap_err();
    assert!(matches!(err, CorpusError::PartitionOverlap { .. }));
}

#[test]
fn unknown_slot_is_an_error() {
    assert!(matches!("The {judge} ruled .".parse::<Template>(), Err(CorpusError::UnknownSlot(s)) if s == "judge"));
    let err = TemplateSet::parse("x", &["{name} ."], &["{race} ."], &["{race} ."], &[]).unwrap_err();
    assert!(matches!(err, CorpusError::Template(_)));
}

#[test]
fn corpus_file_round_trip() {
    let v = Vocab::builtin();
    let dir = tempfile::tempdir().unwrap();
    let c = private(9, 60).validation;
    let p = dir.path().join("c.jsonl");
    c.save(&p, &v).unwrap();
    assert_eq!(Corpus::load(&p, &v).unwrap(), c);
    let g = Gazetteer::builtin();
    g.save(&dir.path().join("g.json")).unwrap();
    assert_eq!(Gazetteer::load(&dir.path().join("g.json")).unwrap(), g);
    v.save(&dir.path().join("v.json")).unwrap();
    assert_eq!(Vocab::load(&dir.path().join("v.json")).unwrap(), v);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scrub_is_idempotent(seed in 0u64..1000, n in 10usize..40) {
        let v = Vocab::builtin();
        let c = private(seed, n).train;
        let once = scrub(&c, v.mask(), None);
        prop_assert_eq!(scrub(&once, v.mask(), None), once);
    }

    #[test]
    fn matcher_never_overlaps(ids in proptest::collection::vec(0usize..600, 0..80)) {
        let v = Vocab::builtin();
        let ids: Vec<usize> = ids.into_iter().map(|i| i % v.len()).collect();
        let hits = match_pii(&ids, &PiiMatcher::new(&Gazetteer::builtin(), &v));
        let mut end = 0;
        for h in hits {
            prop_assert!(h.start >= end && h.end > h.start);
            prop_assert_eq!(v.decode(&ids[h.start..h.end]), h.value);
            end = h.end;
        }
    }
}
