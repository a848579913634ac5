use super::*;

fn field_of(cfg: &ExperimentConfig) -> String {
    match cfg.validate() {
        Err(ExperimentError::InvalidConfig { field, .. }) => field,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn defaults_validate_and_bad_fields_are_named() {
    ExperimentConfig::default().validate().unwrap();
    let mut c = ExperimentConfig::default();
    c.patch.percentile = 90.0;
    assert_eq!(field_of(&c), "patch.percentile");
    let mut c = ExperimentConfig::default();
    c.model.n_heads = 0;
    assert_eq!(field_of(&c), "model.n_heads");
    let mut c = ExperimentConfig::default();
    c.finetune.epochs = 0;
    assert_eq!(field_of(&c), "finetune.epochs");
    let mut c = ExperimentConfig::default();
    c.dp.clip_norm = 0.0;
    assert_eq!(field_of(&c), "dp.clip_norm");
    let mut c = ExperimentConfig::default();
    c.attack.top_k = 0;
    assert_eq!(field_of(&c), "attack");
    let mut c = ExperimentConfig::default();
    c.discovery.pii_types = vec![PiiType::Name, PiiType::Name];
    assert_eq!(field_of(&c), "discovery.pii_types");
    let mut c = ExperimentConfig::default();
    c.corpus.test_fraction = 0.0;
    assert_eq!(field_of(&c), "corpus.test_fraction");
}

#[test]
fn config_files_round_trip_and_reject_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 9;
    cfg.patch.mode = AblationMode::Mean;
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);

    std::fs::write(&path, r#"{"seed": 3, "patch": {"percentile": 99.0}}"#).unwrap();
    let partial = ExperimentConfig::load(&path).unwrap();
    assert_eq!((partial.seed, partial.patch.percentile), (3, 99.0));
    assert_eq!(partial.attack, AttackSettings::default());

    std::fs::write(&path, r#"{"patch": {"percentil": 99.0}}"#).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(ExperimentError::Format(_))));
    std::fs::write(&path, r#"{"patch": {"percentile": 50.0}}"#).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(ExperimentError::InvalidConfig { .. })));
}

#[test]
fn grid_has_four_distinct_cells() {
    let g = Cell::grid();
    assert_eq!(g.len(), 4);
    let labels: BTreeSet<String> = g.iter().map(Cell::label).collect();
    assert_eq!(labels, ["mean-95", "mean-99", "zero-95", "zero-99"].iter().map(|s| s.to_string()).collect());
    assert_eq!("scrub".parse::<Defense>().unwrap(), Defense::Scrub);
    assert!("noise".parse::<Defense>().is_err());
}

fn tiny_config(root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        seed: 5,
        paths: Paths::under(root),
        corpus: CorpusSettings { private_docs: 80, public_docs: 40, ..Default::default() },
        model: ModelShape { n_layers: 1, n_heads: 2, d_model: 16, d_head: 8, d_mlp: 32, max_seq_len: 64 },
        pretrain: TrainSettings { epochs: 1, ..Default::default() },
        finetune: TrainSettings { epochs: 1, learning_rate: 1e-2, ..Default::default() },
        discovery: DiscoverySettings { n_pairs: 4, ig_steps: 1, ..Default::default() },
        attack: AttackSettings { n_queries: 6, max_new_tokens: 10, repetitions: 2, exclusion_factor: 1, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn corpus_bundle_round_trips_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = CorpusBundle::generate(&cfg).unwrap();
    let names = a.save(&dir.path().join("a")).unwrap();
    assert_eq!(names.len(), 9);
    let loaded = CorpusBundle::load(&dir.path().join("a")).unwrap();
    loaded.save(&dir.path().join("b")).unwrap();
    CorpusBundle::generate(&cfg).unwrap().save(&dir.path().join("c")).unwrap();
    for n in &names {
        let bytes = std::fs::read(dir.path().join("a").join(n)).unwrap();
        assert_eq!(bytes, std::fs::read(dir.path().join("b").join(n)).unwrap(), "{n}");
        assert_eq!(bytes, std::fs::read(dir.path().join("c").join(n)).unwrap(), "{n}");
    }
    assert!(a.train_values().iter().all(|(t, v)| a.private_gazetteer.contains(*t, v)));
}

#[test]
fn tiny_sweep_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&cfg, &Cell::grid(), &Preset::ALL).unwrap();
    assert_eq!(out.reports.len(), Defense::ALL.len() + 2 * 4);
    for preset in Preset::ALL {
        let cells: Vec<&SweepCell> = out.manifest.cells_for(preset).collect();
        assert_eq!(cells.len(), 4);
        for c in cells {
            let bytes = std::fs::read(c.dir.join("manifest.json")).unwrap();
            assert_eq!(sha256_hex(&bytes), c.manifest_sha256);
            assert!(c.report.exists());
            assert_eq!(c.pipeline.percentile, c.percentile);
        }
    }
    let loaded = SweepManifest::load(&cfg.paths.output.join("sweep.json")).unwrap();
    assert_eq!(loaded, out.manifest);
    let table = std::fs::read_to_string(cfg.paths.output.join("tradeoff.md")).unwrap();
    assert_eq!(report::parse_tradeoff_table(&table).unwrap().len(), out.reports.len());
    assert_eq!(out.faithfulness.len(), 2 * PiiType::ALL.len());
    assert!(run(&cfg, &[Cell { mode: AblationMode::Zero, percentile: 90.0 }], &[]).is_err());
}
