//! Experiment configuration and the stages of a full run: corpus
//! generation, pretraining, fine-tuning under each defense, circuit
//! discovery, patching and the extraction attack, plus the sweep over
//! ablation modes and percentiles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, AttackError, LeakageReport, PiiValue};
use crate::circuits::{self, Combine, CircuitsError, OverlapRow, Ranking};
use crate::corpus::{
    generate_private_corpus, generate_public_corpus, scrub, Corpus, CorpusError, CorpusSplits, Gazetteer,
    GenerationConfig, PiiMatcher, PiiType, Split, TemplateSet, Vocab,
};
use crate::discovery::{Circuit, DiscoveryError};
use crate::model::{EdgePatch, Model, ModelConfig, ModelError};
use crate::patching::{self, sha256_hex, AblationMode, MeanReference, PatchError, PipelineConfig};
use crate::report::{self, ReportError};
use crate::seeds;
use crate::training::{self, DpConfig, LrSchedule, TrainConfig, TrainError, TrainOutcome};

pub const CONFIG_FORMAT: &str = "patchlab-experiment";
pub const SWEEP_FORMAT: &str = "patchlab-sweep";
pub const FORMAT_VERSION: u32 = 1;
/// Edge-selection percentiles a run may use.
pub const PERCENTILES: [f64; 2] = [95.0, 99.0];

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Circuits(#[from] CircuitsError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn invalid<T>(field: impl Into<String>, reason: impl Into<String>) -> Result<T> {
    Err(ExperimentError::InvalidConfig { field: field.into(), reason: reason.into() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: "corpus".into(), checkpoints: "checkpoints".into(), output: "out".into() }
    }
}

impl Paths {
    /// All three directories under `root`.
    pub fn under(root: &Path) -> Self {
        Self { corpus: root.join("corpus"), checkpoints: root.join("checkpoints"), output: root.join("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub private_docs: usize,
    pub public_docs: usize,
    pub n_profiles: Option<usize>,
    pub zipf_exponent: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub filler_prob: f64,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            private_docs: 600,
            public_docs: 400,
            n_profiles: Some(50),
            zipf_exponent: 1.0,
            validation_fraction: 0.1,
            test_fraction: 0.1,
            filler_prob: 0.5,
        }
    }
}

impl CorpusSettings {
    fn generation(&self, n_docs: usize, n_profiles: Option<usize>) -> GenerationConfig {
        GenerationConfig {
            n_docs,
            zipf_exponent: self.zipf_exponent,
            n_profiles,
            validation_fraction: self.validation_fraction,
            test_fraction: self.test_fraction,
            filler_prob: self.filler_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 0);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_head: d.d_head,
            d_mlp: d.d_mlp,
            max_seq_len: d.max_seq_len,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_mlp: self.d_mlp,
            vocab_size,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_schedule: t.lr_schedule,
            weight_decay: t.weight_decay,
        }
    }
}

impl TrainSettings {
    pub fn config(&self, max_seq_len: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_schedule: self.lr_schedule,
            weight_decay: self.weight_decay,
            max_seq_len,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverySettings {
    pub pii_types: Vec<PiiType>,
    pub n_pairs: usize,
    pub ig_steps: usize,
}

impl Default for DiscoverySettings {
    fn default() -> Self {
        Self { pii_types: PiiType::ALL.to_vec(), n_pairs: 100, ig_steps: crate::discovery::DEFAULT_IG_STEPS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSettings {
    pub percentile: f64,
    pub mode: AblationMode,
    pub ranking: Ranking,
    pub combine: Combine,
    pub mean_reference: MeanReference,
}

impl Default for PatchSettings {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            percentile: p.percentile,
            mode: p.mode,
            ranking: p.ranking,
            combine: p.combine,
            mean_reference: p.mean_reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub n_queries: usize,
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub repetitions: usize,
    pub exclusion_factor: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            n_queries: a.n_queries,
            max_new_tokens: a.max_new_tokens,
            top_k: a.top_k,
            temperature: a.temperature,
            repetitions: a.repetitions,
            exclusion_factor: a.exclusion_factor,
        }
    }
}

impl AttackSettings {
    pub fn config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            n_queries: self.n_queries,
            max_new_tokens: self.max_new_tokens,
            top_k: self.top_k,
            temperature: self.temperature,
            repetitions: self.repetitions,
            seed,
            exclusion_factor: self.exclusion_factor,
        }
    }
}

/// Everything a run depends on. Stage seeds are derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusSettings,
    pub model: ModelShape,
    pub pretrain: TrainSettings,
    pub finetune: TrainSettings,
    pub dp: DpConfig,
    /// Types redacted by the scrubbing defense.
    pub scrub_types: Vec<PiiType>,
    pub discovery: DiscoverySettings,
    pub patch: PatchSettings,
    pub attack: AttackSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            format: CONFIG_FORMAT.into(),
            version: FORMAT_VERSION,
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusSettings::default(),
            model: ModelShape::default(),
            pretrain: TrainSettings { epochs: 2, ..Default::default() },
            finetune: TrainSettings::default(),
            dp: DpConfig::default(),
            scrub_types: PiiType::ALL.to_vec(),
            discovery: DiscoverySettings::default(),
            patch: PatchSettings::default(),
            attack: AttackSettings::default(),
        }
    }
}

fn check_percentile(field: &str, p: f64) -> Result<()> {
    if !PERCENTILES.contains(&p) {
        return invalid(field, format!("must be one of {PERCENTILES:?}, got {p}"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT || self.version != FORMAT_VERSION {
            return invalid("format", format!("unsupported config {} v{}", self.format, self.version));
        }
        for (field, p) in [("paths.corpus", &self.paths.corpus), ("paths.checkpoints", &self.paths.checkpoints), ("paths.output", &self.paths.output)] {
            if p.as_os_str().is_empty() {
                return invalid(field, "must not be empty");
            }
        }
        let c = &self.corpus;
        if c.private_docs == 0 {
            return invalid("corpus.private_docs", "must be positive");
        }
        if c.public_docs == 0 {
            return invalid("corpus.public_docs", "must be positive");
        }
        if c.n_profiles == Some(0) {
            return invalid("corpus.n_profiles", "must be positive");
        }
        if !(c.zipf_exponent >= 0.0 && c.zipf_exponent.is_finite()) {
            return invalid("corpus.zipf_exponent", "must be finite and non-negative");
        }
        for (field, f) in [("corpus.validation_fraction", c.validation_fraction), ("corpus.test_fraction", c.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return invalid(field, "must be in [0, 1)");
            }
        }
        if c.validation_fraction + c.test_fraction >= 1.0 {
            return invalid("corpus.test_fraction", "validation and test fractions must sum below 1");
        }
        if c.test_fraction == 0.0 {
            return invalid("corpus.test_fraction", "perplexity needs a test split");
        }
        if !(0.0..=1.0).contains(&c.filler_prob) {
            return invalid("corpus.filler_prob", "must be in [0, 1]");
        }
        self.model.config(3, 0).validate().map_err(|e| match e {
            ModelError::InvalidConfig { field, reason } => {
                ExperimentError::InvalidConfig { field: format!("model.{field}"), reason }
            }
            other => other.into(),
        })?;
        for (name, t) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            t.config(self.model.max_seq_len, 0).validate().map_err(|e| match e {
                TrainError::InvalidConfig { field, reason } => {
                    ExperimentError::InvalidConfig { field: format!("{name}.{field}"), reason }
                }
                other => other.into(),
            })?;
        }
        self.dp.validate().map_err(|e| match e {
            TrainError::InvalidConfig { field, reason } => {
                ExperimentError::InvalidConfig { field: format!("dp.{field}"), reason }
            }
            other => other.into(),
        })?;
        if self.scrub_types.is_empty() {
            return invalid("scrub_types", "must name at least one type");
        }
        let d = &self.discovery;
        if d.pii_types.is_empty() {
            return invalid("discovery.pii_types", "must name at least one type");
        }
        if d.pii_types.iter().collect::<BTreeSet<_>>().len() != d.pii_types.len() {
            return invalid("discovery.pii_types", "must not repeat a type");
        }
        if d.n_pairs == 0 {
            return invalid("discovery.n_pairs", "must be positive");
        }
        if d.ig_steps == 0 {
            return invalid("discovery.ig_steps", "must be positive");
        }
        check_percentile("patch.percentile", self.patch.percentile)?;
        self.attack.config(0).validate().map_err(|e| ExperimentError::InvalidConfig {
            field: "attack".into(),
            reason: e.to_string().trim_start_matches("invalid attack config: ").to_string(),
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Format(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn seed_for(&self, label: &str) -> u64 {
        seeds::derive(self.seed, label)
    }

    pub fn attack_config(&self) -> AttackConfig {
        self.attack.config(self.seed_for("attack"))
    }

    pub fn pipeline_config(&self, cell: Cell) -> PipelineConfig {
        PipelineConfig {
            pii_types: self.discovery.pii_types.clone(),
            percentile: cell.percentile,
            mode: cell.mode,
            ig_steps: self.discovery.ig_steps,
            n_pairs: self.discovery.n_pairs,
            seed: self.seed_for("discovery"),
            ranking: self.patch.ranking,
            combine: self.patch.combine,
            mean_reference: self.patch.mean_reference,
        }
    }

    /// The (mode, percentile) cell named by `patch`.
    pub fn default_cell(&self) -> Cell {
        Cell { mode: self.patch.mode, percentile: self.patch.percentile }
    }
}

/// Fine-tuning regime of the attacked model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Defense {
    None,
    Scrub,
    Dp,
}

impl Defense {
    pub const ALL: [Defense; 3] = [Defense::None, Defense::Scrub, Defense::Dp];

    pub fn as_str(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Scrub => "scrub",
            Defense::Dp => "dp",
        }
    }
}

impl fmt::Display for Defense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Defense {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Defense::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| ExperimentError::InvalidConfig { field: "defense".into(), reason: format!("unknown defense {s:?}") })
    }
}

/// PATCH applied on top of a fine-tuned model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// PATCH on the undefended model.
    PatchBaseline,
    /// PATCH on the DP-SGD model.
    PatchDp,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::PatchBaseline, Preset::PatchDp];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::PatchBaseline => "patch-baseline",
            Preset::PatchDp => "patch-dp",
        }
    }

    pub fn source(self) -> Defense {
        match self {
            Preset::PatchBaseline => Defense::None,
            Preset::PatchDp => Defense::Dp,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One point of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: AblationMode,
    pub percentile: f64,
}

impl Cell {
    /// {zero, mean} x {95, 99}.
    pub fn grid() -> Vec<Cell> {
        [AblationMode::Zero, AblationMode::Mean]
            .into_iter()
            .flat_map(|mode| PERCENTILES.into_iter().map(move |percentile| Cell { mode, percentile }))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.mode, self.percentile)
    }
}

/// Vocabulary, both gazetteer partitions and both corpora.
#[derive(Clone, Debug)]
pub struct CorpusBundle {
    pub vocab: Vocab,
    pub private_gazetteer: Gazetteer,
    pub public_gazetteer: Gazetteer,
    pub private: CorpusSplits,
    pub public: CorpusSplits,
}

const SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

fn split_of(splits: &CorpusSplits, s: Split) -> &Corpus {
    match s {
        Split::Train => &splits.train,
        Split::Validation => &splits.validation,
        Split::Test => &splits.test,
    }
}

impl CorpusBundle {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let vocab = Vocab::builtin();
        let templates = TemplateSet::builtin();
        let private_gazetteer = Gazetteer::builtin_private();
        let public_gazetteer = Gazetteer::builtin_public();
        let c = &cfg.corpus;
        let private = generate_private_corpus(
            cfg.seed_for("corpus/private"),
            &c.generation(c.private_docs, c.n_profiles),
            &private_gazetteer,
            &templates,
            &vocab,
        )?;
        let public = generate_public_corpus(
            cfg.seed_for("corpus/public"),
            &c.generation(c.public_docs, None),
            &public_gazetteer,
            &private_gazetteer,
            &templates,
            &vocab,
        )?;
        Ok(Self { vocab, private_gazetteer, public_gazetteer, private, public })
    }

    /// Writes every file into `dir` and returns their names in write order.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut names = vec!["vocab.json".to_string(), "gazetteer-private.json".into(), "gazetteer-public.json".into()];
        self.vocab.save(&dir.join(&names[0]))?;
        self.private_gazetteer.save(&dir.join(&names[1]))?;
        self.public_gazetteer.save(&dir.join(&names[2]))?;
        for (prefix, splits) in [("private", &self.private), ("public", &self.public)] {
            for s in SPLITS {
                let name = format!("{prefix}-{s}.jsonl");
                split_of(splits, s).save(&dir.join(&name), &self.vocab)?;
                names.push(name);
            }
        }
        Ok(names)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::load(&dir.join("vocab.json"))?;
        let private_gazetteer = Gazetteer::load(&dir.join("gazetteer-private.json"))?;
        let public_gazetteer = Gazetteer::load(&dir.join("gazetteer-public.json"))?;
        let load = |prefix: &str| -> Result<CorpusSplits> {
            let get = |s: Split| Corpus::load(&dir.join(format!("{prefix}-{s}.jsonl")), &vocab);
            Ok(CorpusSplits { train: get(Split::Train)?, validation: get(Split::Validation)?, test: get(Split::Test)? })
        };
        let private = load("private")?;
        let public = load("public")?;
        Ok(Self { vocab, private_gazetteer, public_gazetteer, private, public })
    }

    /// Matches values of either gazetteer partition.
    pub fn matcher(&self) -> Result<PiiMatcher> {
        Ok(PiiMatcher::new(&self.private_gazetteer.union(&self.public_gazetteer)?, &self.vocab))
    }

    pub fn train_values(&self) -> BTreeSet<PiiValue> {
        self.private.train.pii_values()
    }
}

fn sequences(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Vec<Vec<usize>> {
    corpus
        .sequences(vocab)
        .into_iter()
        .map(|mut s| {
            s.truncate(max_len);
            s
        })
        .collect()
}

/// Fresh model trained on the public corpus.
pub fn pretrain(cfg: &ExperimentConfig, bundle: &CorpusBundle) -> Result<TrainOutcome> {
    let mc = cfg.model.config(bundle.vocab.len(), cfg.seed_for("model/init"));
    let model = Model::init(&mc)?;
    let max = mc.max_seq_len;
    let train = sequences(&bundle.public.train, &bundle.vocab, max);
    let eval = sequences(&bundle.public.validation, &bundle.vocab, max);
    let tc = cfg.pretrain.config(max, cfg.seed_for("train/pretrain"));
    tracing::info!(docs = train.len(), epochs = tc.epochs, "pretraining");
    Ok(training::train(&model, &train, &tc, (!eval.is_empty()).then_some(eval.as_slice()))?)
}

/// `base` fine-tuned on the private training split under `defense`.
pub fn finetune(cfg: &ExperimentConfig, base: &Model, bundle: &CorpusBundle, defense: Defense) -> Result<TrainOutcome> {
    let max = base.config().max_seq_len;
    let corpus = match defense {
        Defense::Scrub => scrub(&bundle.private.train, bundle.vocab.mask(), Some(&cfg.scrub_types)),
        Defense::None | Defense::Dp => bundle.private.train.clone(),
    };
    let train = sequences(&corpus, &bundle.vocab, max);
    let eval = sequences(&bundle.private.validation, &bundle.vocab, max);
    let eval = (!eval.is_empty()).then_some(eval.as_slice());
    let tc = cfg.finetune.config(max, cfg.seed_for(&format!("train/{defense}")));
    tracing::info!(%defense, docs = train.len(), epochs = tc.epochs, "fine-tuning");
    Ok(match defense {
        Defense::Dp => training::dp_train(base, &train, &tc, &cfg.dp, eval)?,
        Defense::None | Defense::Scrub => training::train(base, &train, &tc, eval)?,
    })
}

/// Perplexity on the private test split.
pub fn test_perplexity(model: &Model, patch: Option<&EdgePatch>, bundle: &CorpusBundle) -> Result<f64> {
    let seqs = sequences(&bundle.private.test, &bundle.vocab, model.config().max_seq_len);
    Ok(training::perplexity_patched(model, patch, &seqs)?)
}

/// Base-model PII excluded from every leakage count.
pub fn exclusions(cfg: &ExperimentConfig, base: &Model, bundle: &CorpusBundle) -> Result<BTreeSet<PiiValue>> {
    tracing::info!("sampling the reference distribution");
    Ok(attack::build_exclusion_set(base, &cfg.attack_config(), &bundle.vocab, &bundle.matcher()?)?)
}

pub fn save_exclusions(path: &Path, values: &BTreeSet<PiiValue>) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(values)? + "\n")?;
    Ok(())
}

pub fn load_exclusions(path: &Path) -> Result<BTreeSet<PiiValue>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Every repetition of the attack against `model` (with `patch` active),
/// scored into a report. Transcripts go to `dir` when given.
#[allow(clippy::too_many_arguments)]
pub fn run_attack(
    cfg: &ExperimentConfig,
    model: &Model,
    patch: Option<&EdgePatch>,
    bundle: &CorpusBundle,
    exclusions: &BTreeSet<PiiValue>,
    defense: &str,
    variant: &str,
    perplexity: Option<f64>,
    dir: Option<&Path>,
) -> Result<LeakageReport> {
    let ac = cfg.attack_config();
    let matcher = bundle.matcher()?;
    let mut reps = Vec::with_capacity(ac.repetitions);
    for r in 0..ac.repetitions {
        tracing::info!(defense, variant, repetition = r, "attacking");
        let ts = attack::sample_transcripts(model, patch, &ac, &bundle.vocab, r)?;
        if let Some(d) = dir {
            std::fs::create_dir_all(d)?;
            attack::save_transcripts(&d.join(format!("transcripts-{r}.jsonl")), &ts, r, &bundle.vocab)?;
        }
        reps.push(ts);
    }
    let results = attack::evaluate_leakage(&reps, &bundle.train_values(), exclusions, &matcher);
    let report = LeakageReport::new(defense, variant, perplexity, &ac, results);
    if let Some(d) = dir {
        report.save(&d.join("report.json"))?;
    }
    Ok(report)
}

/// Faithfulness of one type's selected edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRow {
    pub preset: Preset,
    pub pii_type: PiiType,
    pub percentile: f64,
    pub edges: usize,
    /// `None` when the model does not separate clean from corrupt prompts.
    pub faithfulness: Option<f64>,
}

pub fn faithfulness_csv(rows: &[FaithfulnessRow]) -> String {
    let mut out = String::from("preset,pii_type,percentile,edges,faithfulness\n");
    for r in rows {
        let f = r.faithfulness.map_or_else(|| "n/a".to_string(), |v| format!("{v}"));
        out.push_str(&format!("{},{},{},{},{}\n", r.preset, r.pii_type, r.percentile, r.edges, f));
    }
    out
}

/// One patched model of the sweep, with what is needed to rebuild it alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub preset: Preset,
    pub mode: AblationMode,
    pub percentile: f64,
    pub checkpoint: PathBuf,
    pub dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub manifest_sha256: String,
    pub empty_intersection: bool,
    pub report: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub name: String,
    pub path: PathBuf,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub corpus_files: Vec<String>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub exclusions: PathBuf,
    pub baselines: Vec<PathBuf>,
    pub cells: Vec<SweepCell>,
}

impl SweepManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != SWEEP_FORMAT || m.version != FORMAT_VERSION {
            return Err(ExperimentError::Format(format!("unsupported sweep manifest {} v{}", m.format, m.version)));
        }
        Ok(m)
    }

    pub fn cells_for(&self, preset: Preset) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(move |c| c.preset == preset)
    }
}

/// What a full run produced, for in-process inspection.
pub struct RunOutcome {
    pub reports: Vec<LeakageReport>,
    pub faithfulness: Vec<FaithfulnessRow>,
    /// Cross-type overlaps at the configured percentile, per preset.
    pub overlaps: BTreeMap<Preset, Vec<OverlapRow>>,
    pub circuits: BTreeMap<Preset, Vec<Circuit>>,
    pub manifest: SweepManifest,
}

impl RunOutcome {
    pub fn report(&self, defense: &str, variant: &str) -> Option<&LeakageReport> {
        self.reports.iter().find(|r| r.defense == defense && r.variant == variant)
    }
}

pub fn save_checkpoint(cfg: &ExperimentConfig, name: &str, outcome: &TrainOutcome) -> Result<CheckpointRecord> {
    std::fs::create_dir_all(&cfg.paths.checkpoints)?;
    let path = cfg.paths.checkpoints.join(format!("{name}.ckpt"));
    outcome.model.save(&path)?;
    std::fs::write(cfg.paths.checkpoints.join(format!("curve-{name}.csv")), training::curve_csv(&outcome.curve))?;
    Ok(CheckpointRecord { name: name.into(), path, fingerprint: outcome.model.fingerprint() })
}

/// The whole experiment: corpus, base model, the three fine-tuned models,
/// their attacks, and every `cells` x `presets` patched model with its
/// attack. All artifacts land under `cfg.paths`; the sweep manifest is
/// `sweep.json` in the output directory.
pub fn run(cfg: &ExperimentConfig, cells: &[Cell], presets: &[Preset]) -> Result<RunOutcome> {
    cfg.validate()?;
    for (i, c) in cells.iter().enumerate() {
        check_percentile(&format!("cells[{i}].percentile"), c.percentile)?;
    }
    let out = &cfg.paths.output;
    std::fs::create_dir_all(out)?;
    let bundle = CorpusBundle::generate(cfg)?;
    let corpus_files = bundle.save(&cfg.paths.corpus)?;

    let base = pretrain(cfg, &bundle)?;
    let mut checkpoints = vec![save_checkpoint(cfg, "base", &base)?];
    let excl = exclusions(cfg, &base.model, &bundle)?;
    let excl_path = out.join("exclusions.json");
    save_exclusions(&excl_path, &excl)?;

    let mut models = BTreeMap::new();
    let mut reports = Vec::new();
    let mut baselines = Vec::new();
    let mut ppl = BTreeMap::new();
    for defense in Defense::ALL {
        let tuned = finetune(cfg, &base.model, &bundle, defense)?;
        checkpoints.push(save_checkpoint(cfg, defense.as_str(), &tuned)?);
        let p = test_perplexity(&tuned.model, None, &bundle)?;
        let dir = out.join("attack").join(defense.as_str());
        reports.push(run_attack(cfg, &tuned.model, None, &bundle, &excl, defense.as_str(), "-", Some(p), Some(&dir))?);
        baselines.push(dir.join("report.json"));
        ppl.insert(defense, p);
        models.insert(defense, tuned.model);
    }

    let mut faithfulness = Vec::new();
    let mut overlaps = BTreeMap::new();
    let mut all_circuits = BTreeMap::new();
    let mut sweep_cells = Vec::new();
    for &preset in presets {
        let model = &models[&preset.source()];
        let checkpoint = checkpoints.iter().find(|c| c.name == preset.source().as_str()).expect("saved above").path.clone();
        let base_cfg = cfg.pipeline_config(cfg.default_cell());
        let (pairs, circuits) = patching::discover_circuits(model, &bundle.private.train, &bundle.private_gazetteer, &bundle.vocab, &base_cfg)?;
        let pdir = out.join(preset.as_str());
        std::fs::create_dir_all(&pdir)?;

        let selections = circuits
            .iter()
            .map(|c| circuits::select_top(c, cfg.patch.percentile, cfg.patch.ranking))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for sel in &selections {
            let f = match circuits::faithfulness(model, &sel.edges, &pairs[&sel.pii_type]) {
                Ok(v) => Some(v),
                Err(CircuitsError::DegenerateFaithfulness { .. }) => {
                    tracing::warn!(%preset, pii_type = %sel.pii_type, "model does not separate clean from corrupt prompts");
                    None
                }
                Err(e) => return Err(e.into()),
            };
            faithfulness.push(FaithfulnessRow {
                preset,
                pii_type: sel.pii_type,
                percentile: cfg.patch.percentile,
                edges: sel.edges.len(),
                faithfulness: f,
            });
        }
        let rows = circuits::overlap_matrix(&selections)?;
        std::fs::write(pdir.join("overlap.csv"), circuits::overlap_csv(&rows))?;
        overlaps.insert(preset, rows);
        let heat = report::head_heatmap(&circuits, cfg.model.n_layers, cfg.model.n_heads)?;
        std::fs::write(pdir.join("heatmap.csv"), report::heatmap_csv(&heat))?;

        for &cell in cells {
            let pc = cfg.pipeline_config(cell);
            let cdir = pdir.join(cell.label());
            let o = patching::patch_with_circuits(model, &bundle.private.train, &bundle.vocab, &pc, pairs.clone(), circuits.clone(), &cdir)?;
            let patch = (!o.patched.is_identity()).then(|| o.patched.patch());
            let p = test_perplexity(model, patch, &bundle)?;
            let report = run_attack(cfg, model, patch, &bundle, &excl, preset.as_str(), &cell.label(), Some(p), Some(&cdir))?;
            tracing::info!(
                %preset,
                cell = %cell.label(),
                shared = o.shared.edges.len(),
                perplexity = p,
                recall = report.recall_mean(),
                "cell done"
            );
            reports.push(report);
            let manifest_bytes = std::fs::read(cdir.join("manifest.json"))?;
            sweep_cells.push(SweepCell {
                preset,
                mode: cell.mode,
                percentile: cell.percentile,
                checkpoint: checkpoint.clone(),
                dir: cdir.clone(),
                pipeline: pc,
                manifest_sha256: sha256_hex(&manifest_bytes),
                empty_intersection: o.manifest.empty_intersection,
                report: cdir.join("report.json"),
            });
        }
        all_circuits.insert(preset, circuits);
    }

    std::fs::write(out.join("faithfulness.csv"), faithfulness_csv(&faithfulness))?;
    std::fs::write(out.join("summary.csv"), report::summary_csv(&reports))?;
    std::fs::write(out.join("tradeoff.md"), report::tradeoff_table(&reports)?)?;
    let manifest = SweepManifest {
        format: SWEEP_FORMAT.into(),
        version: FORMAT_VERSION,
        config: cfg.clone(),
        corpus_files,
        checkpoints,
        exclusions: excl_path,
        baselines,
        cells: sweep_cells,
    };
    manifest.save(&out.join("sweep.json"))?;
    Ok(RunOutcome { reports, faithfulness, overlaps, circuits: all_circuits, manifest })
}

#[cfg(test)]
mod tests;
