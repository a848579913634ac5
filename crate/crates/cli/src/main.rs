//! `patchlab` command-line driver. Every stage reads and writes plain files
//! under the configured corpus, checkpoint and output directories:
//!
//! ```text
//! <corpus>/                      vocab, gazetteers, corpus splits
//! <checkpoints>/{base,none,scrub,dp}.ckpt, curve-*.csv
//! <output>/exclusions.json
//! <output>/attack/<defense>/     perplexity.json, transcripts, report.json
//! <output>/<preset>/discovery/   pairs-<type>.json, circuit-<type>.json
//! <output>/<preset>/             overlap.csv, heatmap.csv, faithfulness.csv
//! <output>/<preset>/<cell>/      pipeline artifacts, perplexity.json, report.json
//! <output>/summary.csv, tradeoff.md, sweep.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use patchlab::circuits;
use patchlab::corpus::PiiType;
use patchlab::discovery::{Circuit, PromptPair};
use patchlab::experiment::{
    self, Cell, CorpusBundle, Defense, ExperimentConfig, FaithfulnessRow, Preset, SweepManifest,
};
use patchlab::model::Model;
use patchlab::patching::{self, AblationMode, PatchPlan, PatchedModel};
use patchlab::report;

#[derive(Parser)]
#[command(name = "patchlab", version, about = "Circuit discovery and edge patching against PII leakage")]
struct Cli {
    /// Log filter for stderr (e.g. `info`, `warn`, `patchlab=debug`).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the vocabulary, gazetteers and both corpora.
    GenCorpus(Common),
    /// Pretrain the base model on the public corpus and sample the exclusion set.
    Pretrain(Common),
    /// Fine-tune the base model on the private corpus under one defense.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        defense: DefenseArg,
    },
    /// Build prompt pairs and score every edge for each PII type.
    Discover {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "patch-baseline")]
        preset: PresetArg,
    },
    /// Threshold discovered circuits: overlaps, head heatmap, faithfulness.
    Circuits {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "patch-baseline")]
        preset: PresetArg,
    },
    /// Build the patched model for one (mode, percentile) cell.
    Patch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellArgs,
        /// Re-run a cell of a finished sweep, taking the config from its manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Test-split perplexity of a fine-tuned or patched model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Run the extraction attack against a fine-tuned or patched model.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Collect every attack report into summary.csv and tradeoff.md.
    Report(Common),
    /// Full experiment over the {zero, mean} x {95, 99} grid for both presets.
    Sweep(Common),
}

/// Configuration source and field overrides shared by every command.
#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config file (JSON). Defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override any config field by its dotted path, e.g. `--set attack.n_queries=200`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct CellArgs {
    #[arg(long, value_enum, default_value = "patch-baseline")]
    preset: PresetArg,
    /// Ablation mode; defaults to `patch.mode` of the config.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Edge percentile (95 or 99); defaults to `patch.percentile` of the config.
    #[arg(long)]
    percentile: Option<f64>,
}

#[derive(Args, Clone)]
struct Target {
    /// An unpatched fine-tuned model.
    #[arg(long, value_enum, conflicts_with_all = ["preset", "mode", "percentile"], required_unless_present = "preset")]
    defense: Option<DefenseArg>,
    /// A patched model built by `patch`.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, value_enum, requires = "preset")]
    mode: Option<ModeArg>,
    #[arg(long, requires = "preset")]
    percentile: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefenseArg {
    None,
    Scrub,
    Dp,
}

impl From<DefenseArg> for Defense {
    fn from(d: DefenseArg) -> Self {
        match d {
            DefenseArg::None => Defense::None,
            DefenseArg::Scrub => Defense::Scrub,
            DefenseArg::Dp => Defense::Dp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    PatchBaseline,
    PatchDp,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::PatchBaseline => Preset::PatchBaseline,
            PresetArg::PatchDp => Preset::PatchDp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Zero,
    Mean,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Zero => AblationMode::Zero,
            ModeArg::Mean => AblationMode::Mean,
        }
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = node.as_object_mut().with_context(|| format!("invalid config: {}: not an object", keys[..i].join(".")))?;
        let slot = obj.get_mut(*key).with_context(|| format!("invalid config: {path}: unknown field"))?;
        if i + 1 == keys.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one key")
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => read_config(p)?,
            None => ExperimentConfig::default(),
        };
        self.apply(base)
    }

    fn apply(&self, cfg: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut v = serde_json::to_value(&cfg)?;
        if let Some(s) = self.seed {
            v["seed"] = s.into();
        }
        for (field, dir) in [("corpus", &self.corpus_dir), ("checkpoints", &self.checkpoint_dir), ("output", &self.output_dir)] {
            if let Some(d) = dir {
                v["paths"][field] = Value::String(d.display().to_string());
            }
        }
        for o in &self.overrides {
            let (path, raw) = o.split_once('=').with_context(|| format!("--set expects FIELD=VALUE, got {o:?}"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path.trim(), value)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loads without validating, so overrides can still repair a field.
fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn cell_of(cfg: &ExperimentConfig, mode: Option<ModeArg>, percentile: Option<f64>) -> Result<Cell> {
    let mut cell = cfg.default_cell();
    if let Some(m) = mode {
        cell.mode = m.into();
    }
    if let Some(p) = percentile {
        if !experiment::PERCENTILES.contains(&p) {
            bail!("invalid config: percentile: must be one of {:?}, got {p}", experiment::PERCENTILES);
        }
        cell.percentile = p;
    }
    Ok(cell)
}

fn checkpoint(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.paths.checkpoints.join(format!("{name}.ckpt"))
}

fn load_model(cfg: &ExperimentConfig, name: &str) -> Result<Model> {
    let path = checkpoint(cfg, name);
    Model::load(&path).with_context(|| format!("loading {} (run the stage that writes it first)", path.display()))
}

fn load_bundle(cfg: &ExperimentConfig) -> Result<CorpusBundle> {
    CorpusBundle::load(&cfg.paths.corpus)
        .with_context(|| format!("loading the corpus from {} (run gen-corpus first)", cfg.paths.corpus.display()))
}

fn preset_dir(cfg: &ExperimentConfig, preset: Preset) -> PathBuf {
    cfg.paths.output.join(preset.as_str())
}

fn discovery_dir(cfg: &ExperimentConfig, preset: Preset) -> PathBuf {
    preset_dir(cfg, preset).join("discovery")
}

fn cell_dir(cfg: &ExperimentConfig, preset: Preset, cell: Cell) -> PathBuf {
    preset_dir(cfg, preset).join(cell.label())
}

type Discovered = (BTreeMap<PiiType, Vec<PromptPair>>, Vec<Circuit>);

fn save_discovered(dir: &Path, (pairs, circuits): &Discovered) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in circuits {
        let t = c.pii_type;
        std::fs::write(dir.join(format!("pairs-{t}.json")), serde_json::to_string(&pairs[&t])? + "\n")?;
        c.save(&dir.join(format!("circuit-{t}.json")))?;
    }
    Ok(())
}

fn load_discovered(cfg: &ExperimentConfig, preset: Preset) -> Result<Discovered> {
    let dir = discovery_dir(cfg, preset);
    let mut pairs = BTreeMap::new();
    let mut circuits = Vec::new();
    for &t in &cfg.discovery.pii_types {
        let p = dir.join(format!("pairs-{t}.json"));
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {} (run discover first)", p.display()))?;
        pairs.insert(t, serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?);
        circuits.push(Circuit::load(&dir.join(format!("circuit-{t}.json")))?);
    }
    Ok((pairs, circuits))
}

fn discover(cfg: &ExperimentConfig, preset: Preset) -> Result<Discovered> {
    let bundle = load_bundle(cfg)?;
    let model = load_model(cfg, preset.source().as_str())?;
    let pc = cfg.pipeline_config(cfg.default_cell());
    let found = patching::discover_circuits(&model, &bundle.private.train, &bundle.private_gazetteer, &bundle.vocab, &pc)?;
    save_discovered(&discovery_dir(cfg, preset), &found)?;
    Ok(found)
}

#[derive(Serialize, Deserialize)]
struct PerplexityRecord {
    format: String,
    version: u32,
    defense: String,
    variant: String,
    perplexity: f64,
}

const PERPLEXITY_FORMAT: &str = "patchlab-perplexity";

/// Model, optional patch, report labels and artifact directory of a target.
struct Resolved {
    model: Model,
    patched: Option<PatchedModel>,
    defense: String,
    variant: String,
    dir: PathBuf,
}

impl Resolved {
    fn patch(&self) -> Option<&patchlab::model::EdgePatch> {
        self.patched.as_ref().filter(|p| !p.is_identity()).map(|p| p.patch())
    }
}

fn resolve(cfg: &ExperimentConfig, t: &Target) -> Result<Resolved> {
    if let Some(d) = t.defense {
        let d: Defense = d.into();
        return Ok(Resolved {
            model: load_model(cfg, d.as_str())?,
            patched: None,
            defense: d.as_str().into(),
            variant: "-".into(),
            dir: cfg.paths.output.join("attack").join(d.as_str()),
        });
    }
    let preset: Preset = t.preset.expect("clap requires --defense or --preset").into();
    let cell = cell_of(cfg, t.mode, t.percentile)?;
    let dir = cell_dir(cfg, preset, cell);
    let model = load_model(cfg, preset.source().as_str())?;
    let plan_path = dir.join("plan.json");
    let plan = PatchPlan::load(&plan_path).with_context(|| format!("loading {} (run patch first)", plan_path.display()))?;
    let patched = patching::apply_patch(&model, &plan)?;
    Ok(Resolved { model, patched: Some(patched), defense: preset.as_str().into(), variant: cell.label(), dir })
}

fn write_reports(cfg: &ExperimentConfig) -> Result<String> {
    let mut dirs: Vec<PathBuf> = Defense::ALL.iter().map(|d| cfg.paths.output.join("attack").join(d.as_str())).collect();
    for preset in Preset::ALL {
        for cell in Cell::grid() {
            dirs.push(cell_dir(cfg, preset, cell));
        }
    }
    let mut reports = Vec::new();
    for d in dirs {
        let p = d.join("report.json");
        if p.exists() {
            reports.push(patchlab::attack::LeakageReport::load(&p)?);
        }
    }
    if reports.is_empty() {
        bail!("no attack reports under {} (run attack first)", cfg.paths.output.display());
    }
    let table = report::tradeoff_table(&reports)?;
    std::fs::write(cfg.paths.output.join("summary.csv"), report::summary_csv(&reports))?;
    std::fs::write(cfg.paths.output.join("tradeoff.md"), &table)?;
    Ok(table)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let cfg = c.load()?;
            let files = CorpusBundle::generate(&cfg)?.save(&cfg.paths.corpus)?;
            for f in files {
                println!("{}", cfg.paths.corpus.join(f).display());
            }
        }
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            let bundle = load_bundle(&cfg)?;
            let base = experiment::pretrain(&cfg, &bundle)?;
            let rec = experiment::save_checkpoint(&cfg, "base", &base)?;
            let excl = experiment::exclusions(&cfg, &base.model, &bundle)?;
            std::fs::create_dir_all(&cfg.paths.output)?;
            experiment::save_exclusions(&cfg.paths.output.join("exclusions.json"), &excl)?;
            println!("{} {}", rec.path.display(), rec.fingerprint);
        }
        Command::Finetune { common, defense } => {
            let cfg = common.load()?;
            let defense: Defense = defense.into();
            let bundle = load_bundle(&cfg)?;
            let base = load_model(&cfg, "base")?;
            let tuned = experiment::finetune(&cfg, &base, &bundle, defense)?;
            let rec = experiment::save_checkpoint(&cfg, defense.as_str(), &tuned)?;
            println!("{} {}", rec.path.display(), rec.fingerprint);
        }
        Command::Discover { common, preset } => {
            let cfg = common.load()?;
            let preset = preset.into();
            let (pairs, circuits) = discover(&cfg, preset)?;
            for c in &circuits {
                println!("{} {} pairs, {} edges scored", c.pii_type, pairs[&c.pii_type].len(), c.len());
            }
        }
        Command::Circuits { common, preset } => {
            let cfg = common.load()?;
            let preset: Preset = preset.into();
            let (pairs, circuits) = load_discovered(&cfg, preset)?;
            let model = load_model(&cfg, preset.source().as_str())?;
            let selections = circuits
                .iter()
                .map(|c| circuits::select_top(c, cfg.patch.percentile, cfg.patch.ranking))
                .collect::<Result<Vec<_>, _>>()?;
            let mut rows = Vec::new();
            for sel in &selections {
                let f = match circuits::faithfulness(&model, &sel.edges, &pairs[&sel.pii_type]) {
                    Ok(v) => Some(v),
                    Err(circuits::CircuitsError::DegenerateFaithfulness { .. }) => None,
                    Err(e) => return Err(e.into()),
                };
                rows.push(FaithfulnessRow {
                    preset,
                    pii_type: sel.pii_type,
                    percentile: cfg.patch.percentile,
                    edges: sel.edges.len(),
                    faithfulness: f,
                });
            }
            let dir = preset_dir(&cfg, preset);
            std::fs::create_dir_all(&dir)?;
            let overlap = circuits::overlap_csv(&circuits::overlap_matrix(&selections)?);
            let heat = report::head_heatmap(&circuits, cfg.model.n_layers, cfg.model.n_heads)?;
            std::fs::write(dir.join("overlap.csv"), &overlap)?;
            std::fs::write(dir.join("heatmap.csv"), report::heatmap_csv(&heat))?;
            let faith = experiment::faithfulness_csv(&rows);
            std::fs::write(dir.join("faithfulness.csv"), &faith)?;
            print!("{overlap}\n{faith}");
        }
        Command::Patch { common, cell, manifest } => {
            let cfg = match &manifest {
                Some(m) => common.apply(SweepManifest::load(m)?.config)?,
                None => common.load()?,
            };
            let preset: Preset = cell.preset.into();
            let cell = cell_of(&cfg, cell.mode, cell.percentile)?;
            let (pairs, circuits) = match load_discovered(&cfg, preset) {
                Ok(found) => found,
                Err(_) => discover(&cfg, preset)?,
            };
            let bundle = load_bundle(&cfg)?;
            let model = load_model(&cfg, preset.source().as_str())?;
            let dir = cell_dir(&cfg, preset, cell);
            let out = patching::patch_with_circuits(
                &model,
                &bundle.private.train,
                &bundle.vocab,
                &cfg.pipeline_config(cell),
                pairs,
                circuits,
                &dir,
            )?;
            let sha = patching::sha256_hex(&std::fs::read(dir.join("manifest.json"))?);
            println!("{} {} shared edges, manifest {sha}", dir.display(), out.shared.edges.len());
        }
        Command::Evaluate { common, target } => {
            let cfg = common.load()?;
            let bundle = load_bundle(&cfg)?;
            let t = resolve(&cfg, &target)?;
            let ppl = experiment::test_perplexity(&t.model, t.patch(), &bundle)?;
            let rec = PerplexityRecord {
                format: PERPLEXITY_FORMAT.into(),
                version: 1,
                defense: t.defense.clone(),
                variant: t.variant.clone(),
                perplexity: ppl,
            };
            std::fs::create_dir_all(&t.dir)?;
            std::fs::write(t.dir.join("perplexity.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
            println!("{} {} perplexity {ppl:.4}", t.defense, t.variant);
        }
        Command::Attack { common, target } => {
            let cfg = common.load()?;
            let bundle = load_bundle(&cfg)?;
            let t = resolve(&cfg, &target)?;
            let excl_path = cfg.paths.output.join("exclusions.json");
            let excl = experiment::load_exclusions(&excl_path)
                .with_context(|| format!("loading {} (run pretrain first)", excl_path.display()))?;
            let ppl_path = t.dir.join("perplexity.json");
            let ppl = match std::fs::read_to_string(&ppl_path) {
                Ok(text) => Some(serde_json::from_str::<PerplexityRecord>(&text)?.perplexity),
                Err(_) => None,
            };
            let r = experiment::run_attack(&cfg, &t.model, t.patch(), &bundle, &excl, &t.defense, &t.variant, ppl, Some(&t.dir))?;
            println!("{}", r.csv_row());
        }
        Command::Report(c) => {
            let cfg = c.load()?;
            print!("{}", write_reports(&cfg)?);
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            let out = experiment::run(&cfg, &Cell::grid(), &Preset::ALL)?;
            for preset in Preset::ALL {
                println!("{preset}: {} cells", out.manifest.cells_for(preset).count());
            }
            print!("{}", report::tradeoff_table(&out.reports)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = match tracing_subscriber::EnvFilter::try_new(&cli.log) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: invalid --log filter {:?}: {e}", cli.log);
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
