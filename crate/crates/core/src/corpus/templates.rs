use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{Annotation, Corpus, CorpusError, CorpusSplits, Document, Gazetteer, PiiType, Result, Split, Vocab};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Word(String),
    Slot(PiiType),
}

/// One sentence with typed PII slots, written as space-separated tokens
/// with slots in braces: `The applicant lives in {location} .`
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template(pub Vec<Piece>);

impl FromStr for Template {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        let pieces = s
            .split_whitespace()
            .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                Some(slot) => slot.parse().map(Piece::Slot).map_err(|_| CorpusError::UnknownSlot(slot.to_string())),
                None => Ok(Piece::Word(w.to_string())),
            })
            .collect::<Result<Vec<_>>>()?;
        if pieces.is_empty() {
            return Err(CorpusError::Template("empty template".into()));
        }
        Ok(Template(pieces))
    }
}

impl Template {
    pub fn slots(&self) -> impl Iterator<Item = PiiType> + '_ {
        self.0.iter().filter_map(|p| match p {
            Piece::Slot(t) => Some(*t),
            Piece::Word(_) => None,
        })
    }
}

/// Sentence pools a document is assembled from: one opener naming the
/// applicant, one location and one race sentence in random order, then
/// optional filler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub id: String,
    pub openers: Vec<Template>,
    pub location: Vec<Template>,
    pub race: Vec<Template>,
    pub filler: Vec<Template>,
}

const OPENERS: &[&str] = &[
    "The case originated in an application lodged by {name} against the State .",
    "The applicant , {name} , complained about the length of the proceedings .",
    "Mr. {name} v. The State concerns the conditions of detention .",
    "The application was lodged with the Court by {name} .",
    "The applicant , {name} , alleged a violation of the Convention .",
    "In the case of {name} v. The State , the Court delivered its judgment .",
];

const LOCATION: &[&str] = &[
    "The applicant was arrested in {location} .",
    "The applicant lives in {location} .",
    "The hearing took place before the regional court in {location} .",
    "The police searched the flat in {location} without a warrant .",
    "The applicant was detained in the prison in {location} for two years .",
    "The applicant was born in {location} and moved abroad later .",
];

const RACE: &[&str] = &[
    "This case concerns a {race} national .",
    "The applicant is of {race} origin .",
    "The applicant alleged discrimination as a {race} citizen .",
    "The authorities described the applicant as {race} .",
    "The applicant , who is {race} , was refused a residence permit .",
];

const FILLER: &[&str] = &[
    "The Government contested that argument .",
    "The domestic courts dismissed the appeal .",
    "The Court reiterates that the burden of proof lies with the State .",
    "The applicant was represented by a lawyer .",
    "The proceedings lasted for several years .",
    "The Chamber declared the application admissible .",
];

fn parse_all(lines: &[&str]) -> Result<Vec<Template>> {
    lines.iter().map(|l| l.parse()).collect()
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::parse("legal-v1", OPENERS, LOCATION, RACE, FILLER).expect("builtin templates parse")
    }

    pub fn parse(id: &str, openers: &[&str], location: &[&str], race: &[&str], filler: &[&str]) -> Result<Self> {
        let set = Self {
            id: id.to_string(),
            openers: parse_all(openers)?,
            location: parse_all(location)?,
            race: parse_all(race)?,
            filler: parse_all(filler)?,
        };
        let pools = [
            ("openers", &set.openers, Some(PiiType::Name)),
            ("location", &set.location, Some(PiiType::Location)),
            ("race", &set.race, Some(PiiType::Race)),
            ("filler", &set.filler, None),
        ];
        for (pool, templates, want) in pools {
            if templates.is_empty() && want.is_some() {
                return Err(CorpusError::Template(format!("{pool} pool is empty")));
            }
            for t in templates.iter() {
                let slots: Vec<PiiType> = t.slots().collect();
                if slots != want.into_iter().collect::<Vec<_>>() {
                    return Err(CorpusError::Template(format!("{pool} templates must have exactly the slots {want:?}")));
                }
            }
        }
        Ok(set)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        [&self.openers, &self.location, &self.race, &self.filler].into_iter().flatten().flat_map(|t| {
            t.0.iter().filter_map(|p| match p {
                Piece::Word(w) => Some(w.as_str()),
                Piece::Slot(_) => None,
            })
        })
    }
}

/// Knobs of the document generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n_docs: usize,
    /// Exponent of the Zipf law over applicant profiles.
    pub zipf_exponent: f64,
    /// Number of distinct applicant profiles; defaults to every name value.
    pub n_profiles: Option<usize>,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    /// Probability of appending one filler sentence.
    pub filler_prob: f64,
}

impl GenerationConfig {
    pub fn new(n_docs: usize) -> Self {
        Self { n_docs, zipf_exponent: 1.0, n_profiles: None, validation_fraction: 0.1, test_fraction: 0.1, filler_prob: 0.5 }
    }
}

/// An applicant: one value of each type, fixed across all their documents.
#[derive(Clone, Debug)]
struct Profile {
    name: String,
    location: String,
    race: String,
}

fn profiles(gaz: &Gazetteer, n: Option<usize>, rng: &mut ChaCha8Rng) -> Result<Vec<Profile>> {
    let pick = |t: PiiType| -> Result<&[String]> {
        let v = gaz.values(t);
        if v.is_empty() {
            return Err(CorpusError::UnknownSlot(t.to_string()));
        }
        Ok(v)
    };
    let (names, locs, races) = (pick(PiiType::Name)?, pick(PiiType::Location)?, pick(PiiType::Race)?);
    let n = n.unwrap_or(names.len()).min(names.len());
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.shuffle(rng);
    let mut loc_order: Vec<usize> = (0..locs.len()).collect();
    loc_order.shuffle(rng);
    let mut race_order: Vec<usize> = (0..races.len()).collect();
    race_order.shuffle(rng);
    Ok((0..n)
        .map(|i| Profile {
            name: names[order[i]].clone(),
            location: locs[loc_order[i % locs.len()]].clone(),
            race: races[race_order[i % races.len()]].clone(),
        })
        .collect())
}

fn render(
    template: &Template,
    profile: &Profile,
    vocab: &Vocab,
    tokens: &mut Vec<usize>,
    annotations: &mut Vec<Annotation>,
) -> Result<()> {
    for piece in &template.0 {
        match piece {
            Piece::Word(w) => tokens.push(vocab.id(w).ok_or_else(|| CorpusError::UnknownToken(w.clone()))?),
            Piece::Slot(t) => {
                let value = match t {
                    PiiType::Name => &profile.name,
                    PiiType::Location => &profile.location,
                    PiiType::Race => &profile.race,
                };
                let start = tokens.len();
                tokens.extend(vocab.encode(value)?);
                annotations.push(Annotation { start, end: tokens.len(), pii_type: *t, value: value.clone() });
            }
        }
    }
    Ok(())
}

fn document(
    id: String,
    profile: &Profile,
    templates: &TemplateSet,
    cfg: &GenerationConfig,
    vocab: &Vocab,
    rng: &mut ChaCha8Rng,
) -> Result<Document> {
    let mut sentences = vec![templates.openers.choose(rng).expect("non-empty pool")];
    let mut body = [
        templates.location.choose(rng).expect("non-empty pool"),
        templates.race.choose(rng).expect("non-empty pool"),
    ];
    body.shuffle(rng);
    sentences.extend(body);
    if !templates.filler.is_empty() && rng.random_bool(cfg.filler_prob) {
        sentences.push(templates.filler.choose(rng).expect("non-empty pool"));
    }
    let mut tokens = Vec::new();
    let mut annotations = Vec::new();
    for s in sentences {
        render(s, profile, vocab, &mut tokens, &mut annotations)?;
    }
    Ok(Document { id, tokens, annotations })
}

fn generate(
    seed: u64,
    prefix: &str,
    cfg: &GenerationConfig,
    gaz: &Gazetteer,
    templates: &TemplateSet,
    vocab: &Vocab,
) -> Result<CorpusSplits> {
    if cfg.n_docs == 0 {
        return Err(CorpusError::Template("n_docs must be positive".into()));
    }
    let held_out = cfg.validation_fraction + cfg.test_fraction;
    if !(0.0..1.0).contains(&cfg.validation_fraction) || !(0.0..1.0).contains(&cfg.test_fraction) || held_out >= 1.0 {
        return Err(CorpusError::Template("split fractions must be in [0, 1) and sum below 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("{prefix}/profiles")));
    let profiles = profiles(gaz, cfg.n_profiles, &mut rng)?;
    let zipf = Zipf::new(profiles.len() as f64, cfg.zipf_exponent)
        .map_err(|e| CorpusError::Template(format!("zipf: {e}")))?;
    let docs = (0..cfg.n_docs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_indexed(seed, &format!("{prefix}/doc"), i as u64));
            let rank = zipf.sample(&mut rng) as usize - 1;
            document(format!("{prefix}-{i:05}"), &profiles[rank], templates, cfg, vocab, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(seed, &format!("{prefix}/split"))));
    let n_val = (cfg.n_docs as f64 * cfg.validation_fraction).round() as usize;
    let n_test = (cfg.n_docs as f64 * cfg.test_fraction).round() as usize;
    let n_train = cfg.n_docs - n_val - n_test;
    let mut slots: Vec<Option<Document>> = docs.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<Document> {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| slots[i].take().expect("each document assigned once")).collect()
    };
    let make = |split, documents| Corpus { split, seed, template_set: templates.id.clone(), documents };
    Ok(CorpusSplits {
        train: make(Split::Train, take(0..n_train)),
        validation: make(Split::Validation, take(n_train..n_train + n_val)),
        test: make(Split::Test, take(n_train + n_val..cfg.n_docs)),
    })
}

/// Synthetic PII-bearing case summaries, split into train/validation/test.
pub fn generate_private_corpus(
    seed: u64,
    cfg: &GenerationConfig,
    gazetteer: &Gazetteer,
    templates: &TemplateSet,
    vocab: &Vocab,
) -> Result<CorpusSplits> {
    generate(seed, "private", cfg, gazetteer, templates, vocab)
}

/// Same generator filled from a held-out partition; fails if any value is
/// shared with the private partition.
pub fn generate_public_corpus(
    seed: u64,
    cfg: &GenerationConfig,
    public: &Gazetteer,
    private: &Gazetteer,
    templates: &TemplateSet,
    vocab: &Vocab,
) -> Result<CorpusSplits> {
    if let Some((t, v)) = public.overlap(private).into_iter().next() {
        return Err(CorpusError::PartitionOverlap { pii_type: t, value: v });
    }
    generate(seed, "public", cfg, public, templates, vocab)
}
