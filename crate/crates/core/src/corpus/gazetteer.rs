use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, PiiType, Result};

pub const GAZETTEER_FORMAT: &str = "patchlab-gazetteer";
pub const GAZETTEER_VERSION: u32 = 1;

const FIRST_NAMES: &[&str] = &[
    "John", "Heidi", "Maria", "Pavel", "Elena", "Tomasz", "Ingrid", "Mehmet", "Ayse", "Dmitri", "Olga", "Lars",
    "Sofia", "Marek", "Agnes", "Bogdan", "Clara", "Dragan", "Edith", "Fatima", "Gregor", "Hanna", "Ivan", "Jelena",
    "Karim", "Lena", "Milos", "Nadia", "Oskar", "Petra", "Radu", "Sabine", "Tariq", "Ursula", "Viktor", "Wanda",
    "Yusuf", "Zofia", "Anton", "Beata", "Cyril", "Dorota", "Emil", "Freya", "Gustav", "Halina", "Igor", "Jana",
    "Kemal", "Lidia", "Matteo", "Nina", "Omar", "Paula", "Rainer", "Selma", "Teodor", "Vera", "Werner", "Ximena",
    "Yara", "Zoran", "Arben", "Bianca", "Costel", "Daria", "Enver", "Flora", "Goran", "Hilde", "Ilir", "Jonas",
    "Katya", "Luka", "Mirela", "Nikola", "Orhan", "Pilar", "Rasim", "Stefan", "Tamara", "Uwe", "Vesna", "Wojciech",
    "Xavier", "Yelena", "Zeynep", "Aurel", "Bruno", "Csilla",
];

const SURNAMES: &[&str] = &[
    "Smith", "Kowalski", "Novak", "Horvat", "Petrov", "Yilmaz", "Schmidt", "Popescu", "Ivanova", "Jensen",
    "Rossi", "Nagy", "Dimitrov", "Kaya", "Fischer", "Moreau", "Lindqvist", "Markovic", "Wagner", "Demir",
    "Kovacs", "Georgiou", "Hansen", "Bauer", "Celik", "Lambert", "Nowak", "Orlov", "Pavlovic", "Richter",
    "Sokolov", "Toth", "Varga", "Weber", "Zielinski", "Andersen", "Blazek", "Costa", "Dobrev", "Eriksen",
];

const PLACE_PREFIXES: &[&str] = &["Port", "Saint", "Upper", "Lower", "North", "South", "East", "West", "Old", "Fort"];

const PLACE_ROOTS: &[&str] = &[
    "Aldric", "Brackwater", "Corvale", "Dunmere", "Elstow", "Farrowby", "Glenhaven", "Harlow", "Ivybridge",
    "Jarrow", "Kelmsford", "Larkhill", "Marrowdale", "Nethercott", "Oakhurst", "Pellham", "Quarrington",
    "Ravensby", "Stonecliffe", "Thornbury", "Ulverton", "Valemouth", "Westerleigh", "Yarcombe", "Ashby",
    "Birchmoor", "Calder", "Dovecote", "Eastleigh", "Fenwick", "Greyhaven", "Holloway", "Ironbridge", "Kingsmere",
    "Lindenfeld", "Millbrook", "Norwood", "Orchardton", "Pinecrest", "Redmarsh", "Saltmoor", "Tidewell",
    "Underhill", "Vinestead", "Whitmore", "Ashcombe", "Brightwater", "Coldstream", "Deepdale", "Emberton",
    "Foxley", "Goldcrest", "Hartwell", "Kestrel", "Lowfield", "Mossbank", "Newbury", "Oxley", "Pemberton",
    "Ridgeway", "Silverdale", "Torbridge", "Umberleigh", "Wickham", "Amberley", "Blackmore", "Cresswell",
    "Draycott", "Elmstead", "Frampton", "Gorsedale", "Heathfield", "Kirkby", "Lyndhurst", "Merriton", "Northam",
    "Ottery", "Poolbrook", "Rushden", "Sandhurst", "Tarrant", "Wendover", "Alderley", "Bramhall", "Chalford",
    "Dunstan", "Everleigh", "Fairlie", "Gransden", "Hollins",
];

const NATIONALITIES: &[&str] = &[
    "Romanian", "Turkish", "Albanian", "Algerian", "Armenian", "Austrian", "Azerbaijani", "Belarusian", "Belgian",
    "Bosnian", "Brazilian", "Bulgarian", "Chechen", "Chilean", "Chinese", "Congolese", "Croatian", "Cuban",
    "Cypriot", "Czech", "Danish", "Dutch", "Egyptian", "Eritrean", "Estonian", "Ethiopian", "Finnish", "French",
    "Georgian", "German", "Ghanaian", "Greek", "Hungarian", "Icelandic", "Indian", "Iranian", "Iraqi", "Irish",
    "Italian", "Jamaican", "Japanese", "Jordanian", "Kazakh", "Kenyan", "Kurdish", "Kyrgyz", "Latvian",
    "Lebanese", "Libyan", "Lithuanian", "Macedonian", "Malian", "Maltese", "Moldovan", "Mongolian",
    "Montenegrin", "Moroccan", "Nigerian", "Norwegian", "Pakistani", "Palestinian", "Peruvian", "Polish",
    "Portuguese", "Russian", "Rwandan", "Senegalese", "Serbian", "Slovak", "Slovenian", "Somali", "Spanish",
    "Sudanese", "Swedish", "Syrian", "Tajik", "Tatar", "Tunisian", "Turkmen", "Ukrainian", "Uzbek", "Vietnamese",
    "Yemeni", "Afghan", "Angolan", "Bangladeshi", "Cameroonian", "Colombian", "Ecuadorian", "Filipino",
];

const GROUPS: &[&str] = &[
    "Roma", "Muslim", "Christian", "Orthodox", "Catholic", "Jewish", "Protestant", "Sunni", "Shia", "Alevi",
    "Buddhist", "Hindu",
];

/// Single-token and nested forms kept in the public partition.
const EXTRA_PUBLIC_LOCATIONS: &[&str] = &["Berlin", "York", "New York", "Strasbourg"];

/// Values whose first token indexes the pool at a stride coprime to its
/// size, so the second token is not predictable from the first's position.
fn compose(firsts: &[&str], seconds: &[&str], stride: usize) -> Vec<String> {
    firsts.iter().enumerate().map(|(i, f)| format!("{f} {}", seconds[(i * stride + 3) % seconds.len()])).collect()
}

fn compose_prefixed(prefixes: &[&str], roots: &[&str]) -> Vec<String> {
    roots.iter().enumerate().map(|(i, r)| format!("{} {r}", prefixes[(i * 7 + i / 10) % prefixes.len()])).collect()
}

/// PII surface forms per type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gazetteer {
    pub format: String,
    pub version: u32,
    pub partition: String,
    pub values: BTreeMap<PiiType, Vec<String>>,
}

/// Fraction of each builtin value list reserved for the private corpus.
const PRIVATE_SHARE: usize = 2;
const SHARE_DENOM: usize = 3;

impl Gazetteer {
    pub fn new(partition: &str, values: BTreeMap<PiiType, Vec<String>>) -> Result<Self> {
        let g = Self { format: GAZETTEER_FORMAT.into(), version: GAZETTEER_VERSION, partition: partition.into(), values };
        g.validate()?;
        Ok(g)
    }

    fn builtin_lists() -> BTreeMap<PiiType, Vec<String>> {
        let mut m = BTreeMap::new();
        m.insert(PiiType::Name, compose(FIRST_NAMES, SURNAMES, 17));
        m.insert(PiiType::Location, compose_prefixed(PLACE_PREFIXES, PLACE_ROOTS));
        m.insert(PiiType::Race, compose(NATIONALITIES, GROUPS, 5));
        m
    }

    /// The full builtin gazetteer (both partitions).
    pub fn builtin() -> Self {
        Self::builtin_private().union(&Self::builtin_public()).expect("builtin partitions are disjoint")
    }

    /// The partition used to fill the private (fine-tuning) corpus.
    pub fn builtin_private() -> Self {
        let values = Self::builtin_lists()
            .into_iter()
            .map(|(t, v)| {
                let cut = v.len() * PRIVATE_SHARE / SHARE_DENOM;
                (t, v[..cut].to_vec())
            })
            .collect();
        Self::new("private", values).expect("builtin gazetteer is valid")
    }

    /// The held-out partition used only by the public (pretraining) corpus.
    pub fn builtin_public() -> Self {
        let values = Self::builtin_lists()
            .into_iter()
            .map(|(t, v)| {
                let cut = v.len() * PRIVATE_SHARE / SHARE_DENOM;
                let mut rest = v[cut..].to_vec();
                if t == PiiType::Location {
                    rest.extend(EXTRA_PUBLIC_LOCATIONS.iter().map(|s| s.to_string()));
                }
                (t, rest)
            })
            .collect();
        Self::new("public", values).expect("builtin gazetteer is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, PiiType> = BTreeMap::new();
        for (t, vals) in &self.values {
            let mut local = BTreeSet::new();
            for v in vals {
                if v.split_whitespace().next().is_none() {
                    return Err(CorpusError::Gazetteer(format!("empty {t} value")));
                }
                if !local.insert(v.as_str()) {
                    return Err(CorpusError::Gazetteer(format!("duplicate {t} value {v:?}")));
                }
                if let Some(other) = seen.insert(v.as_str(), *t) {
                    return Err(CorpusError::Gazetteer(format!("{v:?} listed as both {other} and {t}")));
                }
            }
        }
        Ok(())
    }

    pub fn values(&self, t: PiiType) -> &[String] {
        self.values.get(&t).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn types(&self) -> impl Iterator<Item = PiiType> + '_ {
        self.values.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (PiiType, &str)> {
        self.values.iter().flat_map(|(t, vs)| vs.iter().map(move |v| (*t, v.as_str())))
    }

    pub fn contains(&self, t: PiiType, value: &str) -> bool {
        self.values(t).iter().any(|v| v == value)
    }

    /// Values present in both gazetteers, by type.
    pub fn overlap(&self, other: &Gazetteer) -> Vec<(PiiType, String)> {
        self.iter().filter(|(t, v)| other.contains(*t, v)).map(|(t, v)| (t, v.to_string())).collect()
    }

    pub fn union(&self, other: &Gazetteer) -> Result<Self> {
        let mut values = self.values.clone();
        for (t, v) in other.iter() {
            let list = values.entry(t).or_default();
            if !list.iter().any(|x| x == v) {
                list.push(v.to_string());
            }
        }
        Self::new("all", values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let g: Gazetteer = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if g.format != GAZETTEER_FORMAT || g.version != GAZETTEER_VERSION {
            return Err(CorpusError::Format(format!("unsupported gazetteer {} v{}", g.format, g.version)));
        }
        g.validate()?;
        Ok(g)
    }
}
