//! Template-generated corpora with known answers.
//!
//! Every abstract has an entity-free title, one relation sentence drawn from
//! eight lexical templates (active or passive voice), optional distractor
//! mentions that only form negative pairs, an optional negative sentence and
//! some filler sentences that exercise the sentence splitter.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusBundle, Document, EntityMention, EntityType, RelationGold, RelationType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    pub seed: u64,
    /// First pmid; later documents count up from here.
    pub pmid_base: u64,
    pub distractor_rate: f64,
    pub negative_sentence_rate: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_docs: 2000,
            seed: 1,
            pmid_base: 10_000_000,
            distractor_rate: 0.6,
            negative_sentence_rate: 0.5,
        }
    }
}

/// `(label, active, passive)`. `{C}` is the chemical, `{G}` the gene.
pub const RELATION_TEMPLATES: [(RelationType, &str, &str); 8] = [
    (RelationType::Inhibitor, "{C} inhibits {G}", "{G} is inhibited by {C}"),
    (RelationType::Activator, "{C} activates {G}", "{G} is activated by {C}"),
    (RelationType::Agonist, "{C} acts as an agonist of {G}", "{G} responds to the agonist {C}"),
    (RelationType::Antagonist, "{C} acts as an antagonist of {G}", "{G} is blocked by the antagonist {C}"),
    (RelationType::Substrate, "{C} is a substrate of {G}", "{G} metabolizes {C}"),
    (RelationType::DirectRegulator, "{C} binds directly to {G}", "{G} is directly bound by {C}"),
    (RelationType::IndirectUpregulator, "{C} increases the expression of {G}", "{G} expression is increased by {C}"),
    (RelationType::IndirectDownregulator, "{C} decreases the expression of {G}", "{G} expression is decreased by {C}"),
];

const NEGATIVE_TEMPLATES: [&str; 3] = [
    "No interaction between {C} and {G} was detected.",
    "{G} levels were measured after {C} exposure.",
    "Both {C} and {G} were quantified in plasma.",
];

const FILLERS: [&str; 6] = [
    "Samples were collected (n = 12, approx. 3 weeks apart) from each subject.",
    "Results are summarized in Fig. 2 and in the supplementary tables.",
    "The study was approved by the local ethics board.",
    "Data were analyzed as described by Smith et al. in earlier work.",
    "Doses (e.g. 5 mg/kg) were given twice daily.",
    "Plasma levels rose approx. 2-fold within 3 h of dosing.",
];

const CHEM_HEADS: [&str; 12] = ["zor", "mel", "ap", "ri", "cen", "vol", "lux", "pen", "dro", "tas", "quin", "fen"];
const CHEM_MIDS: [&str; 8] = ["a", "o", "i", "e", "u", "ara", "ino", "eto"];
const CHEM_TAILS: [&str; 8] = ["nib", "mab", "zole", "pril", "statin", "mycin", "dol", "rine"];
const GENE_LETTERS: &[u8] = b"ABCDEFGHKLMNPRSTVWXZ";

fn chemical_name(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}{}{}",
        CHEM_HEADS.choose(rng).unwrap(),
        CHEM_MIDS.choose(rng).unwrap(),
        CHEM_TAILS.choose(rng).unwrap()
    )
}

fn gene_name(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=4);
    let mut s: String = (0..n).map(|_| *GENE_LETTERS.choose(rng).unwrap() as char).collect();
    s.push_str(&rng.gen_range(1..=9).to_string());
    s
}

struct Builder {
    text: String,
    /// Offset of the abstract inside `title \t abstract`.
    base: usize,
    mentions: Vec<(EntityType, usize, usize, String)>,
}

impl Builder {
    fn sentence(&mut self, template: &str, slots: &HashMap<char, (EntityType, String)>) -> HashMap<char, usize> {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        let mut placed = HashMap::new();
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            self.text.push_str(&rest[..open]);
            let key = rest[open + 1..].chars().next().expect("slot name");
            let (etype, surface) = &slots[&key];
            let surface = if rest.len() == template.len() && open == 0 {
                capitalise_lead(surface)
            } else {
                surface.clone()
            };
            let start = self.base + self.text.len();
            self.text.push_str(&surface);
            placed.insert(key, self.mentions.len());
            self.mentions.push((*etype, start, start + surface.len(), surface));
            rest = &rest[open + 3..];
        }
        self.text.push_str(rest);
        placed
    }
}

fn distinct(rng: &mut ChaCha8Rng, used: &mut Vec<String>, make: fn(&mut ChaCha8Rng) -> String) -> String {
    loop {
        let s = make(rng);
        if !used.contains(&s) {
            used.push(s.clone());
            return s;
        }
    }
}

/// Generates a labelled corpus. Output depends only on `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> CorpusBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bundle = CorpusBundle::default();
    for i in 0..cfg.n_docs {
        let pmid = (cfg.pmid_base + i as u64).to_string();
        let title = format!("Effects of compound series {} on enzyme activity", rng.gen_range(1..500));
        let mut b = Builder {
            text: String::new(),
            base: title.len() + 1,
            mentions: Vec::new(),
        };
        let mut used = Vec::new();
        let chem = distinct(&mut rng, &mut used, chemical_name);
        let gene = distinct(&mut rng, &mut used, gene_name);
        let mut slots: HashMap<char, (EntityType, String)> = HashMap::new();
        slots.insert('C', (EntityType::Chemical, chem));
        slots.insert('G', (EntityType::Gene, gene));

        let (label, active, passive) = *RELATION_TEMPLATES.choose(&mut rng).unwrap();
        let mut sentence = if rng.gen_bool(0.5) { active } else { passive }.to_string();
        if rng.gen_bool(cfg.distractor_rate) {
            let gene_distractor = rng.gen_bool(0.5);
            let (key, etype, name) = if gene_distractor {
                ('D', EntityType::Gene, distinct(&mut rng, &mut used, gene_name))
            } else {
                ('E', EntityType::Chemical, distinct(&mut rng, &mut used, chemical_name))
            };
            slots.insert(key, (etype, name));
            sentence = if rng.gen_bool(0.5) {
                format!("Unlike {{{key}}}, {sentence}")
            } else if gene_distractor {
                format!("{sentence} while {{{key}}} was unaffected")
            } else {
                format!("{sentence} while {{{key}}} had no effect")
            };
        }
        sentence.push('.');

        let n_fillers = rng.gen_range(1..=3);
        let mut plan: Vec<Option<&str>> = FILLERS.choose_multiple(&mut rng, n_fillers).map(|f| Some(*f)).collect();
        let position = rng.gen_range(0..=plan.len());
        plan.insert(position, None);
        let negative = rng.gen_bool(cfg.negative_sentence_rate).then(|| {
            slots.insert('H', (EntityType::Gene, distinct(&mut rng, &mut used, gene_name)));
            NEGATIVE_TEMPLATES.choose(&mut rng).unwrap().replace("{G}", "{H}")
        });

        let mut placed = HashMap::new();
        for seg in plan {
            match seg {
                Some(filler) => {
                    b.sentence(filler, &slots);
                }
                None => placed = b.sentence(&sentence, &slots),
            }
        }
        if let Some(neg) = &negative {
            b.sentence(neg, &slots);
        }

        let doc = Document::new(pmid.clone(), title, b.text);
        let mentions: Vec<EntityMention> = b
            .mentions
            .iter()
            .enumerate()
            .map(|(j, (etype, start, end, surface))| EntityMention {
                pmid: pmid.clone(),
                eid: format!("T{}", j + 1),
                etype: *etype,
                start: *start,
                end: *end,
                surface: surface.clone(),
            })
            .collect();
        let relation = RelationGold {
            pmid: pmid.clone(),
            rtype: label,
            arg1: mentions[placed[&'C']].eid.clone(),
            arg2: mentions[placed[&'G']].eid.clone(),
        };
        bundle.documents.insert(pmid.clone(), doc);
        bundle.mentions.insert(pmid.clone(), mentions);
        bundle.relations.insert(pmid, vec![relation]);
    }
    bundle
}


fn capitalise_lead(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => c.to_ascii_uppercase().to_string() + chars.as_str(),
        _ => s.to_string(),
    }
}
