use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{eid_key, split_sentences, CorpusBundle, EntityMention, EntityType, RelationType, Sentence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchemeKind {
    /// Targets become `DRUG` / `PROTEIN`, other mentions `DRUG_O` / `PROTEIN_O`.
    Anonymize,
    /// Targets are wrapped in `<DRUG-B> .. <DRUG-E>` and `<PROTEIN-B> .. <PROTEIN-E>`.
    Markers,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 2] = [SchemeKind::Anonymize, SchemeKind::Markers];
}

/// Identifies a candidate pair independently of tagging scheme.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceKey {
    pub pmid: String,
    pub chem: String,
    pub gene: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceInstance {
    pub pmid: String,
    pub sentence_idx: usize,
    pub chem: EntityMention,
    pub gene: EntityMention,
    pub label: RelationType,
    pub tagged_text: String,
    pub scheme: SchemeKind,
}

impl SentenceInstance {
    pub fn key(&self) -> InstanceKey {
        InstanceKey {
            pmid: self.pmid.clone(),
            chem: self.chem.eid.clone(),
            gene: self.gene.eid.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InstanceSet {
    pub instances: Vec<SentenceInstance>,
    /// Gold relations whose arguments fall in different sentences.
    pub dropped_cross_sentence: usize,
    /// Candidate pairs whose target spans overlap; never emitted.
    pub skipped_overlaps: usize,
    /// Pairs carrying more than one gold label (one instance emitted per label).
    pub multi_label_pairs: usize,
}

fn chars_of(text: &str) -> Vec<char> {
    text.chars().collect()
}

/// Anonymizes the target pair and the other mentions in a sentence.
///
/// Returns `None` when the two target spans overlap. Other mentions that
/// overlap a target, or an earlier kept other mention, are left as text.
pub fn tag_scheme1(
    sentence: &Sentence,
    chem: &EntityMention,
    gene: &EntityMention,
    others: &[EntityMention],
) -> Option<String> {
    if chem.overlaps(gene) {
        return None;
    }
    debug_assert!(sentence.contains(chem) && sentence.contains(gene));
    let mut spans: Vec<(usize, usize, &str)> = vec![
        (chem.start, chem.end, "DRUG"),
        (gene.start, gene.end, "PROTEIN"),
    ];
    let mut rest: Vec<&EntityMention> = others
        .iter()
        .filter(|m| sentence.contains(m) && !(m.eid == chem.eid || m.eid == gene.eid))
        .collect();
    rest.sort_by_key(|m| (m.start, std::cmp::Reverse(m.end)));
    for m in rest {
        if spans.iter().any(|&(s, e, _)| m.start < e && s < m.end) {
            continue;
        }
        let tag = match m.etype {
            EntityType::Chemical => "DRUG_O",
            EntityType::Gene => "PROTEIN_O",
        };
        spans.push((m.start, m.end, tag));
    }
    spans.sort_by_key(|&(s, _, _)| std::cmp::Reverse(s));

    let mut chars = chars_of(&sentence.text);
    for (s, e, tag) in spans {
        chars.splice(s - sentence.start..e - sentence.start, tag.chars());
    }
    Some(chars.into_iter().collect())
}

/// Wraps the target pair in begin/end markers, keeping the surface text.
///
/// Returns `None` when the two target spans overlap.
pub fn tag_scheme2(sentence: &Sentence, chem: &EntityMention, gene: &EntityMention) -> Option<String> {
    if chem.overlaps(gene) {
        return None;
    }
    debug_assert!(sentence.contains(chem) && sentence.contains(gene));
    // (position, closes-before-opens order, text)
    let mut inserts = [
        (chem.start, 1, "<DRUG-B> "),
        (chem.end, 0, " <DRUG-E>"),
        (gene.start, 1, "<PROTEIN-B> "),
        (gene.end, 0, " <PROTEIN-E>"),
    ];
    inserts.sort_by_key(|&(p, o, _)| (p, o));
    let chars = chars_of(&sentence.text);
    let mut out = String::with_capacity(sentence.text.len() + 48);
    let mut at = 0;
    for (pos, _, marker) in inserts {
        let rel = pos - sentence.start;
        out.extend(&chars[at..rel]);
        out.push_str(marker);
        at = rel;
    }
    out.extend(&chars[at..]);
    Some(out)
}

/// Builds one instance per (chemical, gene) pair sharing a sentence.
///
/// Output is sorted by (pmid, sentence index, chemical id, gene id, label).
pub fn generate_instances(bundle: &CorpusBundle, scheme: SchemeKind) -> InstanceSet {
    let mut set = InstanceSet::default();
    for (pmid, doc) in &bundle.documents {
        let mentions = bundle.mentions_of(pmid);
        let sentences = split_sentences(doc, mentions);

        let mut sentence_of: HashMap<&str, usize> = HashMap::new();
        let mut by_sentence: Vec<Vec<&EntityMention>> = vec![Vec::new(); sentences.len()];
        for m in mentions {
            if let Some(idx) = sentences.iter().position(|s| s.contains(m)) {
                sentence_of.insert(m.eid.as_str(), idx);
                by_sentence[idx].push(m);
            }
        }

        let mut gold: HashMap<(&str, &str), BTreeSet<RelationType>> = HashMap::new();
        for rel in bundle.relations_of(pmid) {
            match (sentence_of.get(rel.arg1.as_str()), sentence_of.get(rel.arg2.as_str())) {
                (Some(a), Some(b)) if a == b => {
                    gold.entry((rel.arg1.as_str(), rel.arg2.as_str()))
                        .or_default()
                        .insert(rel.rtype);
                }
                _ => set.dropped_cross_sentence += 1,
            }
        }

        let mut doc_instances = Vec::new();
        for (idx, sentence) in sentences.iter().enumerate() {
            let here = &by_sentence[idx];
            let others: Vec<EntityMention> = here.iter().map(|m| (*m).clone()).collect();
            for chem in here.iter().filter(|m| m.etype == EntityType::Chemical) {
                for gene in here.iter().filter(|m| m.etype == EntityType::Gene) {
                    let tagged = match scheme {
                        SchemeKind::Anonymize => tag_scheme1(sentence, chem, gene, &others),
                        SchemeKind::Markers => tag_scheme2(sentence, chem, gene),
                    };
                    let Some(tagged_text) = tagged else {
                        log::warn!("{pmid}: overlapping targets {} / {} skipped", chem.eid, gene.eid);
                        set.skipped_overlaps += 1;
                        continue;
                    };
                    let labels: Vec<RelationType> = match gold.get(&(chem.eid.as_str(), gene.eid.as_str())) {
                        Some(l) => l.iter().copied().collect(),
                        None => vec![RelationType::None],
                    };
                    if labels.len() > 1 {
                        set.multi_label_pairs += 1;
                    }
                    for label in labels {
                        doc_instances.push(SentenceInstance {
                            pmid: pmid.clone(),
                            sentence_idx: idx,
                            chem: (*chem).clone(),
                            gene: (*gene).clone(),
                            label,
                            tagged_text: tagged_text.clone(),
                            scheme,
                        });
                    }
                }
            }
        }
        doc_instances.sort_by(|a, b| {
            (a.sentence_idx, eid_key(&a.chem.eid), eid_key(&a.gene.eid), a.label)
                .cmp(&(b.sentence_idx, eid_key(&b.chem.eid), eid_key(&b.gene.eid), b.label))
        });
        set.instances.extend(doc_instances);
    }
    set
}
