//! DrugProt-style corpus files: abstracts, entity mentions and gold relations.
//!
//! Offsets are character (not byte) offsets into the document text, which is
//! the title and the abstract joined by a single tab.

mod instance;
mod sentence;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SpanMismatch};

pub use instance::{
    generate_instances, tag_scheme1, tag_scheme2, InstanceKey, InstanceSet, SchemeKind,
    SentenceInstance,
};
pub use sentence::{split_sentences, Sentence, ABBREVIATIONS, SPLITTER_VERSION};

/// Character placed between title and abstract in [`Document::full_text`].
pub const TITLE_SEPARATOR: char = '\t';

/// The thirteen DrugProt relation labels plus the negative class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationType {
    None = 0,
    Activator,
    Agonist,
    AgonistActivator,
    AgonistInhibitor,
    Antagonist,
    DirectRegulator,
    IndirectDownregulator,
    IndirectUpregulator,
    Inhibitor,
    PartOf,
    ProductOf,
    Substrate,
    SubstrateProductOf,
}

impl RelationType {
    pub const COUNT: usize = 14;

    pub const ALL: [RelationType; 14] = [
        RelationType::None,
        RelationType::Activator,
        RelationType::Agonist,
        RelationType::AgonistActivator,
        RelationType::AgonistInhibitor,
        RelationType::Antagonist,
        RelationType::DirectRegulator,
        RelationType::IndirectDownregulator,
        RelationType::IndirectUpregulator,
        RelationType::Inhibitor,
        RelationType::PartOf,
        RelationType::ProductOf,
        RelationType::Substrate,
        RelationType::SubstrateProductOf,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Self> {
        Self::ALL.get(idx).copied()
    }

    pub fn is_positive(self) -> bool {
        self != RelationType::None
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::None => "NONE",
            RelationType::Activator => "ACTIVATOR",
            RelationType::Agonist => "AGONIST",
            RelationType::AgonistActivator => "AGONIST-ACTIVATOR",
            RelationType::AgonistInhibitor => "AGONIST-INHIBITOR",
            RelationType::Antagonist => "ANTAGONIST",
            RelationType::DirectRegulator => "DIRECT-REGULATOR",
            RelationType::IndirectDownregulator => "INDIRECT-DOWNREGULATOR",
            RelationType::IndirectUpregulator => "INDIRECT-UPREGULATOR",
            RelationType::Inhibitor => "INHIBITOR",
            RelationType::PartOf => "PART-OF",
            RelationType::ProductOf => "PRODUCT-OF",
            RelationType::Substrate => "SUBSTRATE",
            RelationType::SubstrateProductOf => "SUBSTRATE_PRODUCT-OF",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown relation type {s:?}"))
    }
}

impl Serialize for RelationType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RelationType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EntityType {
    Chemical,
    Gene,
}

impl EntityType {
    /// Maps a raw DrugProt entity type; GENE-Y and GENE-N both become `Gene`.
    pub fn from_raw(raw: &str) -> Option<Self> {
        match raw {
            "CHEMICAL" => Some(EntityType::Chemical),
            "GENE" | "GENE-Y" | "GENE-N" => Some(EntityType::Gene),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub pmid: String,
    pub title: String,
    pub abstract_text: String,
    pub full_text: String,
    /// Byte offset of every char of `full_text`, plus the total length.
    char_bytes: Vec<usize>,
}

impl Document {
    pub fn new(pmid: impl Into<String>, title: impl Into<String>, abstract_text: impl Into<String>) -> Self {
        let title = title.into();
        let abstract_text = abstract_text.into();
        let full_text = format!("{title}{TITLE_SEPARATOR}{abstract_text}");
        let mut char_bytes: Vec<usize> = full_text.char_indices().map(|(b, _)| b).collect();
        char_bytes.push(full_text.len());
        Document {
            pmid: pmid.into(),
            title,
            abstract_text,
            full_text,
            char_bytes,
        }
    }

    /// Length of `full_text` in characters.
    pub fn char_len(&self) -> usize {
        self.char_bytes.len() - 1
    }

    /// Char offset where the abstract starts (one past the separator).
    pub fn abstract_start(&self) -> usize {
        self.title.chars().count() + 1
    }

    /// Slice of `full_text` by char offsets. Panics if out of range.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        &self.full_text[self.char_bytes[start]..self.char_bytes[end]]
    }

    pub fn try_slice(&self, start: usize, end: usize) -> Option<&str> {
        (start <= end && end <= self.char_len()).then(|| self.slice(start, end))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityMention {
    pub pmid: String,
    pub eid: String,
    pub etype: EntityType,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

impl EntityMention {
    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationGold {
    pub pmid: String,
    pub rtype: RelationType,
    pub arg1: String,
    pub arg2: String,
}

/// Documents with their mentions and gold relations, keyed and ordered by pmid.
#[derive(Debug, Clone, Default)]
pub struct CorpusBundle {
    pub documents: BTreeMap<String, Document>,
    pub mentions: BTreeMap<String, Vec<EntityMention>>,
    pub relations: BTreeMap<String, Vec<RelationGold>>,
}

impl CorpusBundle {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn mentions_of(&self, pmid: &str) -> &[EntityMention] {
        self.mentions.get(pmid).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn relations_of(&self, pmid: &str) -> &[RelationGold] {
        self.relations.get(pmid).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_relations(&self) -> impl Iterator<Item = &RelationGold> {
        self.relations.values().flatten()
    }

    /// Sub-corpus restricted to the given pmids.
    pub fn subset<'a>(&self, pmids: impl IntoIterator<Item = &'a String>) -> CorpusBundle {
        let mut out = CorpusBundle::default();
        for pmid in pmids {
            if let Some(doc) = self.documents.get(pmid) {
                out.documents.insert(pmid.clone(), doc.clone());
                if let Some(m) = self.mentions.get(pmid) {
                    out.mentions.insert(pmid.clone(), m.clone());
                }
                if let Some(r) = self.relations.get(pmid) {
                    out.relations.insert(pmid.clone(), r.clone());
                }
            }
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

fn malformed(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses the three TSV files into a validated bundle.
pub fn load_corpus(
    abstracts_path: &Path,
    entities_path: &Path,
    relations_path: Option<&Path>,
) -> Result<CorpusBundle> {
    let mut bundle = CorpusBundle::default();

    for (i, line) in read_lines(abstracts_path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(malformed(abstracts_path, i + 1, "expected pmid, title and abstract"));
        }
        if fields[0].is_empty() {
            return Err(malformed(abstracts_path, i + 1, "empty pmid"));
        }
        let doc = Document::new(fields[0], fields[1], fields[2]);
        if bundle.documents.insert(doc.pmid.clone(), doc).is_some() {
            return Err(malformed(abstracts_path, i + 1, format!("duplicate pmid {}", fields[0])));
        }
    }

    let mut mention_lines: HashMap<(String, String), usize> = HashMap::new();
    for (i, line) in read_lines(entities_path)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(malformed(entities_path, lineno, format!("expected 6 fields, found {}", fields.len())));
        }
        let [pmid, eid, raw_type, start, end, surface] = [fields[0], fields[1], fields[2], fields[3], fields[4], fields[5]];
        let etype = EntityType::from_raw(raw_type)
            .ok_or_else(|| malformed(entities_path, lineno, format!("unknown entity type {raw_type:?}")))?;
        let start: usize = start
            .parse()
            .map_err(|_| malformed(entities_path, lineno, format!("bad start offset {start:?}")))?;
        let end: usize = end
            .parse()
            .map_err(|_| malformed(entities_path, lineno, format!("bad end offset {end:?}")))?;
        let doc = bundle
            .documents
            .get(pmid)
            .ok_or_else(|| malformed(entities_path, lineno, format!("unknown pmid {pmid}")))?;
        let found = if start < end { doc.try_slice(start, end) } else { None };
        if found != Some(surface) {
            return Err(Error::SpanMismatch(Box::new(SpanMismatch {
                path: entities_path.to_path_buf(),
                line: lineno,
                pmid: pmid.to_string(),
                eid: eid.to_string(),
                start,
                end,
                expected: surface.to_string(),
                found: found.unwrap_or("<out of range>").to_string(),
            })));
        }
        if mention_lines.insert((pmid.to_string(), eid.to_string()), lineno).is_some() {
            return Err(malformed(entities_path, lineno, format!("duplicate entity id {pmid}/{eid}")));
        }
        bundle.mentions.entry(pmid.to_string()).or_default().push(EntityMention {
            pmid: pmid.to_string(),
            eid: eid.to_string(),
            etype,
            start,
            end,
            surface: surface.to_string(),
        });
    }
    for mentions in bundle.mentions.values_mut() {
        mentions.sort_by_key(|m| (m.start, m.end, eid_key(&m.eid)));
    }

    if let Some(relations_path) = relations_path {
        let types: HashMap<(&str, &str), EntityType> = bundle
            .mentions
            .values()
            .flatten()
            .map(|m| ((m.pmid.as_str(), m.eid.as_str()), m.etype))
            .collect();
        let mut parsed: Vec<RelationGold> = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in read_lines(relations_path)?.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let rel = parse_relation_row(line)
                .map_err(|msg| malformed(relations_path, lineno, msg))?;
            for (arg, want) in [(&rel.arg1, EntityType::Chemical), (&rel.arg2, EntityType::Gene)] {
                let dangling = |msg: String| Error::DanglingArgument {
                    path: relations_path.to_path_buf(),
                    line: lineno,
                    pmid: rel.pmid.clone(),
                    arg: arg.clone(),
                    msg,
                };
                match types.get(&(rel.pmid.as_str(), arg.as_str())) {
                    None => return Err(dangling("no such entity".into())),
                    Some(&t) if t != want => {
                        return Err(dangling(format!("expected a {want:?} mention, found {t:?}")))
                    }
                    _ => {}
                }
            }
            if seen.insert(rel.clone()) {
                parsed.push(rel);
            } else {
                log::warn!("{}:{lineno}: duplicate gold relation ignored", relations_path.display());
            }
        }
        for rel in parsed {
            bundle.relations.entry(rel.pmid.clone()).or_default().push(rel);
        }
    }

    Ok(bundle)
}

/// Parses `pmid \t TYPE \t Arg1:Tn \t Arg2:Tn`; shared with prediction files.
pub(crate) fn parse_relation_row(line: &str) -> Result<RelationGold, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty pmid".into());
    }
    let rtype: RelationType = fields[1].parse()?;
    if !rtype.is_positive() {
        return Err("NONE is not a valid relation row".into());
    }
    let arg1 = fields[2]
        .strip_prefix("Arg1:")
        .ok_or_else(|| format!("expected Arg1:<id>, found {:?}", fields[2]))?;
    let arg2 = fields[3]
        .strip_prefix("Arg2:")
        .ok_or_else(|| format!("expected Arg2:<id>, found {:?}", fields[3]))?;
    if arg1.is_empty() || arg2.is_empty() {
        return Err("empty argument id".into());
    }
    Ok(RelationGold {
        pmid: fields[0].to_string(),
        rtype,
        arg1: arg1.to_string(),
        arg2: arg2.to_string(),
    })
}

/// Sort key giving natural order for ids like `T2` < `T10`.
pub fn eid_key(eid: &str) -> (String, u64, String) {
    let split = eid.find(|c: char| c.is_ascii_digit()).unwrap_or(eid.len());
    let (prefix, rest) = eid.split_at(split);
    let digits_end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let num = rest[..digits_end].parse().unwrap_or(0);
    (prefix.to_string(), num, rest[digits_end..].to_string())
}

/// Writes the bundle as `abstracts.tsv`, `entities.tsv` and `relations.tsv`
/// under `dir`, in pmid order.
pub fn write_corpus(bundle: &CorpusBundle, dir: &Path) -> Result<CorpusPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut abstracts = String::new();
    let mut entities = String::new();
    let mut relations = String::new();
    for (pmid, doc) in &bundle.documents {
        abstracts.push_str(&format!("{pmid}\t{}\t{}\n", doc.title, doc.abstract_text));
        for m in bundle.mentions_of(pmid) {
            let etype = match m.etype {
                EntityType::Chemical => "CHEMICAL",
                EntityType::Gene => "GENE",
            };
            entities.push_str(&format!("{pmid}\t{}\t{etype}\t{}\t{}\t{}\n", m.eid, m.start, m.end, m.surface));
        }
        for r in bundle.relations_of(pmid) {
            relations.push_str(&format!("{pmid}\t{}\tArg1:{}\tArg2:{}\n", r.rtype, r.arg1, r.arg2));
        }
    }
    let paths = CorpusPaths {
        abstracts: dir.join("abstracts.tsv"),
        entities: dir.join("entities.tsv"),
        relations: Some(dir.join("relations.tsv")),
    };
    for (path, body) in [
        (&paths.abstracts, abstracts),
        (&paths.entities, entities),
        (paths.relations.as_ref().unwrap(), relations),
    ] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(paths)
}

/// Paths to the three corpus files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub abstracts: PathBuf,
    pub entities: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<PathBuf>,
}

impl CorpusPaths {
    pub fn load(&self) -> Result<CorpusBundle> {
        load_corpus(&self.abstracts, &self.entities, self.relations.as_deref())
    }
}
