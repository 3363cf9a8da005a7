//! WordPiece vocabulary, tokenization and fixed-length encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceInstance;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const SPECIAL_TOKENS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Entity tags produced by the two tagging schemes. Always atomic.
pub const MARKER_TOKENS: [&str; 8] = [
    "DRUG", "PROTEIN", "DRUG_O", "PROTEIN_O", "<DRUG-B>", "<DRUG-E>", "<PROTEIN-B>", "<PROTEIN-E>",
];

/// Markers that locate the target pair; truncation keeps all of them.
const TARGET_MARKERS: [&str; 6] = ["DRUG", "PROTEIN", "<DRUG-B>", "<DRUG-E>", "<PROTEIN-B>", "<PROTEIN-E>"];

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order. Missing special or
    /// marker tokens are appended at the end.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("empty vocabulary".into()));
        }
        let mut vocab = Vocabulary {
            tokens: Vec::with_capacity(tokens.len() + 12),
            index: HashMap::with_capacity(tokens.len() + 12),
            lowercase: false,
        };
        for (line, tok) in tokens.into_iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Data(format!("empty token on line {}", line + 1)));
            }
            if vocab.index.contains_key(&tok) {
                return Err(Error::Data(format!("duplicate token {tok:?} on line {}", line + 1)));
            }
            vocab.push(tok);
        }
        for required in SPECIAL_TOKENS.iter().chain(MARKER_TOKENS.iter()) {
            if !vocab.index.contains_key(*required) {
                log::warn!("vocabulary lacks {required}; appended as id {}", vocab.len());
                vocab.push(required.to_string());
            }
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len() as u32);
        self.tokens.push(tok);
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn required(&self, token: &str) -> u32 {
        self.index[token]
    }

    pub fn pad_id(&self) -> u32 {
        self.required(PAD)
    }

    pub fn unk_id(&self) -> u32 {
        self.required(UNK)
    }

    pub fn cls_id(&self) -> u32 {
        self.required(CLS)
    }

    pub fn sep_id(&self) -> u32 {
        self.required(SEP)
    }

    pub fn marker_ids(&self) -> [u32; 8] {
        MARKER_TOKENS.map(|m| self.required(m))
    }

    /// One token per line, `\n` terminated.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a vocabulary file: one token per line, id = zero-based line index.
pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<String> = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect();
    if lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Vocabulary::from_tokens(lines).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PreToken<'a> {
    Marker(&'static str),
    Word(&'a str),
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

fn split_punct<'a>(text: &'a str, out: &mut Vec<PreToken<'a>>) {
    let mut start = None;
    for (i, c) in text.char_indices() {
        if is_punct(c) {
            if let Some(s) = start.take() {
                out.push(PreToken::Word(&text[s..i]));
            }
            out.push(PreToken::Word(&text[i..i + c.len_utf8()]));
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(PreToken::Word(&text[s..]));
    }
}

fn marker_at(chunk: &str, at: usize) -> Option<&'static str> {
    if chunk[..at].chars().next_back().is_some_and(char::is_alphanumeric) {
        return None;
    }
    let rest = &chunk[at..];
    MARKER_TOKENS
        .iter()
        .filter(|m| rest.starts_with(**m))
        .filter(|m| {
            rest[m.len()..]
                .chars()
                .next()
                .is_none_or(|c| !(c.is_alphanumeric() || c == '_'))
        })
        .max_by_key(|m| m.len())
        .copied()
}

/// Whitespace split, then entity markers are cut out whole and the rest is
/// split on punctuation.
fn pre_tokenize(text: &str) -> Vec<PreToken<'_>> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut plain_from = 0;
        let mut i = 0;
        while i < chunk.len() {
            if let Some(m) = marker_at(chunk, i) {
                split_punct(&chunk[plain_from..i], &mut out);
                out.push(PreToken::Marker(m));
                i += m.len();
                plain_from = i;
            } else {
                i += chunk[i..].chars().next().map_or(1, char::len_utf8);
            }
        }
        split_punct(&chunk[plain_from..], &mut out);
    }
    out
}

fn normalize_word(word: &str, lowercase: bool) -> String {
    if lowercase {
        word.to_lowercase()
    } else {
        word.to_string()
    }
}

/// Greedy longest-prefix WordPiece over pre-tokenized words.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocabulary) -> Vec<String> {
    let mut out = Vec::new();
    for pre in pre_tokenize(text) {
        match pre {
            PreToken::Marker(m) => out.push(m.to_string()),
            PreToken::Word(w) => {
                let w = normalize_word(w, vocab.lowercase);
                out.extend(wordpiece_word(&w, vocab));
            }
        }
    }
    out
}

fn wordpiece_word(word: &str, vocab: &Vocabulary) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while start < end {
            let body: String = chars[start..end].iter().collect();
            let candidate = if start > 0 { format!("{CONTINUATION}{body}") } else { body };
            if vocab.id(&candidate).is_some() {
                found = Some(candidate);
                break;
            }
            end -= 1;
        }
        match found {
            Some(piece) => pieces.push(piece),
            None => return vec![UNK.to_string()],
        }
        start = end;
    }
    pieces
}

/// Learns a subword vocabulary by repeatedly merging the most frequent
/// adjacent symbol pair, ties going to the pair seen first.
///
/// This is a frequency-count merge scheme, not likelihood-based WordPiece
/// training. Output is deterministic for a given corpus order.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    target_size: usize,
    lowercase: bool,
) -> Result<Vocabulary> {
    let mut word_ids: HashMap<String, usize> = HashMap::new();
    let mut words: Vec<(Vec<String>, u64)> = Vec::new();
    for text in corpus {
        for pre in pre_tokenize(text) {
            let PreToken::Word(w) = pre else { continue };
            let w = normalize_word(w, lowercase);
            if let Some(&i) = word_ids.get(&w) {
                words[i].1 += 1;
            } else {
                let symbols = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                    .collect();
                word_ids.insert(w, words.len());
                words.push((symbols, 1));
            }
        }
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS
        .iter()
        .chain(MARKER_TOKENS.iter())
        .map(|s| s.to_string())
        .collect();
    let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
    let mut chars_in_order: Vec<char> = Vec::new();
    for (symbols, _) in &words {
        for s in symbols {
            let c = s.trim_start_matches(CONTINUATION).chars().next().unwrap_or(' ');
            if !chars_in_order.contains(&c) {
                chars_in_order.push(c);
            }
        }
    }
    for c in &chars_in_order {
        for form in [c.to_string(), format!("{CONTINUATION}{c}")] {
            if seen.insert(form.clone(), ()).is_none() {
                tokens.push(form);
            }
        }
    }
    if target_size < tokens.len() {
        return Err(Error::Config(format!(
            "vocabulary size {target_size} is below the {} required base tokens",
            tokens.len()
        )));
    }

    while tokens.len() < target_size {
        // pair -> (count, first-seen rank)
        let mut pairs: HashMap<(&str, &str), (u64, usize)> = HashMap::new();
        let mut rank = 0;
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                let e = pairs.entry((w[0].as_str(), w[1].as_str())).or_insert_with(|| {
                    rank += 1;
                    (0, rank)
                });
                e.0 += count;
            }
        }
        let Some((&(left, right), _)) = pairs
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{}", right.trim_start_matches(CONTINUATION));
        for (symbols, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols[i] = merged.clone();
                    symbols.remove(i + 1);
                }
                i += 1;
            }
        }
        if seen.insert(merged.clone(), ()).is_none() {
            tokens.push(merged);
        }
    }

    Ok(Vocabulary::from_tokens(tokens)?.with_lowercase(lowercase))
}

/// Fixed-length id sequence: `[CLS] tokens [SEP]` followed by padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub n_real: usize,
}

impl TokenSequence {
    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.n_real]
    }
}

/// Encodes already-tagged text. When the text is too long the kept window is
/// centred between the target markers so every one of them survives.
pub fn encode_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 8 {
        return Err(Error::Config(format!("max_len must be at least 8, got {max_len}")));
    }
    let ids: Vec<u32> = wordpiece_tokenize(text, vocab)
        .iter()
        .map(|t| vocab.id(t).unwrap_or_else(|| vocab.unk_id()))
        .collect();
    let window = max_len - 2;
    let kept = if ids.len() <= window {
        &ids[..]
    } else {
        let targets: Vec<u32> = TARGET_MARKERS.iter().map(|m| vocab.required(m)).collect();
        let positions: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| targets.contains(id))
            .map(|(i, _)| i)
            .collect();
        let start = match (positions.first(), positions.last()) {
            (Some(&lo), Some(&hi)) => {
                if hi - lo + 1 > window {
                    return Err(Error::Data(format!(
                        "target markers span {} tokens, more than the {window} that fit",
                        hi - lo + 1
                    )));
                }
                let desired = ((lo + hi) / 2) as i64 - (window / 2) as i64;
                let lower = (hi + 1) as i64 - window as i64;
                desired.clamp(lower, lo as i64).clamp(0, (ids.len() - window) as i64) as usize
            }
            _ => 0,
        };
        &ids[start..start + window]
    };

    let n_real = kept.len() + 2;
    let mut out = Vec::with_capacity(max_len);
    out.push(vocab.cls_id());
    out.extend_from_slice(kept);
    out.push(vocab.sep_id());
    out.resize(max_len, vocab.pad_id());
    let attention_mask = (0..max_len).map(|i| u8::from(i < n_real)).collect();
    Ok(TokenSequence {
        ids: out,
        attention_mask,
        n_real,
    })
}

pub fn encode_instance(inst: &SentenceInstance, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    encode_text(&inst.tagged_text, vocab, max_len).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!(
            "instance {}/{}-{}: {msg}",
            inst.pmid, inst.chem.eid, inst.gene.eid
        )),
        other => other,
    })
}
