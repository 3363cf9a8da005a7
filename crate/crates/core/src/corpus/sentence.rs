use serde::{Deserialize, Serialize};

use super::{Document, EntityMention};

/// Bumped whenever the boundary rules below change.
pub const SPLITTER_VERSION: u32 = 1;

/// Tokens ending in a period that never close a sentence (compared lowercase).
pub const ABBREVIATIONS: &[&str] = &[
    "approx.", "e.g.", "i.e.", "fig.", "figs.", "al.", "vs.", "cf.", "ca.", "etc.", "resp.",
    "ref.", "refs.", "no.", "nos.", "eq.", "sp.", "spp.", "dr.", "prof.", "mr.", "mrs.", "ms.",
    "inc.", "ltd.", "co.", "st.", "vol.", "viz.", "min.", "max.", "conc.", "wt.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub pmid: String,
    /// Char offset into the document text.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

impl Sentence {
    pub fn contains(&self, m: &EntityMention) -> bool {
        self.start <= m.start && m.end <= self.end
    }
}

/// A gap between two sentences: the previous one ends at `end`, the next
/// starts at `next`.
#[derive(Debug, Clone, Copy)]
struct Cut {
    end: usize,
    next: usize,
}

fn is_abbreviation(chars: &[char], seg_start: usize, dot: usize) -> bool {
    let mut from = dot;
    while from > seg_start && !chars[from - 1].is_whitespace() {
        from -= 1;
    }
    let word: String = chars[from..=dot]
        .iter()
        .skip_while(|c| matches!(c, '(' | '[' | '"' | '\''))
        .flat_map(|c| c.to_lowercase())
        .collect();
    ABBREVIATIONS.contains(&word.as_str())
}

fn segment_cuts(chars: &[char], seg_start: usize, seg_end: usize, cuts: &mut Vec<Cut>) {
    let mut depth = 0usize;
    for i in seg_start..seg_end {
        match chars[i] {
            '(' | '[' => depth += 1,
            ')' | ']' => depth = depth.saturating_sub(1),
            '.' | '!' | '?' if depth == 0 => {
                let mut k = i + 1;
                while k < seg_end && chars[k].is_whitespace() {
                    k += 1;
                }
                if k == i + 1 || k >= seg_end {
                    continue;
                }
                if !(chars[k].is_uppercase() || chars[k].is_ascii_digit()) {
                    continue;
                }
                if chars[i] == '.' && is_abbreviation(chars, seg_start, i) {
                    continue;
                }
                cuts.push(Cut { end: i + 1, next: k });
            }
            _ => {}
        }
    }
}

/// Splits a document into sentences.
///
/// The title is always its own segment. Inside a segment a boundary follows
/// `.`, `!` or `?` when whitespace and then an uppercase letter or digit come
/// next, unless the token is a known abbreviation or the mark sits inside
/// parentheses. Boundaries that would cut through one of `mentions` are
/// dropped, merging the neighbouring sentences.
pub fn split_sentences(doc: &Document, mentions: &[EntityMention]) -> Vec<Sentence> {
    let chars: Vec<char> = doc.full_text.chars().collect();
    let title_end = doc.abstract_start() - 1;
    let mut cuts = Vec::new();
    segment_cuts(&chars, 0, title_end, &mut cuts);
    cuts.push(Cut {
        end: title_end,
        next: title_end + 1,
    });
    segment_cuts(&chars, title_end + 1, chars.len(), &mut cuts);

    cuts.retain(|cut| !mentions.iter().any(|m| m.start < cut.next && m.end > cut.end));

    let mut spans = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for cut in &cuts {
        spans.push((start, cut.end));
        start = cut.next;
    }
    spans.push((start, chars.len()));

    spans
        .into_iter()
        .filter_map(|(mut s, mut e)| {
            while s < e && chars[s].is_whitespace() {
                s += 1;
            }
            while e > s && chars[e - 1].is_whitespace() {
                e -= 1;
            }
            (s < e).then(|| Sentence {
                pmid: doc.pmid.clone(),
                start: s,
                end: e,
                text: doc.slice(s, e).to_string(),
            })
        })
        .collect()
}
