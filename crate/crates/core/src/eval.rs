//! Submission-format prediction files and micro-averaged scoring.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{eid_key, parse_relation_row, RelationGold, RelationType};
use crate::error::{Error, Result};

/// A predicted relation; same shape as a gold row.
pub type PredictionRecord = RelationGold;

type EidKey = (String, u64, String);

fn sort_key(r: &PredictionRecord) -> (&str, EidKey, EidKey, usize) {
    (&r.pmid, eid_key(&r.arg1), eid_key(&r.arg2), r.rtype.index())
}

pub fn sort_records(records: &mut [PredictionRecord]) {
    records.sort_by_cached_key(|r| {
        let (p, a, b, t) = sort_key(r);
        (p.to_string(), a, b, t)
    });
}

pub fn format_record(r: &PredictionRecord) -> String {
    format!("{}\t{}\tArg1:{}\tArg2:{}", r.pmid, r.rtype, r.arg1, r.arg2)
}

/// Sorted, deduplicated TSV text. NONE records are rejected.
pub fn predictions_to_string(records: &[PredictionRecord]) -> Result<String> {
    if let Some(r) = records.iter().find(|r| !r.rtype.is_positive()) {
        return Err(Error::Data(format!("NONE is not a writable relation ({} {} {})", r.pmid, r.arg1, r.arg2)));
    }
    let mut sorted = dedup(records.to_vec()).0;
    sort_records(&mut sorted);
    let mut out = String::new();
    for r in &sorted {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let text = predictions_to_string(records)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dedup(records: Vec<PredictionRecord>) -> (Vec<PredictionRecord>, usize) {
    let mut seen = HashSet::new();
    let before = records.len();
    let out: Vec<_> = records.into_iter().filter(|r| seen.insert(r.clone())).collect();
    let dropped = before - out.len();
    (out, dropped)
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_relation_row(line).map_err(|msg| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        records.push(rec);
    }
    let (records, dropped) = dedup(records);
    if dropped > 0 {
        warn!("{}: dropped {dropped} duplicate rows", path.display());
    }
    Ok(records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Scores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Scores {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Scores,
    pub per_type: BTreeMap<RelationType, Scores>,
}

/// Exact tuple matching over deduplicated gold and predicted sets.
pub fn micro_metrics(gold: &[PredictionRecord], pred: &[PredictionRecord]) -> MetricsReport {
    let gold: HashSet<&PredictionRecord> = gold.iter().collect();
    let pred: HashSet<&PredictionRecord> = pred.iter().collect();
    let mut counts: BTreeMap<RelationType, (usize, usize, usize)> = BTreeMap::new();
    for t in RelationType::ALL.iter().filter(|t| t.is_positive()) {
        counts.insert(*t, (0, 0, 0));
    }
    for r in &pred {
        let c = counts.entry(r.rtype).or_default();
        if gold.contains(r) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for r in gold.difference(&pred) {
        counts.entry(r.rtype).or_default().2 += 1;
    }
    let (tp, fp, fn_) = counts
        .values()
        .fold((0, 0, 0), |acc, c| (acc.0 + c.0, acc.1 + c.1, acc.2 + c.2));
    MetricsReport {
        overall: Scores::from_counts(tp, fp, fn_),
        per_type: counts
            .into_iter()
            .map(|(t, (tp, fp, fn_))| (t, Scores::from_counts(tp, fp, fn_)))
            .collect(),
    }
}

impl MetricsReport {
    /// Plain-text table: one row per relation type, then the micro average.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}",
            "Relation", "P", "R", "F1", "TP", "FP", "FN"
        );
        let row = |out: &mut String, name: &str, s: &Scores| {
            let _ = writeln!(
                out,
                "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>6} {:>6} {:>6}",
                name, s.precision, s.recall, s.f1, s.tp, s.fp, s.fn_
            );
        };
        for (t, s) in &self.per_type {
            row(&mut out, t.name(), s);
        }
        let _ = writeln!(out, "{}", "-".repeat(66));
        row(&mut out, "Overall (micro)", &self.overall);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pmid: &str, t: RelationType, a: &str, b: &str) -> PredictionRecord {
        RelationGold {
            pmid: pmid.into(),
            rtype: t,
            arg1: a.into(),
            arg2: b.into(),
        }
    }

    #[test]
    fn line_format() {
        let r = rec("10064839", RelationType::Inhibitor, "T1", "T5");
        assert_eq!(format_record(&r), "10064839\tINHIBITOR\tArg1:T1\tArg2:T5");
    }

    #[test]
    fn writing_sorts_and_dedups() {
        let rs = vec![
            rec("2", RelationType::Agonist, "T10", "T3"),
            rec("1", RelationType::Substrate, "T2", "T9"),
            rec("2", RelationType::Agonist, "T2", "T3"),
            rec("1", RelationType::Substrate, "T2", "T9"),
        ];
        let text = predictions_to_string(&rs).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            [
                "1\tSUBSTRATE\tArg1:T2\tArg2:T9",
                "2\tAGONIST\tArg1:T2\tArg2:T3",
                "2\tAGONIST\tArg1:T10\tArg2:T3"
            ]
        );
        assert!(predictions_to_string(&[rec("1", RelationType::None, "T1", "T2")]).is_err());
    }

    #[test]
    fn reading_dedups_and_reports_bad_rows() {
        let p = Path::new("p.tsv");
        let text = "1\tINHIBITOR\tArg1:T1\tArg2:T2\n1\tINHIBITOR\tArg1:T1\tArg2:T2\n";
        assert_eq!(parse_predictions(text, p).unwrap().len(), 1);
        let err = parse_predictions("1\tINHIBITOR\tArg1:T1\n", p).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 1, .. }));
    }

    #[test]
    fn empty_prediction_scores_zero() {
        let gold = vec![rec("1", RelationType::Inhibitor, "T1", "T2")];
        let m = micro_metrics(&gold, &[]);
        assert_eq!((m.overall.precision, m.overall.recall, m.overall.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.overall.fn_, 1);
    }

    #[test]
    fn table_has_all_types_and_overall() {
        let m = micro_metrics(&[], &[]);
        let table = m.to_table();
        assert_eq!(table.lines().count(), 1 + 13 + 2);
        assert!(table.contains("SUBSTRATE_PRODUCT-OF"));
        assert!(table.contains("Overall (micro)"));
        let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
        assert!(json["per_type"]["INHIBITOR"]["fn"].is_number());
    }
}
