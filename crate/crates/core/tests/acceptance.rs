//! One test per acceptance criterion. Each prints a single PASS/FAIL line.
//!
//! Run with `cargo test --release -p drugprot-core --test acceptance -- --nocapture`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use drugprot_core::corpus::{generate_instances, tag_scheme1, tag_scheme2, EntityType, Sentence};
use drugprot_core::ensemble::{
    fuse, majority_vote, run_pipeline, EncoderSettings, MemberSpec, PipelineConfig, PipelineKind, StackerHyper,
};
use drugprot_core::eval::{micro_metrics, write_predictions, MetricsReport, PredictionRecord};
use drugprot_core::model::{backward_gradients, init_params, HeadKind, Parameters, Tensor};
use drugprot_core::optim::{AdamW, AdamWConfig};
use drugprot_core::synthetic::{generate, SyntheticConfig};
use drugprot_core::tokenizer::{build_vocab, Vocabulary};
use drugprot_core::train::{class_weights_from_counts, TrainHyper};
use drugprot_core::{CorpusBundle, EntityMention, RelationGold, RelationType, SchemeKind};
use rand::seq::SliceRandom;
use rand::Rng;

fn verdict(n: u32, name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("criterion {n} {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} {name} failed: {detail}");
}

fn mention(eid: &str, etype: EntityType, text: &str, surface: &str) -> EntityMention {
    let start = text.find(surface).unwrap();
    EntityMention {
        pmid: "1".into(),
        eid: eid.into(),
        etype,
        start,
        end: start + surface.chars().count(),
        surface: surface.into(),
    }
}

#[test]
fn criterion_1_tagging_fidelity() {
    let t = Instant::now();
    let text = "human type 12 RDH reduces dihydrotestosterone to androstanediol";
    let sentence = Sentence {
        pmid: "1".into(),
        start: 0,
        end: text.chars().count(),
        text: text.into(),
    };
    let chem = mention("T1", EntityType::Chemical, text, "human type 12 RDH");
    let gene = mention("T2", EntityType::Gene, text, "androstanediol");
    let s1 = tag_scheme1(&sentence, &chem, &gene, &[]).unwrap();
    let s2 = tag_scheme2(&sentence, &chem, &gene).unwrap();
    let want1 = "DRUG reduces dihydrotestosterone to PROTEIN";
    let want2 = "<DRUG-B> human type 12 RDH <DRUG-E> reduces dihydrotestosterone to <PROTEIN-B> androstanediol <PROTEIN-E>";
    let elapsed = t.elapsed();
    verdict(
        1,
        "tagging fidelity",
        s1 == want1 && s2 == want2 && elapsed < Duration::from_secs(1),
        format!("scheme1={s1:?} scheme2={s2:?} in {elapsed:?}"),
    );
}

#[test]
fn criterion_2_gradient_check() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for (k, kind) in HeadKind::ALL.into_iter().enumerate() {
        let cfg = tiny_config(kind, 40 + k as u64);
        let params = init_params(&cfg).unwrap();
        let mut r = rng(500 + k as u64);
        for b in 0..3 {
            let batch = random_batch(&mut r, 3, &cfg);
            let weights = random_weights(&mut r);
            let refs: Vec<_> = batch.iter().map(|(s, l)| (s, *l)).collect();
            let (_, grads) = backward_gradients(&params, &refs, &weights).unwrap();
            let numeric = finite_difference(&params, &batch, &weights, 1e-5);
            for (name, err) in max_relative_errors(&grads, &numeric) {
                if err > worst {
                    worst = err;
                    worst_at = format!("{kind:?} batch {b} {name}");
                }
            }
        }
    }
    let elapsed = t.elapsed();
    verdict(
        2,
        "gradient check",
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max relative error {worst:.2e} at {worst_at}, {elapsed:.1?}"),
    );
}

fn brute_force_vote(labels: &[RelationType]) -> RelationType {
    let counts: Vec<usize> = RelationType::ALL
        .iter()
        .map(|c| labels.iter().filter(|l| *l == c).count())
        .collect();
    let top = *counts.iter().max().unwrap();
    let leaders: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == top).collect();
    if leaders.len() == 1 {
        RelationType::ALL[leaders[0]]
    } else {
        RelationType::None
    }
}

#[test]
fn criterion_3_voting_oracle() {
    let t = Instant::now();
    let alphabet = [
        RelationType::None,
        RelationType::Inhibitor,
        RelationType::Agonist,
        RelationType::Substrate,
    ];
    let mut mismatches = 0;
    let mut checked = 0;
    for code in 0..4usize.pow(5) {
        let labels: Vec<RelationType> = (0..5).map(|i| alphabet[(code >> (2 * i)) & 3]).collect();
        if majority_vote(&labels).unwrap() != brute_force_vote(&labels) {
            mismatches += 1;
        }
        checked += 1;
    }
    let elapsed = t.elapsed();
    verdict(
        3,
        "voting oracle",
        checked == 1024 && mismatches == 0 && elapsed < Duration::from_secs(1),
        format!("{checked} tuples, {mismatches} mismatches, {elapsed:?}"),
    );
}

#[test]
fn criterion_4_class_weight_ratio() {
    // Training-split counts per positive label, in label order after NONE.
    let positives = [1394, 652, 27, 10, 931, 2061, 1297, 1351, 5277, 861, 904, 1921, 25];
    let mut counts = vec![40_000];
    counts.extend(positives);
    let w = class_weights_from_counts(&counts);
    let ratio = w[RelationType::Agonist.index()] / w[RelationType::Inhibitor.index()];
    let want = 5277.0 / 652.0;
    verdict(
        4,
        "class-weight ratio",
        (ratio - want).abs() < 1e-9,
        format!("w_AGONIST/w_INHIBITOR = {ratio:.12}, expected {want:.12}"),
    );
}

fn rec(pmid: &str, t: RelationType, a: &str, b: &str) -> PredictionRecord {
    RelationGold {
        pmid: pmid.into(),
        rtype: t,
        arg1: a.into(),
        arg2: b.into(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn criterion_5_metrics_oracle() {
    use RelationType::*;
    let mut failures = Vec::new();

    // 1 of 2 predictions correct, 1 of 3 gold found.
    let gold = [rec("1", Inhibitor, "T1", "T2"), rec("1", Agonist, "T3", "T4"), rec("2", Substrate, "T1", "T5")];
    let pred = [rec("1", Inhibitor, "T1", "T2"), rec("2", Inhibitor, "T1", "T5")];
    let m = micro_metrics(&gold, &pred);
    if !(close(m.overall.precision, 0.5) && close(m.overall.recall, 1.0 / 3.0) && close(m.overall.f1, 0.4)) {
        failures.push(format!("overall {:?}", m.overall));
    }
    let inh = m.per_type[&Inhibitor];
    if (inh.tp, inh.fp, inh.fn_) != (1, 1, 0) || !close(inh.f1, 2.0 / 3.0) {
        failures.push(format!("INHIBITOR {inh:?}"));
    }
    for t in [Agonist, Substrate] {
        let s = m.per_type[&t];
        if (s.tp, s.fp, s.fn_) != (0, 0, 1) || s.f1 != 0.0 {
            failures.push(format!("{t:?} {s:?}"));
        }
    }

    // Duplicates collapse; an empty prediction set scores zero.
    let dup = [pred[0].clone(), pred[0].clone(), pred[1].clone()];
    if micro_metrics(&gold, &dup) != m {
        failures.push("duplicates changed the scores".into());
    }
    let empty = micro_metrics(&gold, &[]);
    if (empty.overall.precision, empty.overall.recall, empty.overall.f1) != (0.0, 0.0, 0.0) {
        failures.push(format!("empty {:?}", empty.overall));
    }

    // Two types, hand counts: ANTAGONIST tp=2 fp=0 fn=1, PART-OF tp=1 fp=2 fn=0.
    let gold = [
        rec("5", Antagonist, "T1", "T2"),
        rec("5", Antagonist, "T1", "T3"),
        rec("6", Antagonist, "T4", "T2"),
        rec("6", PartOf, "T4", "T5"),
    ];
    let pred = [
        rec("5", Antagonist, "T1", "T2"),
        rec("5", Antagonist, "T1", "T3"),
        rec("6", PartOf, "T4", "T5"),
        rec("6", PartOf, "T4", "T2"),
        rec("7", PartOf, "T1", "T2"),
    ];
    let m = micro_metrics(&gold, &pred);
    let (p, r) = (3.0 / 5.0, 3.0 / 4.0);
    if !(close(m.overall.precision, p) && close(m.overall.recall, r) && close(m.overall.f1, 2.0 * p * r / (p + r))) {
        failures.push(format!("two-type overall {:?}", m.overall));
    }
    if !close(m.per_type[&Antagonist].f1, 0.8) || !close(m.per_type[&PartOf].f1, 0.5) {
        failures.push("two-type per-type F1".into());
    }

    // F1 = 1 exactly when the sets coincide.
    let mut r = rng(5);
    let universe: Vec<PredictionRecord> = (0..6)
        .flat_map(|d| (1..4).map(move |c| (d, c)))
        .map(|(d, c)| rec(&format!("{}", 100 + d), RelationType::from_index(1 + (d + c) % 13).unwrap(), &format!("T{c}"), "T9"))
        .collect();
    let mut iff_ok = 0;
    for i in 0..100 {
        let n = r.gen_range(1..=universe.len());
        let gold: Vec<_> = universe.choose_multiple(&mut r, n).cloned().collect();
        let pred: Vec<_> = if i % 2 == 0 {
            let mut p = gold.clone();
            p.shuffle(&mut r);
            p
        } else {
            let k = r.gen_range(0..=universe.len());
            universe.choose_multiple(&mut r, k).cloned().collect()
        };
        let equal = gold.iter().collect::<HashSet<_>>() == pred.iter().collect::<HashSet<_>>();
        let f1 = micro_metrics(&gold, &pred).overall.f1;
        if equal == (f1 == 1.0) {
            iff_ok += 1;
        }
    }
    if iff_ok != 100 {
        failures.push(format!("F1=1 iff equal held on {iff_ok}/100 pairs"));
    }

    verdict(
        5,
        "metrics oracle",
        failures.is_empty(),
        if failures.is_empty() { "hand cases and 100 random pairs".to_string() } else { failures.join("; ") },
    );
}

fn vocab_for(bundle: &CorpusBundle, size: usize) -> Vocabulary {
    let mut texts = Vec::new();
    for scheme in SchemeKind::ALL {
        texts.extend(generate_instances(bundle, scheme).instances.into_iter().map(|i| i.tagged_text));
    }
    build_vocab(texts.iter().map(String::as_str), size, false).unwrap()
}

fn member(head_kind: HeadKind, scheme: SchemeKind, class_weighted: bool) -> MemberSpec {
    MemberSpec {
        head_kind,
        scheme,
        class_weighted,
        seed: 1,
    }
}

struct RunScore {
    fused: f64,
    members: Vec<f64>,
}

impl RunScore {
    fn best_member(&self) -> f64 {
        self.members.iter().copied().fold(0.0, f64::max)
    }
}

fn run_and_score(cfg: &PipelineConfig, train: &CorpusBundle, test: &CorpusBundle, vocab: &Vocabulary, dir: &Path) -> RunScore {
    let gold: Vec<_> = test.all_relations().cloned().collect();
    let out = run_pipeline(cfg, train, vocab, dir).unwrap();
    let fused = fuse(&out.manifest, test, vocab).unwrap();
    RunScore {
        fused: micro_metrics(&gold, &fused.records).overall.f1,
        members: fused
            .member_records
            .iter()
            .map(|(_, r)| micro_metrics(&gold, r).overall.f1)
            .collect(),
    }
}

#[test]
fn criterion_6_synthetic_end_to_end() {
    use HeadKind::*;
    use SchemeKind::*;
    let t = Instant::now();
    let train = generate(&SyntheticConfig::default());
    let test = generate(&SyntheticConfig {
        n_docs: 500,
        seed: 99,
        pmid_base: 90_000_000,
        ..Default::default()
    });
    let vocab = vocab_for(&train, 600);
    let dir = tempfile::tempdir().unwrap();
    let base = PipelineConfig {
        kind: PipelineKind::Run3StackVote,
        encoder: EncoderSettings::default(),
        members: vec![
            member(Cls, Anonymize, false),
            member(Lstm, Anonymize, true),
            member(Attn, Anonymize, false),
            member(Cls, Markers, true),
            member(Attn, Anonymize, true),
        ],
        partition_seed: 3,
        train: TrainHyper::default(),
        stacker: StackerHyper::default(),
    };
    assert_eq!((base.encoder.layers, base.encoder.hidden, base.train.epochs), (2, 64, 10));

    let run3 = run_and_score(&base, &train, &test, &vocab, &dir.path().join("run3"));
    let run4_cfg = PipelineConfig {
        kind: PipelineKind::Run4Vote,
        members: vec![member(Cls, Anonymize, false)],
        ..base.clone()
    };
    let run4 = run_and_score(&run4_cfg, &train, &test, &vocab, &dir.path().join("run4"));
    let elapsed = t.elapsed();

    // The first Run 3 member is a single desk model trained on one split.
    let single = run3.members[0];
    let ok = single >= 0.95
        && run3.fused >= run3.best_member() - 0.02
        && run4.fused >= run4.best_member() - 0.02
        && elapsed < Duration::from_secs(30 * 60);
    verdict(
        6,
        "synthetic end-to-end",
        ok,
        format!(
            "single {single:.4}; run3 {:.4} vs best member {:.4}; run4 {:.4} vs best member {:.4}; {:.0}s",
            run3.fused,
            run3.best_member(),
            run4.fused,
            run4.best_member(),
            elapsed.as_secs_f64()
        ),
    );
}

fn collect_files(dir: &Path, ext: &str, out: &mut Vec<(String, Vec<u8>)>, root: &Path) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, ext, out, root);
        } else if p.extension().is_some_and(|e| e == ext) {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
}

#[test]
fn criterion_7_determinism() {
    use HeadKind::*;
    use SchemeKind::*;
    let train = generate(&SyntheticConfig {
        n_docs: 60,
        seed: 7,
        ..Default::default()
    });
    let test = generate(&SyntheticConfig {
        n_docs: 20,
        seed: 8,
        pmid_base: 50_000_000,
        ..Default::default()
    });
    let vocab = vocab_for(&train, 300);
    let cfg = PipelineConfig {
        kind: PipelineKind::Run1Stack,
        encoder: EncoderSettings {
            layers: 1,
            heads: 2,
            hidden: 16,
            ffn: 32,
            max_len: 64,
        },
        members: vec![
            member(Cls, Anonymize, false),
            member(Lstm, Markers, true),
            member(Attn, Anonymize, true),
            member(Cls, Markers, false),
            member(Attn, Markers, false),
        ],
        partition_seed: 11,
        train: TrainHyper {
            epochs: 2,
            ..Default::default()
        },
        stacker: StackerHyper {
            epochs: 3,
            hidden: 32,
            ..Default::default()
        },
    };
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let out = run_pipeline(&cfg, &train, &vocab, &root).unwrap();
        let fused = fuse(&out.manifest, &test, &vocab).unwrap();
        write_predictions(&root.join("predictions.tsv"), &fused.records).unwrap();
        let mut files = Vec::new();
        collect_files(&root, "ckpt", &mut files, &root);
        collect_files(&root, "tsv", &mut files, &root);
        let reports: Vec<_> = out
            .member_reports
            .iter()
            .map(|(_, r)| {
                let mut r = r.without_timing();
                r.checkpoint = r.checkpoint.map(|p| p.strip_prefix(&root).unwrap().to_path_buf());
                r
            })
            .collect();
        runs.push((files, reports));
    }
    let (files_a, reports_a) = &runs[0];
    let (files_b, reports_b) = &runs[1];
    let differing: Vec<&str> = files_a
        .iter()
        .zip(files_b)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    let ok = files_a.len() == 7 && files_a.len() == files_b.len() && differing.is_empty() && reports_a == reports_b;
    verdict(
        7,
        "determinism",
        ok,
        format!(
            "{} files compared (5 members, stacker, predictions), differing: {differing:?}, reports equal: {}",
            files_a.len(),
            reports_a == reports_b
        ),
    );
}

#[test]
fn criterion_8_report_shape() {
    use RelationType::*;
    let gold = [rec("1", Inhibitor, "T1", "T2"), rec("1", Agonist, "T3", "T4"), rec("2", Substrate, "T1", "T5")];
    let pred = [rec("1", Inhibitor, "T1", "T2"), rec("2", Inhibitor, "T1", "T5")];
    let m = micro_metrics(&gold, &pred);
    let table = m.to_table();
    let lines: Vec<&str> = table.lines().collect();
    let positive: Vec<RelationType> = RelationType::ALL.into_iter().filter(|t| t.is_positive()).collect();
    let mut ok = lines.len() == 16
        && lines[0].split_whitespace().take(4).eq(["Relation", "P", "R", "F1"])
        && lines.last().unwrap().starts_with("Overall (micro)");
    for (line, t) in lines[1..14].iter().zip(&positive) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        ok &= cols[0] == t.name() && cols[1..4].iter().all(|c| c.parse::<f64>().is_ok());
    }
    let parsed: MetricsReport = serde_json::from_str(&m.to_json()).unwrap();
    ok &= parsed == m && parsed.per_type.len() == 13;
    println!("{table}");
    verdict(8, "report shape", ok, format!("{} table lines, {} per-type rows", lines.len(), parsed.per_type.len()));
}

#[derive(Clone)]
struct Scalar(Tensor);

impl Parameters for Scalar {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.0)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.0]
    }
}

#[test]
fn criterion_9_adamw_scalar_oracle() {
    // Minimise (w - 3)^2 from w = 0.5.
    let (lr, b1, b2, eps, wd) = (0.05, 0.9, 0.999, 1e-8, 0.01);
    let grad = |w: f64| 2.0 * (w - 3.0);

    let mut reference = Vec::new();
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for t in 1..=20 {
        let g = grad(w);
        w *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        w -= lr * mhat / (vhat.sqrt() + eps);
        reference.push(w);
    }

    let mut params = Scalar(Tensor::filled(&[1], 0.5));
    let mut opt = AdamW::new(
        AdamWConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
        },
        &params,
    );
    let mut worst = 0.0f64;
    for want in &reference {
        let g = Scalar(Tensor::filled(&[1], grad(params.0.data[0])));
        opt.step(&mut params, &g).unwrap();
        worst = worst.max((params.0.data[0] - want).abs());
    }
    verdict(
        9,
        "AdamW scalar oracle",
        worst < 1e-12 && opt.step == 20,
        format!("20 steps, max |w - reference| = {worst:.1e}, final w = {:.9}", params.0.data[0]),
    );
}
