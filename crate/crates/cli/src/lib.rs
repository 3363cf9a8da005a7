//! Command-line front end for the relation extraction toolkit.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use drugprot_core::corpus::{generate_instances, write_corpus};
use drugprot_core::ensemble::{
    fuse, run_pipeline, train_group_stacker, train_member, EnsembleGroup, EnsembleManifest, PipelineKind, StackerHyper,
};
use drugprot_core::eval::{micro_metrics, read_predictions, write_predictions, MetricsReport};
use drugprot_core::model::HeadKind;
use drugprot_core::synthetic::{generate, SyntheticConfig};
use drugprot_core::tokenizer::{build_vocab, load_vocab};
use drugprot_core::train::{make_partitions, PartitionKind, MAX_EPOCHS};
use drugprot_core::{CorpusBundle, CorpusPaths, Error, ErrorKind, RelationType, Result, SchemeKind};
use log::info;
use serde::Serialize;
use serde_json::json;

use config::{resolve_out_dir, write_json, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "drugprot", version, about = "Chemical-protein relation extraction")]
pub struct Cli {
    /// Output directory; overrides DRUGPROT_OUT_DIR and the config file.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a template corpus with known relations.
    Synth(SynthArgs),
    /// Split sentences and write tagged candidate pairs as JSON lines.
    Preprocess(PreprocessArgs),
    /// Learn a subword vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train one model on one partition.
    Train(TrainArgs),
    /// Train the MLP stacker for one group of five members.
    StackTrain(StackTrainArgs),
    /// Apply a trained run (manifest) to a corpus.
    Fuse(FuseArgs),
    /// Score predictions against gold relations.
    Evaluate(EvaluateArgs),
    /// Train, fuse and score a whole run from one config.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub abstracts: PathBuf,
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub relations: Option<PathBuf>,
}

impl CorpusArgs {
    fn paths(&self) -> CorpusPaths {
        CorpusPaths {
            abstracts: self.abstracts.clone(),
            entities: self.entities.clone(),
            relations: self.relations.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub docs: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000_000)]
    pub pmid_base: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_parser = parse_scheme, default_value = "ANONYMIZE")]
    pub scheme: SchemeKind,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 8000)]
    pub size: usize,
    #[arg(long)]
    pub lowercase: bool,
    /// Vocab file to write; defaults to `<out-dir>/vocab.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunOverrides {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl RunOverrides {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(v) = &self.vocab {
            cfg.vocab = v.clone();
        }
        if let Some(e) = self.epochs {
            cfg.pipeline.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.pipeline.train.optimizer.lr = lr;
        }
        if let Some(s) = self.seed {
            cfg.pipeline.partition_seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// 1-based partition iteration.
    #[arg(long, default_value_t = 1)]
    pub iteration: usize,
    /// 1-based index into the config's member list.
    #[arg(long, default_value_t = 1)]
    pub member: usize,
    #[arg(long, value_parser = parse_partition)]
    pub partition: Option<PartitionKind>,
    #[arg(long, value_parser = parse_head)]
    pub head: Option<HeadKind>,
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: Option<SchemeKind>,
}

#[derive(Debug, Args)]
pub struct StackTrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long, default_value_t = 1)]
    pub iteration: usize,
    /// Member checkpoints in feature order; defaults to `<out-dir>/iter<i>/member{1..5}.ckpt`.
    #[arg(long, num_args = 5, value_delimiter = ',')]
    pub members: Option<Vec<PathBuf>>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<PipelineKind>,
}

fn parse_json_name<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase())).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<SchemeKind, String> {
    parse_json_name(s)
}

fn parse_head(s: &str) -> std::result::Result<HeadKind, String> {
    parse_json_name(s)
}

fn parse_partition(s: &str) -> std::result::Result<PartitionKind, String> {
    parse_json_name(s)
}

fn parse_kind(s: &str) -> std::result::Result<PipelineKind, String> {
    parse_json_name(s)
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::MissingArtifact => 4,
        ErrorKind::Numeric => 5,
    }
}

/// Formats a score with at most three decimals and no trailing zeros.
pub fn short(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() { "0".into() } else { s.to_string() }
}

fn load_corpus_paths(paths: &CorpusPaths) -> Result<CorpusBundle> {
    for p in [Some(&paths.abstracts), Some(&paths.entities), paths.relations.as_ref()].into_iter().flatten() {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    paths.load()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct PreprocessReport {
    documents: usize,
    scheme: SchemeKind,
    instances: usize,
    label_counts: BTreeMap<RelationType, usize>,
    dropped_cross_sentence: usize,
    skipped_overlaps: usize,
    multi_label_pairs: usize,
    output: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&resolve_out_dir(cli.out_dir.as_deref(), None), &a),
        Command::Preprocess(a) => preprocess(&resolve_out_dir(cli.out_dir.as_deref(), None), &a),
        Command::BuildVocab(a) => build_vocab_cmd(&resolve_out_dir(cli.out_dir.as_deref(), None), &a),
        Command::Train(a) => train_cmd(cli.out_dir.as_deref(), &a),
        Command::StackTrain(a) => stack_train_cmd(cli.out_dir.as_deref(), &a),
        Command::Fuse(a) => fuse_cmd(&resolve_out_dir(cli.out_dir.as_deref(), None), &a),
        Command::Evaluate(a) => evaluate_cmd(&resolve_out_dir(cli.out_dir.as_deref(), None), &a),
        Command::Pipeline(a) => pipeline_cmd(cli.out_dir.as_deref(), &a),
    }
}

fn synth(out: &Path, a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_docs: a.docs,
        seed: a.seed,
        pmid_base: a.pmid_base,
        ..Default::default()
    };
    let bundle = generate(&cfg);
    let paths = write_corpus(&bundle, out)?;
    write_json(&out.join("synth_report.json"), &json!({ "config": cfg, "files": paths }))?;
    println!("wrote {} documents to {}", bundle.len(), out.display());
    Ok(())
}

fn preprocess(out: &Path, a: &PreprocessArgs) -> Result<()> {
    let bundle = load_corpus_paths(&a.corpus.paths())?;
    let set = generate_instances(&bundle, a.scheme);
    create_dir(out)?;
    let path = out.join("instances.jsonl");
    let mut text = String::new();
    for inst in &set.instances {
        text.push_str(&serde_json::to_string(inst).expect("serialisable"));
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut label_counts = BTreeMap::new();
    for inst in &set.instances {
        *label_counts.entry(inst.label).or_insert(0) += 1;
    }
    let report = PreprocessReport {
        documents: bundle.len(),
        scheme: a.scheme,
        instances: set.instances.len(),
        label_counts,
        dropped_cross_sentence: set.dropped_cross_sentence,
        skipped_overlaps: set.skipped_overlaps,
        multi_label_pairs: set.multi_label_pairs,
        output: path,
    };
    write_json(&out.join("preprocess_report.json"), &report)?;
    println!("{} instances from {} documents", report.instances, report.documents);
    Ok(())
}

fn build_vocab_cmd(out: &Path, a: &BuildVocabArgs) -> Result<()> {
    let bundle = load_corpus_paths(&a.corpus.paths())?;
    let mut texts = Vec::new();
    for scheme in SchemeKind::ALL {
        texts.extend(generate_instances(&bundle, scheme).instances.into_iter().map(|i| i.tagged_text));
    }
    let vocab = build_vocab(texts.iter().map(String::as_str), a.size, a.lowercase)?;
    let path = a.out.clone().unwrap_or_else(|| out.join("vocab.txt"));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    vocab.save(&path)?;
    write_json(
        &out.join("build_vocab_report.json"),
        &json!({ "vocab": path, "size": vocab.len(), "requested": a.size, "lowercase": a.lowercase }),
    )?;
    println!("wrote {} tokens to {}", vocab.len(), path.display());
    Ok(())
}

fn effective_out_dir(flag: Option<&Path>, cfg: &mut RunConfig) -> PathBuf {
    let dir = resolve_out_dir(flag, cfg.out_dir.as_deref());
    cfg.out_dir = Some(dir.clone());
    dir
}

fn train_cmd(flag: Option<&Path>, a: &TrainArgs) -> Result<()> {
    let mut cfg = a.run.load()?;
    let out = effective_out_dir(flag, &mut cfg);
    let mut spec = cfg
        .pipeline
        .members
        .get(a.member.wrapping_sub(1))
        .cloned()
        .ok_or_else(|| Error::Config(format!("member {} not in config", a.member)))?;
    if let Some(h) = a.head {
        spec.head_kind = h;
    }
    if let Some(s) = a.scheme {
        spec.scheme = s;
    }
    let vocab = load_vocab(&cfg.vocab)?;
    let bundle = load_corpus_paths(&cfg.corpus)?;
    let kind = a.partition.unwrap_or(match cfg.pipeline.kind {
        PipelineKind::Run4Vote => PartitionKind::Fold80_20,
        PipelineKind::Run5Single => PartitionKind::Full100,
        _ => PartitionKind::Split70_20_10,
    });
    let plans = make_partitions(&bundle.documents.keys().cloned().collect(), kind, cfg.pipeline.partition_seed)?;
    let plan = plans
        .iter()
        .find(|p| p.iteration == a.iteration)
        .ok_or_else(|| Error::Config(format!("{kind:?} has no iteration {}", a.iteration)))?;
    let dir = out.join(format!("iter{}", a.iteration));
    let ckpt = dir.join(format!("member{}.ckpt", a.member));
    create_dir(&dir)?;
    write_json(&dir.join(format!("member{}.effective_config.json", a.member)), &cfg)?;
    let report = train_member(&bundle, &vocab, plan, &spec, &cfg.pipeline.encoder, &cfg.pipeline.train, &ckpt)?;
    write_json(&dir.join(format!("member{}.report.json", a.member)), &report)?;
    println!("best epoch {} of {}; checkpoint {}", report.best_epoch, report.epochs.len(), ckpt.display());
    Ok(())
}

fn stack_train_cmd(flag: Option<&Path>, a: &StackTrainArgs) -> Result<()> {
    let mut cfg = a.run.load()?;
    let out = effective_out_dir(flag, &mut cfg);
    let dir = out.join(format!("iter{}", a.iteration));
    let members = a
        .members
        .clone()
        .unwrap_or_else(|| (1..=5).map(|j| dir.join(format!("member{j}.ckpt"))).collect());
    let vocab = load_vocab(&cfg.vocab)?;
    let bundle = load_corpus_paths(&cfg.corpus)?;
    let group = EnsembleGroup::load(a.iteration, &members)?;
    let plans = make_partitions(
        &bundle.documents.keys().cloned().collect(),
        PartitionKind::Split70_20_10,
        cfg.pipeline.partition_seed,
    )?;
    let plan = plans
        .iter()
        .find(|p| p.iteration == a.iteration)
        .ok_or_else(|| Error::Config(format!("no partition iteration {}", a.iteration)))?;
    create_dir(&dir)?;
    write_json(&dir.join("stacker.effective_config.json"), &cfg)?;
    let hyper = StackerHyper {
        seed: drugprot_core::train::derive_seed(cfg.pipeline.stacker.seed, a.iteration as u64),
        ..cfg.pipeline.stacker.clone()
    };
    let path = dir.join("stacker.ckpt");
    let report = train_group_stacker(&bundle, &vocab, &group, &plan.ensemble_docs, &hyper, &path)?;
    write_json(&dir.join("stacker.report.json"), &report)?;
    println!("stacker best epoch {}; checkpoint {}", report.best_epoch, path.display());
    Ok(())
}

fn fuse_cmd(out: &Path, a: &FuseArgs) -> Result<()> {
    let manifest = EnsembleManifest::load(&a.manifest)?;
    let vocab = load_vocab(&a.vocab)?;
    let bundle = load_corpus_paths(&a.corpus.paths())?;
    let fused = fuse(&manifest, &bundle, &vocab)?;
    let pred = out.join("predictions.tsv");
    write_predictions(&pred, &fused.records)?;
    write_json(
        &out.join("fuse_report.json"),
        &json!({ "kind": manifest.kind, "predictions": pred, "records": fused.records.len(), "votes": fused.votes }),
    )?;
    println!("wrote {} predictions to {}", fused.records.len(), pred.display());
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    print!("{}", m.to_table());
    println!(
        "P={} R={} F1={}",
        short(m.overall.precision),
        short(m.overall.recall),
        short(m.overall.f1)
    );
}

fn evaluate_cmd(out: &Path, a: &EvaluateArgs) -> Result<()> {
    let gold = read_predictions(&a.gold)?;
    let pred = read_predictions(&a.pred)?;
    let metrics = micro_metrics(&gold, &pred);
    write_json(&out.join("metrics.json"), &metrics)?;
    print_metrics(&metrics);
    Ok(())
}

fn pipeline_cmd(flag: Option<&Path>, a: &PipelineArgs) -> Result<()> {
    let mut cfg = a.run.load()?;
    if let Some(k) = a.kind {
        cfg.pipeline.kind = k;
        cfg.validate()?;
    }
    let out = effective_out_dir(flag, &mut cfg);
    let vocab = load_vocab(&cfg.vocab)?;
    let bundle = load_corpus_paths(&cfg.corpus)?;
    create_dir(&out)?;
    write_json(&out.join("effective_config.json"), &cfg)?;
    info!("running {:?} into {}", cfg.pipeline.kind, out.display());
    let trained = run_pipeline(&cfg.pipeline, &bundle, &vocab, &out)?;
    let mut report = json!({
        "kind": cfg.pipeline.kind,
        "manifest": trained.manifest_path,
        "members": trained.member_reports.iter().map(|(p, r)| json!({"checkpoint": p, "best_epoch": r.best_epoch, "dev_micro_f1": r.best_dev_f1()})).collect::<Vec<_>>(),
        "max_epochs": MAX_EPOCHS,
    });
    if let Some(test) = &cfg.test_corpus {
        let test_bundle = load_corpus_paths(test)?;
        let fused = fuse(&trained.manifest, &test_bundle, &vocab)?;
        let pred = out.join("predictions.tsv");
        write_predictions(&pred, &fused.records)?;
        report["predictions"] = json!(pred);
        if test.relations.is_some() {
            let gold: Vec<_> = test_bundle.all_relations().cloned().collect();
            let metrics = micro_metrics(&gold, &fused.records);
            fs::write(out.join("metrics.txt"), metrics.to_table()).map_err(|e| Error::Io {
                path: out.join("metrics.txt"),
                source: e,
            })?;
            write_json(&out.join("metrics.json"), &metrics)?;
            print_metrics(&metrics);
            report["metrics"] = serde_json::to_value(&metrics).expect("serialisable");
        }
    }
    write_json(&out.join("pipeline_report.json"), &report)?;
    println!("manifest {}", trained.manifest_path.display());
    Ok(())
}
