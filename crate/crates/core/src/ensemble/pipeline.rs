use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_instances, CorpusBundle, InstanceKey, RelationType, SchemeKind};
use crate::error::{Error, Result};
use crate::eval::PredictionRecord;
use crate::model::{predict, EncoderConfig, HeadKind, Prediction};
use crate::tokenizer::Vocabulary;
use crate::train::{
    derive_seed, encode_instances, make_partitions, records_from_labels, train_model, EncodedInstance, PartitionKind,
    PartitionPlan, TrainHyper, TrainReport,
};

use super::{
    load_stacker, majority_vote, save_stacker, stacker_predict, train_stacker, EnsembleGroup, InstanceViews, Member,
    StackerHyper, StackerReport, VoteRecord, GROUP_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineKind {
    /// One group of five members fused by one stacker.
    #[serde(rename = "RUN1_STACK")]
    Run1Stack,
    /// Five groups, one per partition, each with its stacker; stacker labels are voted.
    #[serde(rename = "RUN3_STACK_VOTE")]
    Run3StackVote,
    /// One architecture trained on five folds; labels are voted.
    #[serde(rename = "RUN4_VOTE")]
    Run4Vote,
    /// A single model trained on all documents.
    #[serde(rename = "RUN5_SINGLE")]
    Run5Single,
}

impl PipelineKind {
    fn partition(self) -> PartitionKind {
        match self {
            PipelineKind::Run1Stack | PipelineKind::Run3StackVote => PartitionKind::Split70_20_10,
            PipelineKind::Run4Vote => PartitionKind::Fold80_20,
            PipelineKind::Run5Single => PartitionKind::Full100,
        }
    }

    fn roster_size(self) -> usize {
        match self {
            PipelineKind::Run1Stack | PipelineKind::Run3StackVote => GROUP_SIZE,
            PipelineKind::Run4Vote | PipelineKind::Run5Single => 1,
        }
    }

    fn uses_stacker(self) -> bool {
        matches!(self, PipelineKind::Run1Stack | PipelineKind::Run3StackVote)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSpec {
    pub head_kind: HeadKind,
    pub scheme: SchemeKind,
    #[serde(default)]
    pub class_weighted: bool,
    #[serde(default)]
    pub seed: u64,
}

/// Encoder shape shared by every member; vocabulary size comes from the vocab.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        let desk = EncoderConfig::desk(1, HeadKind::Cls, 0);
        EncoderSettings {
            layers: desk.layers,
            heads: desk.heads,
            hidden: desk.hidden,
            ffn: desk.ffn,
            max_len: desk.max_len,
        }
    }
}

impl EncoderSettings {
    pub fn config(&self, vocab_size: usize, head_kind: HeadKind, seed: u64) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            hidden: self.hidden,
            ffn: self.ffn,
            max_len: self.max_len,
            vocab_size,
            head_kind,
            n_classes: RelationType::COUNT,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    #[serde(default)]
    pub encoder: EncoderSettings,
    /// Five specs for stacked runs, one for voting and single-model runs.
    pub members: Vec<MemberSpec>,
    #[serde(default)]
    pub partition_seed: u64,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub stacker: StackerHyper,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let want = self.kind.roster_size();
        if self.members.len() != want {
            return Err(Error::Config(format!(
                "{:?} needs {want} member spec(s), got {}",
                self.kind,
                self.members.len()
            )));
        }
        self.train.validate()?;
        self.encoder.config(1, HeadKind::Cls, 0).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestGroup {
    pub iteration: usize,
    pub members: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stacker: Option<PathBuf>,
}

/// Which checkpoints make up a run, in fusion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub kind: PipelineKind,
    pub groups: Vec<ManifestGroup>,
}

impl EnsembleManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: EnsembleManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let (groups, members) = match self.kind {
            PipelineKind::Run1Stack => (1, GROUP_SIZE),
            PipelineKind::Run3StackVote => (GROUP_SIZE, GROUP_SIZE),
            PipelineKind::Run4Vote => (1, GROUP_SIZE),
            PipelineKind::Run5Single => (1, 1),
        };
        if self.groups.len() != groups || self.groups.iter().any(|g| g.members.len() != members) {
            return Err(Error::Config(format!(
                "{:?} manifest needs {groups} group(s) of {members} member(s)",
                self.kind
            )));
        }
        if self.kind.uses_stacker() {
            if let Some(g) = self.groups.iter().find(|g| g.stacker.is_none()) {
                return Err(Error::Config(format!(
                    "{:?} manifest group {} has no stacker",
                    self.kind, g.iteration
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serialisable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn encode_split(bundle: &CorpusBundle, docs: &BTreeSet<String>, scheme: SchemeKind, vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedInstance>> {
    let set = generate_instances(&bundle.subset(docs), scheme);
    encode_instances(&set.instances, vocab, max_len)
}

/// Trains one member on a plan's train split (dev split for selection, if
/// any) and writes its checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train_member(
    bundle: &CorpusBundle,
    vocab: &Vocabulary,
    plan: &PartitionPlan,
    spec: &MemberSpec,
    encoder: &EncoderSettings,
    hyper: &TrainHyper,
    checkpoint: &Path,
) -> Result<TrainReport> {
    let cfg = encoder.config(vocab.len(), spec.head_kind, spec.seed);
    let train = encode_split(bundle, &plan.train_docs, spec.scheme, vocab, encoder.max_len)?;
    let dev = if plan.dev_docs.is_empty() {
        None
    } else {
        Some(encode_split(bundle, &plan.dev_docs, spec.scheme, vocab, encoder.max_len)?)
    };
    let hyper = TrainHyper {
        class_weighted: spec.class_weighted,
        ..hyper.clone()
    };
    let mut outcome = train_model(&cfg, &train, dev.as_deref(), &hyper)?;
    outcome.save(checkpoint, spec.scheme, spec.class_weighted)?;
    Ok(outcome.report)
}

/// Trains a group's stacker on the plan's ensemble split and writes it.
pub fn train_group_stacker(
    bundle: &CorpusBundle,
    vocab: &Vocabulary,
    group: &EnsembleGroup,
    ensemble_docs: &BTreeSet<String>,
    hyper: &StackerHyper,
    path: &Path,
) -> Result<StackerReport> {
    let max_len = group.members[0].params.config.max_len;
    let views = InstanceViews::build(&bundle.subset(ensemble_docs), vocab, max_len, &group.schemes())?;
    let (params, report) = train_stacker(group, &views, hyper)?;
    save_stacker(path, &params, group.iteration, group.member_names())?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub manifest: EnsembleManifest,
    pub manifest_path: PathBuf,
    pub member_reports: Vec<(PathBuf, TrainReport)>,
    pub stacker_reports: Vec<(PathBuf, StackerReport)>,
}

/// Trains every artifact a run kind needs under `out_dir` and writes
/// `manifest.json` listing them.
pub fn run_pipeline(cfg: &PipelineConfig, bundle: &CorpusBundle, vocab: &Vocabulary, out_dir: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    let pmids: BTreeSet<String> = bundle.documents.keys().cloned().collect();
    let mut plans = make_partitions(&pmids, cfg.kind.partition(), cfg.partition_seed)?;
    if cfg.kind == PipelineKind::Run1Stack {
        plans.truncate(1);
    }
    let mut out = PipelineOutput {
        manifest: EnsembleManifest {
            kind: cfg.kind,
            groups: Vec::new(),
        },
        manifest_path: out_dir.join("manifest.json"),
        member_reports: Vec::new(),
        stacker_reports: Vec::new(),
    };
    let mut fold_members = Vec::new();
    for plan in &plans {
        let dir = out_dir.join(format!("iter{}", plan.iteration));
        let mut paths = Vec::new();
        for (j, spec) in cfg.members.iter().enumerate() {
            let tag = (plan.iteration * 16 + j) as u64;
            let spec = MemberSpec {
                seed: derive_seed(spec.seed, tag),
                ..spec.clone()
            };
            let hyper = TrainHyper {
                seed: derive_seed(cfg.train.seed, tag),
                ..cfg.train.clone()
            };
            let path = dir.join(format!("member{}.ckpt", j + 1));
            info!(
                "training {:?} iteration {} member {} ({:?}, {:?})",
                cfg.kind,
                plan.iteration,
                j + 1,
                spec.head_kind,
                spec.scheme
            );
            let report = train_member(bundle, vocab, plan, &spec, &cfg.encoder, &hyper, &path)?;
            write_json(&dir.join(format!("member{}.report.json", j + 1)), &report)?;
            out.member_reports.push((path.clone(), report));
            paths.push(path);
        }
        match cfg.kind {
            PipelineKind::Run1Stack | PipelineKind::Run3StackVote => {
                let group = EnsembleGroup::load(plan.iteration, &paths)?;
                let stacker_path = dir.join("stacker.ckpt");
                let hyper = StackerHyper {
                    seed: derive_seed(cfg.stacker.seed, plan.iteration as u64),
                    ..cfg.stacker.clone()
                };
                let report = train_group_stacker(bundle, vocab, &group, &plan.ensemble_docs, &hyper, &stacker_path)?;
                write_json(&dir.join("stacker.report.json"), &report)?;
                out.stacker_reports.push((stacker_path.clone(), report));
                out.manifest.groups.push(ManifestGroup {
                    iteration: plan.iteration,
                    members: paths,
                    stacker: Some(stacker_path),
                });
            }
            PipelineKind::Run4Vote => fold_members.extend(paths),
            PipelineKind::Run5Single => out.manifest.groups.push(ManifestGroup {
                iteration: plan.iteration,
                members: paths,
                stacker: None,
            }),
        }
    }
    if cfg.kind == PipelineKind::Run4Vote {
        out.manifest.groups.push(ManifestGroup {
            iteration: 1,
            members: fold_members,
            stacker: None,
        });
    }
    out.manifest.save(&out.manifest_path)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// Fused positive predictions; NONE is never emitted.
    pub records: Vec<PredictionRecord>,
    /// Per-pair fusion trace for voting runs.
    pub votes: Vec<VoteRecord>,
    /// Each member's own positive predictions, in manifest order.
    pub member_records: Vec<(PathBuf, Vec<PredictionRecord>)>,
}

fn to_records(keys: &[InstanceKey], labels: &[RelationType]) -> Vec<PredictionRecord> {
    records_from_labels(keys.iter().zip(labels.iter().copied()))
}

/// Applies a trained run to every candidate pair of `bundle`.
pub fn fuse(manifest: &EnsembleManifest, bundle: &CorpusBundle, vocab: &Vocabulary) -> Result<FusionOutput> {
    manifest.validate()?;
    let mut members: Vec<Vec<Member>> = Vec::new();
    for g in &manifest.groups {
        members.push(g.members.iter().map(|p| Member::load(p)).collect::<Result<_>>()?);
    }
    let first = &members[0][0].params.config;
    if first.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "models expect a vocabulary of {} tokens, got {}",
            first.vocab_size,
            vocab.len()
        )));
    }
    let schemes: BTreeSet<SchemeKind> = members.iter().flatten().map(|m| m.descriptor.scheme).collect();
    let max_len = members.iter().flatten().map(|m| m.params.config.max_len).min().unwrap_or(first.max_len);
    let views = InstanceViews::build(bundle, vocab, max_len, &schemes)?;
    let keys = views.keys().to_vec();

    let mut member_records = Vec::new();
    let mut member_preds: BTreeMap<(usize, usize), Vec<Prediction>> = BTreeMap::new();
    for (gi, group) in members.iter().enumerate() {
        for (mi, m) in group.iter().enumerate() {
            let preds = keys
                .iter()
                .map(|k| predict(&m.params, views.sequence(m.descriptor.scheme, k)?))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<RelationType> = preds.iter().map(|p| p.label).collect();
            member_records.push((m.descriptor.checkpoint.clone(), to_records(&keys, &labels)));
            member_preds.insert((gi, mi), preds);
        }
    }

    let mut per_voter: Vec<Vec<RelationType>> = Vec::new();
    match manifest.kind {
        PipelineKind::Run1Stack | PipelineKind::Run3StackVote => {
            for (gi, g) in manifest.groups.iter().enumerate() {
                let path = g.stacker.as_ref().expect("validated");
                let (stacker, header) = load_stacker(path)?;
                let group = EnsembleGroup::new(g.iteration, members[gi].clone())?;
                if header.members != group.member_names() {
                    return Err(Error::Config(format!(
                        "{} was trained on members {:?} but the manifest lists {:?}",
                        path.display(),
                        header.members,
                        group.member_names()
                    )));
                }
                let labels = (0..keys.len())
                    .map(|i| {
                        let features: Vec<f64> = (0..group.members.len())
                            .flat_map(|mi| member_preds[&(gi, mi)][i].cls_feature.iter().copied())
                            .collect();
                        Ok(stacker_predict(&stacker, &features)?.0)
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_voter.push(labels);
            }
        }
        PipelineKind::Run4Vote | PipelineKind::Run5Single => {
            for mi in 0..members[0].len() {
                per_voter.push(member_preds[&(0, mi)].iter().map(|p| p.label).collect());
            }
        }
    }

    let mut votes = Vec::new();
    let fused: Vec<RelationType> = if per_voter.len() == 1 {
        per_voter.pop().unwrap()
    } else {
        (0..keys.len())
            .map(|i| {
                let labels: Vec<RelationType> = per_voter.iter().map(|v| v[i]).collect();
                let winner = majority_vote(&labels)?;
                votes.push(VoteRecord {
                    key: keys[i].clone(),
                    member_labels: labels,
                    fused: winner,
                });
                Ok(winner)
            })
            .collect::<Result<_>>()?
    };
    Ok(FusionOutput {
        records: to_records(&keys, &fused),
        votes,
        member_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_shape_is_checked() {
        let g = |n: usize, stacker: bool| ManifestGroup {
            iteration: 1,
            members: (0..n).map(|i| PathBuf::from(format!("m{i}"))).collect(),
            stacker: stacker.then(|| PathBuf::from("s")),
        };
        let ok = EnsembleManifest {
            kind: PipelineKind::Run3StackVote,
            groups: (0..5).map(|_| g(5, true)).collect(),
        };
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.groups[2].stacker = None;
        assert!(bad.validate().is_err());
        let single = EnsembleManifest {
            kind: PipelineKind::Run5Single,
            groups: vec![g(1, false)],
        };
        assert!(single.validate().is_ok());
        let vote = EnsembleManifest {
            kind: PipelineKind::Run4Vote,
            groups: vec![g(4, false)],
        };
        assert!(vote.validate().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for (kind, name) in [
            (PipelineKind::Run1Stack, "\"RUN1_STACK\""),
            (PipelineKind::Run3StackVote, "\"RUN3_STACK_VOTE\""),
            (PipelineKind::Run4Vote, "\"RUN4_VOTE\""),
            (PipelineKind::Run5Single, "\"RUN5_SINGLE\""),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), name);
            assert_eq!(serde_json::from_str::<PipelineKind>(name).unwrap(), kind);
        }
    }
}
