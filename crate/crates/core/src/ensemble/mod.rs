//! Fusing member models by hard voting or by an MLP stacker.

mod pipeline;
mod stacker;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, ModelHeader};
use crate::corpus::{generate_instances, CorpusBundle, InstanceKey, RelationType, SchemeKind};
use crate::error::{Error, Result};
use crate::model::{encoder_forward, predict, HeadKind, ModelParameters, Parameters};
use crate::tokenizer::{TokenSequence, Vocabulary};
use crate::train::encode_instances;

pub use pipeline::{
    fuse, run_pipeline, train_group_stacker, train_member, EncoderSettings, EnsembleManifest, FusionOutput,
    ManifestGroup, MemberSpec, PipelineConfig, PipelineKind, PipelineOutput,
};
pub use stacker::{
    load_stacker, save_stacker, stacker_loss, stacker_loss_and_grad, stacker_predict, train_stacker_on_features,
    StackerHeader, StackerHyper, StackerParams, StackerReport, STACKER_HIDDEN,
};

pub const GROUP_SIZE: usize = 5;

/// The unique plurality label, or NONE when the top count is shared.
pub fn majority_vote(labels: &[RelationType]) -> Result<RelationType> {
    if labels.is_empty() {
        return Err(Error::Data("majority vote over an empty label list".into()));
    }
    let mut counts = [0usize; RelationType::COUNT];
    for l in labels {
        counts[l.index()] += 1;
    }
    let top = *counts.iter().max().unwrap();
    let mut winners = counts.iter().enumerate().filter(|(_, c)| **c == top);
    let (first, _) = winners.next().unwrap();
    if winners.next().is_some() {
        return Ok(RelationType::None);
    }
    Ok(RelationType::from_index(first).unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub key: InstanceKey,
    pub member_labels: Vec<RelationType>,
    pub fused: RelationType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberDescriptor {
    pub checkpoint: PathBuf,
    pub head_kind: HeadKind,
    pub scheme: SchemeKind,
    pub class_weighted: bool,
}

#[derive(Debug, Clone)]
pub struct Member {
    pub descriptor: MemberDescriptor,
    pub params: ModelParameters,
}

impl Member {
    pub fn load(path: &Path) -> Result<Self> {
        let (params, header): (ModelParameters, ModelHeader) = load_model(path)?;
        Ok(Member {
            descriptor: MemberDescriptor {
                checkpoint: path.to_path_buf(),
                head_kind: header.config.head_kind,
                scheme: header.scheme,
                class_weighted: header.class_weighted,
            },
            params,
        })
    }

    /// Predicted label for every key the member's scheme view covers.
    pub fn predict_all(&self, views: &InstanceViews, keys: &[InstanceKey]) -> Result<Vec<RelationType>> {
        keys.iter()
            .map(|k| Ok(predict(&self.params, views.sequence(self.descriptor.scheme, k)?)?.label))
            .collect()
    }
}

/// FNV-1a over the bit patterns of every parameter, in tensor order.
pub fn params_checksum<P: Parameters>(params: &P) -> u64 {
    struct Fnv(u64);
    impl Hasher for Fnv {
        fn finish(&self) -> u64 {
            self.0
        }
        fn write(&mut self, bytes: &[u8]) {
            for b in bytes {
                self.0 = (self.0 ^ u64::from(*b)).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    let mut h = Fnv(0xcbf2_9ce4_8422_2325);
    for (name, t) in params.named_tensors() {
        h.write(name.as_bytes());
        for v in &t.data {
            h.write(&v.to_bits().to_le_bytes());
        }
    }
    h.finish()
}

/// Five members whose `[CLS]` features are concatenated in a fixed order.
#[derive(Debug, Clone)]
pub struct EnsembleGroup {
    pub iteration: usize,
    pub members: Vec<Member>,
}

impl EnsembleGroup {
    pub fn new(iteration: usize, members: Vec<Member>) -> Result<Self> {
        if members.len() != GROUP_SIZE {
            return Err(Error::Config(format!("an ensemble group needs {GROUP_SIZE} members, got {}", members.len())));
        }
        let first = &members[0].params.config;
        for m in &members[1..] {
            let c = &m.params.config;
            if c.vocab_size != first.vocab_size || c.n_classes != first.n_classes {
                return Err(Error::Config(format!(
                    "{} does not share vocabulary size and class count with {}",
                    m.descriptor.checkpoint.display(),
                    members[0].descriptor.checkpoint.display()
                )));
            }
        }
        Ok(EnsembleGroup { iteration, members })
    }

    pub fn load(iteration: usize, paths: &[PathBuf]) -> Result<Self> {
        let members = paths.iter().map(|p| Member::load(p)).collect::<Result<Vec<_>>>()?;
        Self::new(iteration, members)
    }

    pub fn feature_dim(&self) -> usize {
        self.members.iter().map(|m| m.params.config.hidden).sum()
    }

    /// Member identifiers in feature-block order.
    /// Member identities as `file_name@checksum`, independent of where the
    /// run directory lives.
    pub fn member_names(&self) -> Vec<String> {
        self.members
            .iter()
            .map(|m| {
                let file = m.descriptor.checkpoint.file_name().unwrap_or_default().to_string_lossy();
                format!("{file}@{:016x}", params_checksum(&m.params))
            })
            .collect()
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.members.iter().map(|m| params_checksum(&m.params)).collect()
    }

    pub fn schemes(&self) -> BTreeSet<SchemeKind> {
        self.members.iter().map(|m| m.descriptor.scheme).collect()
    }
}

/// Candidate pairs of one corpus, encoded under each requested scheme.
#[derive(Debug, Clone, Default)]
pub struct InstanceViews {
    sequences: BTreeMap<SchemeKind, HashMap<InstanceKey, TokenSequence>>,
    labels: BTreeMap<InstanceKey, RelationType>,
    keys: Vec<InstanceKey>,
}

impl InstanceViews {
    /// Keys are those encodable under every scheme, sorted. For a pair with
    /// several gold labels the first in label order is kept as its target.
    pub fn build(bundle: &CorpusBundle, vocab: &Vocabulary, max_len: usize, schemes: &BTreeSet<SchemeKind>) -> Result<Self> {
        let mut views = InstanceViews::default();
        let mut common: Option<BTreeSet<InstanceKey>> = None;
        for &scheme in schemes {
            let set = generate_instances(bundle, scheme);
            let encoded = encode_instances(&set.instances, vocab, max_len)?;
            let mut map = HashMap::new();
            for e in encoded {
                views.labels.entry(e.key.clone()).or_insert(e.label);
                map.entry(e.key).or_insert(e.seq);
            }
            let keys: BTreeSet<InstanceKey> = map.keys().cloned().collect();
            common = Some(match common {
                None => keys,
                Some(c) => {
                    let both: BTreeSet<_> = c.intersection(&keys).cloned().collect();
                    if both.len() != c.len().max(keys.len()) {
                        warn!("{} pairs are not encodable under every scheme; dropped", c.len().max(keys.len()) - both.len());
                    }
                    both
                }
            });
            views.sequences.insert(scheme, map);
        }
        views.keys = common.unwrap_or_default().into_iter().collect();
        Ok(views)
    }

    pub fn keys(&self) -> &[InstanceKey] {
        &self.keys
    }

    pub fn label(&self, key: &InstanceKey) -> RelationType {
        self.labels.get(key).copied().unwrap_or(RelationType::None)
    }

    pub fn sequence(&self, scheme: SchemeKind, key: &InstanceKey) -> Result<&TokenSequence> {
        self.sequences
            .get(&scheme)
            .and_then(|m| m.get(key))
            .ok_or_else(|| Error::Data(format!("no {scheme:?} encoding for pair {key:?}")))
    }
}

/// Concatenated final-layer `[CLS]` states of the group's members.
pub fn extract_cls_features(group: &EnsembleGroup, views: &InstanceViews, key: &InstanceKey) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(group.feature_dim());
    for m in &group.members {
        let trace = encoder_forward(&m.params, views.sequence(m.descriptor.scheme, key)?)?;
        out.extend_from_slice(trace.cls_feature());
    }
    Ok(out)
}

/// Trains a stacker on the group's features for every pair in `views`.
/// Member parameters are only read; their checksums are verified afterwards.
pub fn train_stacker(group: &EnsembleGroup, views: &InstanceViews, hyper: &StackerHyper) -> Result<(StackerParams, StackerReport)> {
    let before = group.checksums();
    let keys = views.keys();
    let features = keys
        .iter()
        .map(|k| extract_cls_features(group, views, k))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<RelationType> = keys.iter().map(|k| views.label(k)).collect();
    let out = train_stacker_on_features(&features, &labels, hyper)?;
    if group.checksums() != before {
        return Err(Error::Numeric("member parameters changed during stacker training".into()));
    }
    Ok(out)
}

/// Stacker label per key. The stacker's recorded member order must match.
pub fn stack_predict(
    group: &EnsembleGroup,
    stacker: &StackerParams,
    header: &StackerHeader,
    views: &InstanceViews,
    keys: &[InstanceKey],
) -> Result<Vec<RelationType>> {
    if header.members != group.member_names() {
        return Err(Error::Config(format!(
            "stacker was trained on members {:?} but the group lists {:?}",
            header.members,
            group.member_names()
        )));
    }
    keys.iter()
        .map(|k| Ok(stacker_predict(stacker, &extract_cls_features(group, views, k)?)?.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use RelationType::*;

    #[test]
    fn vote_examples() {
        assert_eq!(majority_vote(&[Inhibitor, Inhibitor, Inhibitor, None, Activator]).unwrap(), Inhibitor);
        assert_eq!(majority_vote(&[Activator, Activator, Inhibitor, Inhibitor, None]).unwrap(), None);
        assert_eq!(majority_vote(&[None; 5]).unwrap(), None);
        assert_eq!(majority_vote(&[Agonist]).unwrap(), Agonist);
        assert!(majority_vote(&[]).is_err());
    }

    #[test]
    fn checksum_sees_every_bit() {
        let p = StackerParams::init(3, 4, 0);
        let mut q = p.clone();
        assert_eq!(params_checksum(&p), params_checksum(&q));
        q.b2.data[13] = f64::from_bits(q.b2.data[13].to_bits() ^ 1);
        assert_ne!(params_checksum(&p), params_checksum(&q));
    }
}
