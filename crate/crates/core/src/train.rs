//! Document-level partitions, class weights and the training loop.

use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_model, ModelHeader};
use crate::corpus::{InstanceKey, RelationGold, RelationType, SchemeKind, SentenceInstance};
use crate::error::{Error, Result};
use crate::eval::{micro_metrics, PredictionRecord};
use crate::model::{accumulate_gradients, init_params, predict, ClassWeights, EncoderConfig, ModelParameters, Parameters, Prediction, N_CLASSES};
use crate::optim::{AdamW, AdamWConfig};
use crate::tokenizer::{encode_instance, TokenSequence, Vocabulary};

pub const MAX_EPOCHS: usize = 10;
pub const N_ITERATIONS: usize = 5;
pub const MIN_DOCUMENTS: usize = 10;

/// SplitMix64 finaliser; derives independent seeds from a base seed and a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartitionKind {
    #[serde(rename = "SPLIT_70_20_10")]
    Split70_20_10,
    #[serde(rename = "FOLD_80_20")]
    Fold80_20,
    #[serde(rename = "FULL_100")]
    Full100,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub kind: PartitionKind,
    /// 1-based.
    pub iteration: usize,
    pub train_docs: BTreeSet<String>,
    pub dev_docs: BTreeSet<String>,
    pub ensemble_docs: BTreeSet<String>,
}

fn shuffled(pmids: &BTreeSet<String>, seed: u64) -> Vec<String> {
    let mut v: Vec<String> = pmids.iter().cloned().collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Splits documents, never sentences.
///
/// `SPLIT_70_20_10` reshuffles for each of the five iterations with a derived
/// seed. `FOLD_80_20` shuffles once and uses fold `k` as the dev set of
/// iteration `k`. `FULL_100` is a single plan with every document in train.
pub fn make_partitions(pmids: &BTreeSet<String>, kind: PartitionKind, seed: u64) -> Result<Vec<PartitionPlan>> {
    let n = pmids.len();
    if n < MIN_DOCUMENTS {
        return Err(Error::Data(format!("need at least {MIN_DOCUMENTS} documents to partition, found {n}")));
    }
    let set = |docs: &[String]| docs.iter().cloned().collect::<BTreeSet<_>>();
    let plans = match kind {
        PartitionKind::Full100 => vec![PartitionPlan {
            kind,
            iteration: 1,
            train_docs: pmids.clone(),
            dev_docs: BTreeSet::new(),
            ensemble_docs: BTreeSet::new(),
        }],
        PartitionKind::Split70_20_10 => {
            let n_train = (n as f64 * 0.7).round() as usize;
            let n_dev = (n as f64 * 0.2).round() as usize;
            (1..=N_ITERATIONS)
                .map(|it| {
                    let order = shuffled(pmids, derive_seed(seed, it as u64));
                    PartitionPlan {
                        kind,
                        iteration: it,
                        train_docs: set(&order[..n_train]),
                        dev_docs: set(&order[n_train..n_train + n_dev]),
                        ensemble_docs: set(&order[n_train + n_dev..]),
                    }
                })
                .collect()
        }
        PartitionKind::Fold80_20 => {
            let order = shuffled(pmids, derive_seed(seed, 0));
            (0..N_ITERATIONS)
                .map(|k| {
                    let lo = k * n / N_ITERATIONS;
                    let hi = (k + 1) * n / N_ITERATIONS;
                    let mut train = set(&order[..lo]);
                    train.extend(order[hi..].iter().cloned());
                    PartitionPlan {
                        kind,
                        iteration: k + 1,
                        train_docs: train,
                        dev_docs: set(&order[lo..hi]),
                        ensemble_docs: BTreeSet::new(),
                    }
                })
                .collect()
        }
    };
    Ok(plans)
}

/// Inverse-frequency weights, mean-normalised to one. A class with no
/// examples gets the largest weight among the present classes.
pub fn class_weights_from_counts(counts: &[usize]) -> Vec<f64> {
    let raw: Vec<Option<f64>> = counts.iter().map(|&c| (c > 0).then(|| 1.0 / c as f64)).collect();
    let Some(max) = raw.iter().flatten().copied().reduce(f64::max) else {
        warn!("no labelled instances; using uniform class weights");
        return vec![1.0; counts.len()];
    };
    let absent = raw.iter().filter(|w| w.is_none()).count();
    if absent > 0 {
        warn!("{absent} classes have no training instances; giving them the rarest class's weight");
    }
    let raw: Vec<f64> = raw.into_iter().map(|w| w.unwrap_or(max)).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

pub fn label_counts(labels: impl IntoIterator<Item = RelationType>) -> Vec<usize> {
    let mut counts = vec![0; N_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

pub fn compute_class_weights(instances: &[SentenceInstance]) -> ClassWeights {
    ClassWeights {
        w: class_weights_from_counts(&label_counts(instances.iter().map(|i| i.label))),
    }
}

/// A candidate pair ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInstance {
    pub key: InstanceKey,
    pub label: RelationType,
    pub seq: TokenSequence,
}

/// Encodes instances, skipping (with a warning) those whose marked span does
/// not fit in `max_len`.
pub fn encode_instances(instances: &[SentenceInstance], vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedInstance>> {
    let mut out = Vec::with_capacity(instances.len());
    let mut skipped = 0;
    for inst in instances {
        match encode_instance(inst, vocab, max_len) {
            Ok(seq) => out.push(EncodedInstance {
                key: inst.key(),
                label: inst.label,
                seq,
            }),
            Err(Error::Data(msg)) => {
                skipped += 1;
                log::debug!("{msg}");
            }
            Err(e) => return Err(e),
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} instances whose entity span exceeds max_len {max_len}");
    }
    Ok(out)
}

/// Runs the model once per distinct pair, in first-seen order.
pub fn predict_instances(params: &ModelParameters, data: &[EncodedInstance]) -> Result<Vec<(InstanceKey, Prediction)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for inst in data {
        if seen.insert(&inst.key) {
            out.push((inst.key.clone(), predict(params, &inst.seq)?));
        }
    }
    Ok(out)
}

pub fn to_record(key: &InstanceKey, rtype: RelationType) -> PredictionRecord {
    RelationGold {
        pmid: key.pmid.clone(),
        rtype,
        arg1: key.chem.clone(),
        arg2: key.gene.clone(),
    }
}

/// Positive labels as records; NONE never becomes a record.
pub fn records_from_labels<'a>(labels: impl IntoIterator<Item = (&'a InstanceKey, RelationType)>) -> Vec<PredictionRecord> {
    labels
        .into_iter()
        .filter(|(_, t)| t.is_positive())
        .map(|(k, t)| to_record(k, t))
        .collect()
}

pub fn gold_records(data: &[EncodedInstance]) -> Vec<PredictionRecord> {
    records_from_labels(data.iter().map(|i| (&i.key, i.label)))
}

pub fn evaluate_f1(params: &ModelParameters, data: &[EncodedInstance]) -> Result<f64> {
    let preds = predict_instances(params, data)?;
    let pred = records_from_labels(preds.iter().map(|(k, p)| (k, p.label)));
    Ok(micro_metrics(&gold_records(data), &pred).overall.f1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Seeds batch shuffling; parameter init uses the encoder config's seed.
    pub seed: u64,
    pub class_weighted: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: MAX_EPOCHS,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            class_weighted: false,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::Config(format!("epochs must be in 1..={MAX_EPOCHS}, got {}", self.epochs)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub checkpoint: Option<PathBuf>,
    pub n_train: usize,
    pub n_dev: usize,
    pub class_weights: Vec<f64>,
}

impl TrainReport {
    /// The report with wall times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainReport {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
        r
    }

    pub fn best_dev_f1(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch.checked_sub(1)?)?.dev_micro_f1
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn save(&mut self, path: &Path, scheme: SchemeKind, class_weighted: bool) -> Result<()> {
        let header = ModelHeader::new(self.params.config.clone(), scheme, class_weighted);
        save_model(path, &self.params, &header)?;
        self.report.checkpoint = Some(path.to_path_buf());
        Ok(())
    }
}

/// Trains one model.
///
/// With a dev set, the epoch with the highest dev micro-F1 is kept (earliest
/// on ties) and training stops once dev F1 reaches 1, since no later epoch
/// could replace it. Without one, the final epoch is kept.
pub fn train_model(
    cfg: &EncoderConfig,
    train: &[EncodedInstance],
    dev: Option<&[EncodedInstance]>,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training instances".into()));
    }
    let mut params = init_params(cfg)?;
    let weights = if hyper.class_weighted {
        ClassWeights {
            w: class_weights_from_counts(&label_counts(train.iter().map(|i| i.label))),
        }
    } else {
        ClassWeights::uniform()
    };
    let mut opt = AdamW::new(hyper.optimizer, &params);
    let mut grads = params.zeroed();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        checkpoint: None,
        n_train: train.len(),
        n_dev: dev.map_or(0, <[_]>::len),
        class_weights: weights.w.clone(),
    };
    let mut best: Option<(f64, ModelParameters)> = None;

    for epoch in 1..=hyper.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<(&TokenSequence, RelationType)> = chunk.iter().map(|&i| (&train[i].seq, train[i].label)).collect();
            grads.zero();
            let loss = accumulate_gradients(&params, &batch, &weights, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training diverged: loss {loss} at epoch {epoch}, batch {bi}")));
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {name} at epoch {epoch}, batch {bi}")));
            }
            opt.step(&mut params, &grads)
                .map_err(|e| Error::Numeric(format!("{e} at epoch {epoch}, batch {bi}")))?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let dev_f1 = match dev {
            Some(d) => Some(evaluate_f1(&params, d)?),
            None => None,
        };
        let wall_seconds = started.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: train loss {train_loss:.5}{} ({wall_seconds:.1}s)",
            dev_f1.map(|f| format!(", dev micro-F1 {f:.4}")).unwrap_or_default()
        );
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_micro_f1: dev_f1,
            wall_seconds,
        });
        match dev_f1 {
            Some(f1) => {
                if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                    best = Some((f1, params.clone()));
                    report.best_epoch = epoch;
                }
                if f1 >= 1.0 {
                    break;
                }
            }
            None => report.best_epoch = epoch,
        }
    }
    if let Some((_, p)) = best {
        params = p;
    }
    Ok(TrainOutcome { params, report })
}
