use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::RelationType;
use crate::error::{Error, Result};
use crate::linalg::{affine, affine_backward};
use crate::model::{LogitVector, Parameters, Tensor, N_CLASSES};
use crate::optim::{AdamW, AdamWConfig};

pub const STACKER_HIDDEN: usize = 512;
const LOG_FLOOR: f64 = 1e-12;

/// One-hidden-layer ReLU MLP over concatenated member features.
#[derive(Debug, Clone, PartialEq)]
pub struct StackerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Parameters for StackerParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("stacker.hidden.weight".into(), &self.w1),
            ("stacker.hidden.bias".into(), &self.b1),
            ("stacker.output.weight".into(), &self.w2),
            ("stacker.output.bias".into(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl StackerParams {
    pub fn input_dim(&self) -> usize {
        self.w1.shape[0]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        StackerParams {
            w1: Tensor::zeros(&[input_dim, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, N_CLASSES]),
            b2: Tensor::zeros(&[N_CLASSES]),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden);
        for (t, fan_in) in [(&mut p.w1, input_dim), (&mut p.w2, hidden)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        p
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_dim() {
            return Err(Error::Config(format!(
                "stacker expects {} input features, got {width}",
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Header stored with a stacker checkpoint. `members` fixes the feature
/// block order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackerHeader {
    pub kind: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub iteration: usize,
    pub members: Vec<String>,
}

impl StackerHeader {
    pub const KIND: &'static str = "stacker";
}

pub fn save_stacker(path: &Path, params: &StackerParams, iteration: usize, members: Vec<String>) -> Result<()> {
    let header = StackerHeader {
        kind: StackerHeader::KIND.into(),
        input_dim: params.input_dim(),
        hidden: params.hidden(),
        n_classes: N_CLASSES,
        iteration,
        members,
    };
    Checkpoint::from_parameters(params, &header).save(path)
}

pub fn load_stacker(path: &Path) -> Result<(StackerParams, StackerHeader)> {
    let ckpt = Checkpoint::load(path)?;
    let header: StackerHeader = ckpt.parse_header()?;
    if header.kind != StackerHeader::KIND || header.n_classes != N_CLASSES {
        return Err(Error::Data(format!("{}: not a {N_CLASSES}-class stacker checkpoint", path.display())));
    }
    let expected = StackerParams::zeros(header.input_dim, header.hidden);
    let mut tensors = ckpt.into_tensors().into_iter();
    let mut params = expected.clone();
    for ((name, want), slot) in expected.named_tensors().into_iter().zip(params.tensors_mut()) {
        match tensors.next() {
            Some((n, t)) if n == name && t.shape == want.shape => *slot = t,
            _ => return Err(Error::Data(format!("{}: missing or misshapen tensor {name}", path.display()))),
        }
    }
    if tensors.next().is_some() {
        return Err(Error::Data(format!("{}: unexpected extra tensors", path.display())));
    }
    Ok((params, header))
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<LogitVector>,
}

fn forward_batch(params: &StackerParams, x: &[f64], rows: usize) -> Forward {
    let (k, h) = (params.input_dim(), params.hidden());
    let mut hidden = vec![0.0; rows * h];
    affine(x, rows, k, &params.w1.data, &params.b1.data, &mut hidden);
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut scores = vec![0.0; rows * N_CLASSES];
    affine(&hidden, rows, h, &params.w2.data, &params.b2.data, &mut scores);
    let logits = scores.chunks_exact(N_CLASSES).map(|s| LogitVector::new(s.to_vec())).collect();
    Forward { hidden, logits }
}

fn flatten(features: &[&[f64]]) -> Vec<f64> {
    features.iter().flat_map(|f| f.iter().copied()).collect()
}

/// Mean unweighted cross-entropy over a batch.
pub fn stacker_loss(params: &StackerParams, features: &[&[f64]], labels: &[RelationType]) -> Result<f64> {
    if let Some(f) = features.first() {
        params.check_input(f.len())?;
    }
    let fwd = forward_batch(params, &flatten(features), features.len());
    let total: f64 = fwd.logits.iter().zip(labels).map(|(l, y)| -l.log_prob(*y)).sum();
    Ok(total / features.len().max(1) as f64)
}

/// Mean loss and its gradient with respect to every stacker tensor.
pub fn stacker_loss_and_grad(
    params: &StackerParams,
    features: &[&[f64]],
    labels: &[RelationType],
) -> Result<(f64, StackerParams)> {
    let rows = features.len();
    let mut grads = params.zeroed();
    if rows == 0 {
        return Ok((0.0, grads));
    }
    params.check_input(features[0].len())?;
    let (k, h) = (params.input_dim(), params.hidden());
    let x = flatten(features);
    let fwd = forward_batch(params, &x, rows);
    let inv = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut dscores = vec![0.0; rows * N_CLASSES];
    for (r, (l, y)) in fwd.logits.iter().zip(labels).enumerate() {
        loss += -l.log_prob(*y);
        if l.probs[y.index()] < LOG_FLOOR {
            continue;
        }
        for c in 0..N_CLASSES {
            let target = if c == y.index() { 1.0 } else { 0.0 };
            dscores[r * N_CLASSES + c] = (l.probs[c] - target) * inv;
        }
    }
    let mut dhidden = vec![0.0; rows * h];
    affine_backward(
        &fwd.hidden,
        rows,
        h,
        &params.w2.data,
        &dscores,
        &mut grads.w2.data,
        &mut grads.b2.data,
        Some(&mut dhidden),
    );
    for (g, a) in dhidden.iter_mut().zip(&fwd.hidden) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    affine_backward(&x, rows, k, &params.w1.data, &dhidden, &mut grads.w1.data, &mut grads.b1.data, None);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite stacker gradient in {name}")));
    }
    Ok((loss * inv, grads))
}

/// Label and class probabilities for one feature vector.
pub fn stacker_predict(params: &StackerParams, features: &[f64]) -> Result<(RelationType, Vec<f64>)> {
    params.check_input(features.len())?;
    let mut fwd = forward_batch(params, features, 1);
    let logits = fwd.logits.pop().expect("one row");
    Ok((logits.argmax(), logits.probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackerHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for StackerHyper {
    fn default() -> Self {
        StackerHyper {
            epochs: 50,
            batch_size: 16,
            hidden: STACKER_HIDDEN,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackerReport {
    /// Loss over the whole ensemble split after each epoch.
    pub epoch_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub n_instances: usize,
}

/// Trains on precomputed member features. The epoch with the lowest loss
/// over the full training split is kept.
pub fn train_stacker_on_features(
    features: &[Vec<f64>],
    labels: &[RelationType],
    hyper: &StackerHyper,
) -> Result<(StackerParams, StackerReport)> {
    if features.is_empty() {
        return Err(Error::Data("empty ensemble split: no instances to train the stacker".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Data("feature and label counts differ".into()));
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 || hyper.hidden == 0 {
        return Err(Error::Config("stacker epochs, batch_size and hidden must be positive".into()));
    }
    let dim = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::Data(format!("feature width {} differs from {dim}", f.len())));
    }
    let mut params = StackerParams::init(dim, hyper.hidden, hyper.seed);
    let mut opt = AdamW::new(hyper.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let all: Vec<&[f64]> = features.iter().map(Vec::as_slice).collect();
    let mut report = StackerReport {
        epoch_losses: Vec::new(),
        best_epoch: 0,
        n_instances: features.len(),
    };
    let mut best: Option<(f64, StackerParams)> = None;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| all[i]).collect();
            let ys: Vec<RelationType> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, grads) = stacker_loss_and_grad(&params, &xs, &ys)?;
            opt.step(&mut params, &grads)?;
        }
        let loss = stacker_loss(&params, &all, labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("stacker loss {loss} at epoch {epoch}")));
        }
        report.epoch_losses.push(loss);
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, params.clone()));
            report.best_epoch = epoch;
        }
    }
    info!(
        "stacker: best epoch {} of {}, loss {:.5}",
        report.best_epoch,
        hyper.epochs,
        report.epoch_losses[report.best_epoch - 1]
    );
    Ok((best.expect("at least one epoch").1, report))
}
