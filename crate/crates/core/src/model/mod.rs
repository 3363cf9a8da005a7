//! A small post-LN transformer encoder with three classification heads.
//!
//! Everything is computed in `f64`; the backward pass is written by hand and
//! checked against central finite differences in the test suite.

mod encoder;
mod heads;
mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RelationType;
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

pub use encoder::{encoder_forward, ForwardTrace};
pub use heads::{head_forward, HeadOutput};
pub use loss::{class_weighted_ce, ClassWeights, LogitVector};

pub const N_CLASSES: usize = RelationType::COUNT;
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HeadKind {
    /// Linear layer on the final `[CLS]` state.
    Cls,
    /// Unidirectional LSTM over the final states; last hidden state is classified.
    Lstm,
    /// Additive attention pooling over the final states.
    Attn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Cls, HeadKind::Lstm, HeadKind::Attn];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub head_kind: HeadKind,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    N_CLASSES
}

impl EncoderConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 64, FFN 256, 128 positions.
    pub fn desk(vocab_size: usize, head_kind: HeadKind, seed: u64) -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            max_len: 128,
            vocab_size,
            head_kind,
            n_classes: N_CLASSES,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.n_classes != N_CLASSES {
            return bad(format!("n_classes must be {N_CLASSES}, got {}", self.n_classes));
        }
        if self.layers == 0 || self.ffn == 0 || self.vocab_size == 0 || self.max_len < 8 {
            return bad("layers, ffn and vocab_size must be positive and max_len at least 8".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A fixed, ordered collection of named tensors.
pub trait Parameters: Clone {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.zero();
        out
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.fill(0.0);
        }
    }

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// First tensor holding a non-finite value, if any.
    fn first_non_finite(&self) -> Option<String> {
        self.named_tensors()
            .into_iter()
            .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn add_assign(&mut self, other: &Self) {
        let others = other.named_tensors();
        for (t, (_, o)) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a += b;
            }
        }
    }

    fn l2_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value through `f32`, as a checkpoint round trip does.
    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl LayerParams {
    fn named(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("attn.q.weight", &self.wq),
            ("attn.q.bias", &self.bq),
            ("attn.k.weight", &self.wk),
            ("attn.k.bias", &self.bk),
            ("attn.v.weight", &self.wv),
            ("attn.v.bias", &self.bv),
            ("attn.out.weight", &self.wo),
            ("attn.out.bias", &self.bo),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ffn.in.weight", &self.w1),
            ("ffn.in.bias", &self.b1),
            ("ffn.out.weight", &self.w2),
            ("ffn.out.bias", &self.b2),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
        ]
    }

    fn all_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Cls,
    Lstm { w_ih: Tensor, w_hh: Tensor, bias: Tensor },
    Attn { w: Tensor, bias: Tensor, v: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: EncoderConfig,
    pub token_embeddings: Tensor,
    pub position_embeddings: Tensor,
    pub layers: Vec<LayerParams>,
    pub head: HeadParams,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

impl Parameters for ModelParameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embeddings),
            ("embeddings.position".to_string(), &self.position_embeddings),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layer.{l}.{n}"), t)));
        }
        match &self.head {
            HeadParams::Cls => {}
            HeadParams::Lstm { w_ih, w_hh, bias } => {
                out.push(("head.lstm.w_ih".into(), w_ih));
                out.push(("head.lstm.w_hh".into(), w_hh));
                out.push(("head.lstm.bias".into(), bias));
            }
            HeadParams::Attn { w, bias, v } => {
                out.push(("head.attn.w".into(), w));
                out.push(("head.attn.bias".into(), bias));
                out.push(("head.attn.v".into(), v));
            }
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embeddings, &mut self.position_embeddings];
        for layer in &mut self.layers {
            out.extend(layer.all_mut());
        }
        match &mut self.head {
            HeadParams::Cls => {}
            HeadParams::Lstm { w_ih, w_hh, bias } => out.extend([w_ih, w_hh, bias]),
            HeadParams::Attn { w, bias, v } => out.extend([w, bias, v]),
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }
}

impl ModelParameters {
    /// Expected `(name, shape)` list for a config, in storage order.
    pub fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let zero = Self::build(cfg, &mut |shape| Tensor::zeros(shape));
        zero.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect()
    }

    /// Reassembles parameters from tensors in [`ModelParameters::layout`] order.
    pub fn from_tensors(cfg: &EncoderConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::build(cfg, &mut |shape| Tensor::zeros(shape));
        let layout = Self::layout(cfg);
        if layout.len() != tensors.len() {
            return Err(Error::Data(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((slot, (want_name, want_shape)), (name, t)) in
            params.tensors_mut().into_iter().zip(layout).zip(tensors)
        {
            if name != want_name || t.shape != want_shape {
                return Err(Error::Data(format!(
                    "tensor {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    /// Assembles parameters, drawing every weight matrix from `w`.
    fn build(cfg: &EncoderConfig, w: &mut dyn FnMut(&[usize]) -> Tensor) -> Self {
        let d = cfg.hidden;
        let token_embeddings = w(&[cfg.vocab_size, d]);
        let position_embeddings = w(&[cfg.max_len, d]);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                wq: w(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: w(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: w(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: w(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln1_gamma: Tensor::filled(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                w1: w(&[d, cfg.ffn]),
                b1: Tensor::zeros(&[cfg.ffn]),
                w2: w(&[cfg.ffn, d]),
                b2: Tensor::zeros(&[d]),
                ln2_gamma: Tensor::filled(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
            })
            .collect();
        let head = match cfg.head_kind {
            HeadKind::Cls => HeadParams::Cls,
            HeadKind::Lstm => HeadParams::Lstm {
                w_ih: w(&[d, 4 * d]),
                w_hh: w(&[d, 4 * d]),
                bias: Tensor::zeros(&[4 * d]),
            },
            HeadKind::Attn => HeadParams::Attn {
                w: w(&[d, d]),
                bias: Tensor::zeros(&[d]),
                v: w(&[d]),
            },
        };
        ModelParameters {
            config: cfg.clone(),
            token_embeddings,
            position_embeddings,
            layers,
            head,
            classifier_weight: w(&[d, cfg.n_classes]),
            classifier_bias: Tensor::zeros(&[cfg.n_classes]),
        }
    }
}

/// Seeded initialisation: weights uniform in `±1/sqrt(fan_in)`, biases zero,
/// layer-norm scales one.
pub fn init_params(cfg: &EncoderConfig) -> Result<ModelParameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.hidden;
    Ok(ModelParameters::build(cfg, &mut |shape| {
        let fan_in = if shape.len() == 2 { shape[0] } else { d };
        Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
    }))
}

/// Output of [`predict`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: RelationType,
    pub logits: LogitVector,
    pub cls_feature: Vec<f64>,
}

pub fn predict(params: &ModelParameters, seq: &TokenSequence) -> Result<Prediction> {
    let trace = encoder_forward(params, seq)?;
    let out = head_forward(params, &trace)?;
    Ok(Prediction {
        label: out.logits.argmax(),
        cls_feature: trace.cls_feature().to_vec(),
        logits: out.logits,
    })
}

/// Accumulates into `grads` the gradient of the mean weighted cross-entropy
/// over `batch`, returning the mean loss.
pub fn accumulate_gradients(
    params: &ModelParameters,
    batch: &[(&TokenSequence, RelationType)],
    weights: &ClassWeights,
    grads: &mut ModelParameters,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (seq, label) in batch {
        let trace = encoder_forward(params, seq)?;
        let out = head_forward(params, &trace)?;
        let (loss, mut dlogits) = loss::weighted_ce_with_grad(&out.logits, *label, weights);
        total += loss;
        dlogits.iter_mut().for_each(|g| *g *= inv);
        let dfeature = heads::head_backward(params, &trace, &out, &dlogits, grads);
        encoder::encoder_backward(params, &trace, dfeature, grads);
    }
    Ok(total * inv)
}

/// Mean weighted cross-entropy and its exact gradient with respect to every
/// parameter tensor.
pub fn backward_gradients(
    params: &ModelParameters,
    batch: &[(&TokenSequence, RelationType)],
    weights: &ClassWeights,
) -> Result<(f64, ModelParameters)> {
    let mut grads = params.zeroed();
    let loss = accumulate_gradients(params, batch, weights, &mut grads)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite gradient in {name}")));
    }
    Ok((loss, grads))
}

/// Mean weighted cross-entropy without gradients.
pub fn batch_loss(
    params: &ModelParameters,
    batch: &[(&TokenSequence, RelationType)],
    weights: &ClassWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for (seq, label) in batch {
        let trace = encoder_forward(params, seq)?;
        let out = head_forward(params, &trace)?;
        total += class_weighted_ce(&out.logits, *label, weights);
    }
    Ok(total / batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: HeadKind) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 32,
            max_len: 16,
            vocab_size: 20,
            head_kind: kind,
            n_classes: N_CLASSES,
            seed: 3,
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = tiny(HeadKind::Lstm);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(cfg.head_dim(), 4);
        assert!(a.layers[0].ln1_gamma.data.iter().all(|&v| v == 1.0));
        assert!(a.layers[0].bq.data.iter().all(|&v| v == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.layers[0].wq.data.iter().all(|v| v.abs() <= bound));
        let other = init_params(&EncoderConfig { seed: 4, ..cfg.clone() }).unwrap();
        assert_ne!(a, other);
        assert_eq!(
            ModelParameters::layout(&cfg),
            a.named_tensors().into_iter().map(|(n, t)| (n, t.shape.clone())).collect::<Vec<_>>()
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(HeadKind::Cls);
        cfg.heads = 3;
        assert!(init_params(&cfg).is_err());
        let mut cfg = tiny(HeadKind::Cls);
        cfg.n_classes = 13;
        assert!(cfg.validate().is_err());
    }
}
