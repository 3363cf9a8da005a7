#![allow(dead_code)]

use drugprot_core::model::{batch_loss, ClassWeights, EncoderConfig, HeadKind, ModelParameters, Parameters, N_CLASSES};
use drugprot_core::tokenizer::TokenSequence;
use drugprot_core::RelationType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradients below this magnitude are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn tiny_config(kind: HeadKind, seed: u64) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn: 32,
        max_len: 16,
        vocab_size: 24,
        head_kind: kind,
        n_classes: N_CLASSES,
        seed,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, size: usize, cfg: &EncoderConfig) -> Vec<(TokenSequence, RelationType)> {
    (0..size)
        .map(|_| {
            let n = rng.gen_range(2..=cfg.max_len - 3);
            let mut ids: Vec<u32> = (0..n).map(|_| rng.gen_range(1..cfg.vocab_size as u32)).collect();
            ids.resize(cfg.max_len, 0);
            let seq = TokenSequence {
                attention_mask: (0..cfg.max_len).map(|i| u8::from(i < n)).collect(),
                ids,
                n_real: n,
            };
            let label = RelationType::from_index(rng.gen_range(0..N_CLASSES)).unwrap();
            (seq, label)
        })
        .collect()
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> ClassWeights {
    ClassWeights::normalized((0..N_CLASSES).map(|_| rng.gen_range(0.3..3.0)).collect())
}

/// Central-difference gradient of the batch loss for every parameter.
pub fn finite_difference(
    params: &ModelParameters,
    batch: &[(TokenSequence, RelationType)],
    weights: &ClassWeights,
    h: f64,
) -> Vec<(String, Vec<f64>)> {
    let refs: Vec<(&TokenSequence, RelationType)> = batch.iter().map(|(s, l)| (s, *l)).collect();
    let names: Vec<(String, usize)> = params.named_tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let mut out = Vec::new();
    let mut work = params.clone();
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.tensors_mut()[ti].data[i];
            work.tensors_mut()[ti].data[i] = orig + h;
            let up = batch_loss(&work, &refs, weights).unwrap();
            work.tensors_mut()[ti].data[i] = orig - h;
            let down = batch_loss(&work, &refs, weights).unwrap();
            work.tensors_mut()[ti].data[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push((name, g));
    }
    out
}

/// Largest element-wise relative error `|a - n| / max(|a|, |n|, GRAD_FLOOR)`
/// per tensor.
pub fn max_relative_errors(analytic: &ModelParameters, numeric: &[(String, Vec<f64>)]) -> Vec<(String, f64)> {
    analytic
        .named_tensors()
        .into_iter()
        .zip(numeric)
        .map(|((name, t), (_, n))| {
            let worst = t
                .data
                .iter()
                .zip(n)
                .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
