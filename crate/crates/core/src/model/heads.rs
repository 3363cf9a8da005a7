use crate::error::{Error, Result};
use crate::linalg::{affine, affine_backward, gemm, sigmoid, softmax_backward_in_place, softmax_in_place, MatMut, MatRef};

use super::{ForwardTrace, HeadKind, HeadParams, LogitVector, ModelParameters};

#[derive(Debug, Clone)]
pub(crate) enum HeadCache {
    Cls,
    Lstm {
        /// Post-activation gates `[i, f, g, o]` per step, `n x 4d`.
        gates: Vec<f64>,
        cell: Vec<f64>,
        cell_tanh: Vec<f64>,
        /// Hidden state per step, `n x d`.
        states: Vec<f64>,
    },
    Attn {
        /// `tanh(H W + b)`, `n x d`.
        proj: Vec<f64>,
        weights: Vec<f64>,
    },
}

/// Classifier input, logits and whatever the head needs for backward.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub feature: Vec<f64>,
    pub logits: LogitVector,
    pub(crate) cache: HeadCache,
}

impl HeadOutput {
    /// Attention pooling weights, for the attention head only.
    pub fn pooling_weights(&self) -> Option<&[f64]> {
        match &self.cache {
            HeadCache::Attn { weights, .. } => Some(weights),
            _ => None,
        }
    }
}

pub fn head_forward(params: &ModelParameters, trace: &ForwardTrace) -> Result<HeadOutput> {
    let d = trace.width();
    let n = trace.n;
    let kind = params.config.head_kind;
    let matches = matches!(
        (kind, &params.head),
        (HeadKind::Cls, HeadParams::Cls) | (HeadKind::Lstm, HeadParams::Lstm { .. }) | (HeadKind::Attn, HeadParams::Attn { .. })
    );
    if !matches {
        return Err(Error::Config(format!("head parameters do not match head kind {kind:?}")));
    }
    let (feature, cache) = match &params.head {
        HeadParams::Cls => (trace.cls_feature().to_vec(), HeadCache::Cls),
        HeadParams::Lstm { w_ih, w_hh, bias } => {
            let mut pre = vec![0.0; n * 4 * d];
            affine(&trace.hidden, n, d, &w_ih.data, &bias.data, &mut pre);
            let mut gates = vec![0.0; n * 4 * d];
            let mut cell = vec![0.0; n * d];
            let mut cell_tanh = vec![0.0; n * d];
            let mut states = vec![0.0; n * d];
            let mut h_prev = vec![0.0; d];
            let mut c_prev = vec![0.0; d];
            for t in 0..n {
                let z = &mut pre[t * 4 * d..(t + 1) * 4 * d];
                gemm(MatRef::new(&h_prev, 1, d), MatRef::new(&w_hh.data, d, 4 * d), 1.0, MatMut::new(z, 1, 4 * d));
                let gt = &mut gates[t * 4 * d..(t + 1) * 4 * d];
                for j in 0..d {
                    let i = sigmoid(z[j]);
                    let f = sigmoid(z[d + j]);
                    let g = z[2 * d + j].tanh();
                    let o = sigmoid(z[3 * d + j]);
                    gt[j] = i;
                    gt[d + j] = f;
                    gt[2 * d + j] = g;
                    gt[3 * d + j] = o;
                    let c = f * c_prev[j] + i * g;
                    let tc = c.tanh();
                    cell[t * d + j] = c;
                    cell_tanh[t * d + j] = tc;
                    states[t * d + j] = o * tc;
                }
                h_prev.copy_from_slice(&states[t * d..(t + 1) * d]);
                c_prev.copy_from_slice(&cell[t * d..(t + 1) * d]);
            }
            (
                h_prev,
                HeadCache::Lstm {
                    gates,
                    cell,
                    cell_tanh,
                    states,
                },
            )
        }
        HeadParams::Attn { w, bias, v } => {
            let mut proj = vec![0.0; n * d];
            affine(&trace.hidden, n, d, &w.data, &bias.data, &mut proj);
            proj.iter_mut().for_each(|x| *x = x.tanh());
            let mut weights: Vec<f64> = proj
                .chunks_exact(d)
                .map(|u| u.iter().zip(&v.data).map(|(a, b)| a * b).sum())
                .collect();
            softmax_in_place(&mut weights);
            let mut pooled = vec![0.0; d];
            for (i, a) in weights.iter().enumerate() {
                for (p, h) in pooled.iter_mut().zip(trace.hidden_row(i)) {
                    *p += a * h;
                }
            }
            (pooled, HeadCache::Attn { proj, weights })
        }
    };
    let mut scores = vec![0.0; params.config.n_classes];
    affine(&feature, 1, d, &params.classifier_weight.data, &params.classifier_bias.data, &mut scores);
    Ok(HeadOutput {
        feature,
        logits: LogitVector::new(scores),
        cache,
    })
}

/// Accumulates head and classifier gradients; returns the gradient with
/// respect to the encoder's final hidden states.
pub(crate) fn head_backward(
    params: &ModelParameters,
    trace: &ForwardTrace,
    out: &HeadOutput,
    dlogits: &[f64],
    grads: &mut ModelParameters,
) -> Vec<f64> {
    let d = trace.width();
    let n = trace.n;
    let mut dfeature = vec![0.0; d];
    affine_backward(
        &out.feature,
        1,
        d,
        &params.classifier_weight.data,
        dlogits,
        &mut grads.classifier_weight.data,
        &mut grads.classifier_bias.data,
        Some(&mut dfeature),
    );
    let mut dhidden = vec![0.0; n * d];
    match (&params.head, &mut grads.head, &out.cache) {
        (HeadParams::Cls, _, _) => dhidden[..d].copy_from_slice(&dfeature),
        (
            HeadParams::Lstm { w_ih, w_hh, .. },
            HeadParams::Lstm {
                w_ih: gw_ih,
                w_hh: gw_hh,
                bias: gbias,
            },
            HeadCache::Lstm {
                gates,
                cell,
                cell_tanh,
                states,
            },
        ) => {
            let mut dz = vec![0.0; n * 4 * d];
            let mut dh = dfeature;
            let mut dc = vec![0.0; d];
            for t in (0..n).rev() {
                let gt = &gates[t * 4 * d..(t + 1) * 4 * d];
                let dzt = &mut dz[t * 4 * d..(t + 1) * 4 * d];
                for j in 0..d {
                    let (i, f, g, o) = (gt[j], gt[d + j], gt[2 * d + j], gt[3 * d + j]);
                    let tc = cell_tanh[t * d + j];
                    let c_prev = if t > 0 { cell[(t - 1) * d + j] } else { 0.0 };
                    let dcell = dc[j] + dh[j] * o * (1.0 - tc * tc);
                    dzt[j] = dcell * g * i * (1.0 - i);
                    dzt[d + j] = dcell * c_prev * f * (1.0 - f);
                    dzt[2 * d + j] = dcell * i * (1.0 - g * g);
                    dzt[3 * d + j] = dh[j] * tc * o * (1.0 - o);
                    dc[j] = dcell * f;
                }
                let mut dh_prev = vec![0.0; d];
                gemm(MatRef::new(dzt, 1, 4 * d), MatRef::new(&w_hh.data, d, 4 * d).t(), 0.0, MatMut::new(&mut dh_prev, 1, d));
                dh = dh_prev;
            }
            // h_{t-1} rows: zero state, then states[0..n-1].
            if n > 1 {
                gemm(
                    MatRef::new(&states[..(n - 1) * d], n - 1, d).t(),
                    MatRef::new(&dz[4 * d..], n - 1, 4 * d),
                    1.0,
                    MatMut::new(&mut gw_hh.data, d, 4 * d),
                );
            }
            affine_backward(&trace.hidden, n, d, &w_ih.data, &dz, &mut gw_ih.data, &mut gbias.data, Some(&mut dhidden));
        }
        (
            HeadParams::Attn { w, v, .. },
            HeadParams::Attn {
                w: gw,
                bias: gbias,
                v: gv,
            },
            HeadCache::Attn { proj, weights },
        ) => {
            let mut dscore: Vec<f64> = (0..n)
                .map(|i| trace.hidden_row(i).iter().zip(&dfeature).map(|(h, g)| h * g).sum())
                .collect();
            for (i, a) in weights.iter().enumerate() {
                for (dh, g) in dhidden[i * d..(i + 1) * d].iter_mut().zip(&dfeature) {
                    *dh += a * g;
                }
            }
            softmax_backward_in_place(weights, &mut dscore);
            let mut dproj = vec![0.0; n * d];
            for i in 0..n {
                let u = &proj[i * d..(i + 1) * d];
                for j in 0..d {
                    gv.data[j] += dscore[i] * u[j];
                    dproj[i * d + j] = dscore[i] * v.data[j] * (1.0 - u[j] * u[j]);
                }
            }
            affine_backward(&trace.hidden, n, d, &w.data, &dproj, &mut gw.data, &mut gbias.data, Some(&mut dhidden));
        }
        _ => unreachable!("head kind checked in head_forward"),
    }
    dhidden
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encoder_forward, init_params, EncoderConfig, N_CLASSES};
    use crate::tokenizer::TokenSequence;

    fn cfg(kind: HeadKind) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn: 16,
            max_len: 10,
            vocab_size: 20,
            head_kind: kind,
            n_classes: N_CLASSES,
            seed: 5,
        }
    }

    fn seq(real: &[u32]) -> TokenSequence {
        let mut ids = real.to_vec();
        ids.resize(10, 0);
        TokenSequence {
            attention_mask: (0..10).map(|i| u8::from(i < real.len())).collect(),
            ids,
            n_real: real.len(),
        }
    }

    #[test]
    fn cls_head_has_fourteen_outputs() {
        for kind in HeadKind::ALL {
            let p = init_params(&cfg(kind)).unwrap();
            let t = encoder_forward(&p, &seq(&[2, 5, 3])).unwrap();
            let out = head_forward(&p, &t).unwrap();
            assert_eq!(out.logits.scores.len(), 14);
            assert!((out.logits.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_pooling_of_identical_rows_is_that_row() {
        let p = init_params(&cfg(HeadKind::Attn)).unwrap();
        let mut t = encoder_forward(&p, &seq(&[2, 5, 6, 3])).unwrap();
        let row: Vec<f64> = t.hidden_row(1).to_vec();
        for i in 0..t.n {
            t.hidden[i * 8..(i + 1) * 8].copy_from_slice(&row);
        }
        let out = head_forward(&p, &t).unwrap();
        for (a, b) in out.feature.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.pooling_weights().unwrap().len(), 4);
    }

    #[test]
    fn lstm_single_step_matches_cell_equation() {
        let p = init_params(&cfg(HeadKind::Lstm)).unwrap();
        let t = encoder_forward(&p, &seq(&[2])).unwrap();
        let out = head_forward(&p, &t).unwrap();
        let HeadParams::Lstm { w_ih, bias, .. } = &p.head else { unreachable!() };
        let d = 8;
        let x = t.cls_feature();
        for j in 0..d {
            let z = |gate: usize| -> f64 {
                bias.data[gate * d + j] + (0..d).map(|k| x[k] * w_ih.data[k * 4 * d + gate * d + j]).sum::<f64>()
            };
            let c = sigmoid(z(0)) * z(2).tanh();
            let h = sigmoid(z(3)) * c.tanh();
            assert!((out.feature[j] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let mut p = init_params(&cfg(HeadKind::Attn)).unwrap();
        p.config.head_kind = HeadKind::Lstm;
        let t = encoder_forward(&p, &seq(&[2, 3])).unwrap();
        assert!(head_forward(&p, &t).is_err());
    }
}
