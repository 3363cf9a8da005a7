use crate::error::{Error, Result};
use crate::linalg::{
    affine, affine_backward, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, softmax_backward_in_place,
    softmax_in_place, MatMut, MatRef,
};
use crate::tokenizer::TokenSequence;

use super::{LayerParams, ModelParameters, LAYER_NORM_EPS};

/// Activations of one encoder layer kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x n x n` attention probabilities.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    x1: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
}

/// Forward activations for one sequence.
///
/// Only the `n` real positions are materialised. Padding keys are masked with
/// an additive negative infinity, so their softmax weight is exactly zero and
/// they cannot influence any real position; dropping them is equivalent.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub n: usize,
    ids: Vec<u32>,
    pub(crate) layers: Vec<LayerCache>,
    /// Final hidden states, `n x hidden`, row-major.
    pub hidden: Vec<f64>,
    d: usize,
}

impl ForwardTrace {
    /// Final-layer state of the `[CLS]` position.
    pub fn cls_feature(&self) -> &[f64] {
        &self.hidden[..self.d]
    }

    pub fn hidden_row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.d..(i + 1) * self.d]
    }

    pub fn width(&self) -> usize {
        self.d
    }

    /// Attention probabilities of `layer`, shaped `heads x n x n`.
    pub fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].probs
    }
}

fn check_sequence(params: &ModelParameters, seq: &TokenSequence) -> Result<usize> {
    let cfg = &params.config;
    let n = seq.n_real;
    if seq.ids.len() > cfg.max_len || n == 0 || n > seq.ids.len() {
        return Err(Error::Data(format!(
            "sequence of length {} with {} real tokens does not fit max_len {}",
            seq.ids.len(),
            n,
            cfg.max_len
        )));
    }
    if seq.attention_mask.len() != seq.ids.len()
        || seq.attention_mask.iter().enumerate().any(|(i, &m)| (m == 1) != (i < n))
    {
        return Err(Error::Data("attention mask must mark exactly the leading real tokens".into()));
    }
    if let Some(bad) = seq.ids[..n].iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(n)
}

pub fn encoder_forward(params: &ModelParameters, seq: &TokenSequence) -> Result<ForwardTrace> {
    let n = check_sequence(params, seq)?;
    let d = params.config.hidden;
    let ids = seq.ids[..n].to_vec();

    let mut x = vec![0.0; n * d];
    for (i, &id) in ids.iter().enumerate() {
        let tok = &params.token_embeddings.data[id as usize * d..(id as usize + 1) * d];
        let pos = &params.position_embeddings.data[i * d..(i + 1) * d];
        for j in 0..d {
            x[i * d + j] = tok[j] + pos[j];
        }
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = layer_forward(layer, params.config.heads, n, d, x);
        layers.push(cache);
        x = out;
    }
    Ok(ForwardTrace {
        n,
        ids,
        layers,
        hidden: x,
        d,
    })
}

fn layer_forward(p: &LayerParams, heads: usize, n: usize, d: usize, input: Vec<f64>) -> (Vec<f64>, LayerCache) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ffn = p.b1.len();

    let mut q = vec![0.0; n * d];
    let mut k = vec![0.0; n * d];
    let mut v = vec![0.0; n * d];
    affine(&input, n, d, &p.wq.data, &p.bq.data, &mut q);
    affine(&input, n, d, &p.wk.data, &p.bk.data, &mut k);
    affine(&input, n, d, &p.wv.data, &p.bv.data, &mut v);

    let mut probs = vec![0.0; heads * n * n];
    let mut ctx = vec![0.0; n * d];
    for h in 0..heads {
        let ph = &mut probs[h * n * n..(h + 1) * n * n];
        gemm(
            MatRef::columns(&q, n, d, h * dh, dh),
            MatRef::columns(&k, n, d, h * dh, dh).t(),
            0.0,
            MatMut::new(ph, n, n),
        );
        for row in ph.chunks_exact_mut(n) {
            row.iter_mut().for_each(|s| *s *= scale);
            softmax_in_place(row);
        }
        gemm(
            MatRef::new(ph, n, n),
            MatRef::columns(&v, n, d, h * dh, dh),
            0.0,
            MatMut::columns(&mut ctx, n, d, h * dh, dh),
        );
    }

    let mut y1 = input.clone();
    gemm(MatRef::new(&ctx, n, d), MatRef::new(&p.wo.data, d, d), 1.0, MatMut::new(&mut y1, n, d));
    for row in y1.chunks_exact_mut(d) {
        row.iter_mut().zip(&p.bo.data).for_each(|(a, b)| *a += b);
    }
    let mut ln1_xhat = vec![0.0; n * d];
    let mut ln1_rstd = vec![0.0; n];
    let mut x1 = vec![0.0; n * d];
    layer_norm(&y1, d, &p.ln1_gamma.data, &p.ln1_beta.data, LAYER_NORM_EPS, &mut ln1_xhat, &mut ln1_rstd, &mut x1);

    let mut ffn_pre = vec![0.0; n * ffn];
    affine(&x1, n, d, &p.w1.data, &p.b1.data, &mut ffn_pre);
    let ffn_act: Vec<f64> = ffn_pre.iter().map(|&z| gelu(z)).collect();
    let mut y2 = x1.clone();
    gemm(MatRef::new(&ffn_act, n, ffn), MatRef::new(&p.w2.data, ffn, d), 1.0, MatMut::new(&mut y2, n, d));
    for row in y2.chunks_exact_mut(d) {
        row.iter_mut().zip(&p.b2.data).for_each(|(a, b)| *a += b);
    }
    let mut ln2_xhat = vec![0.0; n * d];
    let mut ln2_rstd = vec![0.0; n];
    let mut out = vec![0.0; n * d];
    layer_norm(&y2, d, &p.ln2_gamma.data, &p.ln2_beta.data, LAYER_NORM_EPS, &mut ln2_xhat, &mut ln2_rstd, &mut out);

    (
        out,
        LayerCache {
            input,
            q,
            k,
            v,
            probs,
            ctx,
            ln1_xhat,
            ln1_rstd,
            x1,
            ffn_pre,
            ffn_act,
            ln2_xhat,
            ln2_rstd,
        },
    )
}

/// Back-propagates `dhidden` (gradient w.r.t. the final states) into `grads`.
pub(crate) fn encoder_backward(
    params: &ModelParameters,
    trace: &ForwardTrace,
    mut dhidden: Vec<f64>,
    grads: &mut ModelParameters,
) {
    let n = trace.n;
    let d = trace.d;
    for (l, cache) in trace.layers.iter().enumerate().rev() {
        dhidden = layer_backward(&params.layers[l], &mut grads.layers[l], params.config.heads, n, d, cache, dhidden);
    }
    for (i, &id) in trace.ids.iter().enumerate() {
        let row = &dhidden[i * d..(i + 1) * d];
        let tok = &mut grads.token_embeddings.data[id as usize * d..(id as usize + 1) * d];
        tok.iter_mut().zip(row).for_each(|(g, r)| *g += r);
        let pos = &mut grads.position_embeddings.data[i * d..(i + 1) * d];
        pos.iter_mut().zip(row).for_each(|(g, r)| *g += r);
    }
}

fn layer_backward(
    p: &LayerParams,
    g: &mut LayerParams,
    heads: usize,
    n: usize,
    d: usize,
    c: &LayerCache,
    mut dout: Vec<f64>,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let ffn = p.b1.len();

    // LN2: dout becomes d(y2) where y2 = x1 + ffn(x1).
    layer_norm_backward(&c.ln2_xhat, &c.ln2_rstd, d, &p.ln2_gamma.data, &mut dout, &mut g.ln2_gamma.data, &mut g.ln2_beta.data);
    let dy2 = dout;
    let mut dx1 = dy2.clone();
    let mut dact = vec![0.0; n * ffn];
    affine_backward(&c.ffn_act, n, ffn, &p.w2.data, &dy2, &mut g.w2.data, &mut g.b2.data, Some(&mut dact));
    for (da, &z) in dact.iter_mut().zip(&c.ffn_pre) {
        *da *= gelu_grad(z);
    }
    affine_backward(&c.x1, n, d, &p.w1.data, &dact, &mut g.w1.data, &mut g.b1.data, Some(&mut dx1));

    // LN1: dx1 becomes d(y1) where y1 = input + attn(input).
    layer_norm_backward(&c.ln1_xhat, &c.ln1_rstd, d, &p.ln1_gamma.data, &mut dx1, &mut g.ln1_gamma.data, &mut g.ln1_beta.data);
    let dy1 = dx1;
    let mut dinput = dy1.clone();
    let mut dctx = vec![0.0; n * d];
    affine_backward(&c.ctx, n, d, &p.wo.data, &dy1, &mut g.wo.data, &mut g.bo.data, Some(&mut dctx));

    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    let mut dprobs = vec![0.0; n * n];
    for h in 0..heads {
        let ph = &c.probs[h * n * n..(h + 1) * n * n];
        gemm(
            MatRef::columns(&dctx, n, d, h * dh, dh),
            MatRef::columns(&c.v, n, d, h * dh, dh).t(),
            0.0,
            MatMut::new(&mut dprobs, n, n),
        );
        gemm(
            MatRef::new(ph, n, n).t(),
            MatRef::columns(&dctx, n, d, h * dh, dh),
            0.0,
            MatMut::columns(&mut dv, n, d, h * dh, dh),
        );
        for (prow, drow) in ph.chunks_exact(n).zip(dprobs.chunks_exact_mut(n)) {
            softmax_backward_in_place(prow, drow);
            drow.iter_mut().for_each(|s| *s *= scale);
        }
        gemm(
            MatRef::new(&dprobs, n, n),
            MatRef::columns(&c.k, n, d, h * dh, dh),
            0.0,
            MatMut::columns(&mut dq, n, d, h * dh, dh),
        );
        gemm(
            MatRef::new(&dprobs, n, n).t(),
            MatRef::columns(&c.q, n, d, h * dh, dh),
            0.0,
            MatMut::columns(&mut dk, n, d, h * dh, dh),
        );
    }
    affine_backward(&c.input, n, d, &p.wq.data, &dq, &mut g.wq.data, &mut g.bq.data, Some(&mut dinput));
    affine_backward(&c.input, n, d, &p.wk.data, &dk, &mut g.wk.data, &mut g.bk.data, Some(&mut dinput));
    affine_backward(&c.input, n, d, &p.wv.data, &dv, &mut g.wv.data, &mut g.bv.data, Some(&mut dinput));
    dinput
}
