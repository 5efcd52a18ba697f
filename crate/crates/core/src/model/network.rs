use super::{DecoderLayerParams, EncoderLayerParams, NormParams, TsbParams};
use crate::attention::{make_causal_mask, multi_head_attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::recurrent::{stacked_bilstm_forward, stacked_bilstm_forward_with};
use crate::tensor::{Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d_model as f64);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, d_model], data)
}

fn residual_norm(g: &mut Graph, p: &Binding, norm: &NormParams, sub: Var, skip: Var) -> Result<Var> {
    let sum = g.add(sub, skip)?;
    g.layer_norm(sum, p[norm.gamma], p[norm.beta], LAYER_NORM_EPS)
}

/// `x·W_emb + b_emb` plus the positional table, for `x` of shape `[B, L, F]`.
pub fn embed_with_positional_encoding(g: &mut Graph, params: &TsbParams, p: &Binding, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[2] != params.config.channels {
        return Err(Error::dim("embed", &s, &[params.config.channels]));
    }
    let xw = g.matmul(x, p[params.emb_w])?;
    let e = g.add(xw, p[params.emb_b])?;
    if !params.config.positional_encoding {
        return Ok(e);
    }
    let pe = g.constant(positional_encoding(s[1], params.config.d_model));
    g.add(e, pe)
}

/// `s¹ = Norm(MHA(x) + x)`, output `Norm(BiLSTM(s¹) + s¹)`.
pub fn encoder_layer_forward(
    g: &mut Graph,
    p: &Binding,
    layer: &EncoderLayerParams,
    att: &AttentionConfig,
    x: Var,
) -> Result<Var> {
    let a = multi_head_attention(g, p, &layer.attn, att, x, x, None)?;
    let s1 = residual_norm(g, p, &layer.norm1, a, x)?;
    let r = stacked_bilstm_forward(g, p, &layer.bilstm, s1)?;
    residual_norm(g, p, &layer.norm2, r, s1)
}

/// Intermediate outputs of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct DecoderTrace {
    /// After masked self-attention and its residual norm.
    pub s1: Var,
    /// After cross-attention over the encoder output.
    pub s2: Var,
    pub out: Var,
}

pub fn decoder_layer_trace(
    g: &mut Graph,
    p: &Binding,
    layer: &DecoderLayerParams,
    att: &AttentionConfig,
    q: Var,
    enc_out: Var,
    causal: bool,
) -> Result<DecoderTrace> {
    let len = g.shape(q)[g.shape(q).len() - 2];
    let mask = make_causal_mask(len);
    let a1 = multi_head_attention(g, p, &layer.self_attn, att, q, q, Some(&mask))?;
    let s1 = residual_norm(g, p, &layer.norm1, a1, q)?;
    let a2 = multi_head_attention(g, p, &layer.cross_attn, att, s1, enc_out, None)?;
    let s2 = residual_norm(g, p, &layer.norm2, a2, s1)?;
    let r = stacked_bilstm_forward_with(g, p, &layer.bilstm, s2, causal)?;
    let out = residual_norm(g, p, &layer.norm3, r, s2)?;
    Ok(DecoderTrace { s1, s2, out })
}

/// Masked self-attention, cross-attention to `enc_out`, then the Bi-LSTM
/// stack, each wrapped in residual + layer norm. `causal` selects the
/// row-local backward cell.
pub fn decoder_layer_forward(
    g: &mut Graph,
    p: &Binding,
    layer: &DecoderLayerParams,
    att: &AttentionConfig,
    q: Var,
    enc_out: Var,
    causal: bool,
) -> Result<Var> {
    decoder_layer_trace(g, p, layer, att, q, enc_out, causal).map(|t| t.out)
}

fn encode(g: &mut Graph, params: &TsbParams, p: &Binding, enc_in: Var) -> Result<Var> {
    let att = params.config.attention();
    let mut x = embed_with_positional_encoding(g, params, p, enc_in)?;
    for layer in &params.encoders {
        x = encoder_layer_forward(g, p, layer, &att, x)?;
    }
    Ok(x)
}

fn decode_and_project(g: &mut Graph, params: &TsbParams, p: &Binding, dec_in: Var, enc_out: Var) -> Result<Var> {
    let att = params.config.attention();
    let mut y = embed_with_positional_encoding(g, params, p, dec_in)?;
    for layer in &params.decoders {
        y = decoder_layer_forward(g, p, layer, &att, y, enc_out, params.config.causal_decoder)?;
    }
    let n = params.final_norm;
    let y = g.layer_norm(y, p[n.gamma], p[n.beta], LAYER_NORM_EPS)?;
    let out = g.matmul(y, p[params.out_w])?;
    g.add(out, p[params.out_b])
}

/// Full forward pass on the graph: `enc_in` is `[B, T, F]`, `dec_in` is
/// `[B, M, F]`; returns predictions `[B, M, F]`.
pub fn forward_teacher_forced(g: &mut Graph, params: &TsbParams, p: &Binding, enc_in: Var, dec_in: Var) -> Result<Var> {
    let (se, sd) = (g.shape(enc_in).to_vec(), g.shape(dec_in).to_vec());
    if se.len() != 3 || sd.len() != 3 || se[0] != sd[0] {
        return Err(Error::dim("forward", &se, &sd));
    }
    let enc_out = encode(g, params, p, enc_in)?;
    decode_and_project(g, params, p, dec_in, enc_out)
}

fn as_batch(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.rank() {
        2 => {
            let s = t.shape().to_vec();
            Ok((t.clone().reshape(&[1, s[0], s[1]])?, true))
        }
        3 => Ok((t.clone(), false)),
        _ => Err(Error::dim("model input", t.shape(), &[3])),
    }
}

fn unbatch(t: Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        let s = t.shape().to_vec();
        t.reshape(&s[1..])
    } else {
        Ok(t)
    }
}

/// Decoder input for teacher forcing: the last encoder row followed by the
/// first `M − 1` target rows. Accepts `[T, F]`/`[M, F]` or batched inputs.
pub fn decoder_input(enc_in: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (e, squeeze) = as_batch(enc_in)?;
    let (t, _) = as_batch(target)?;
    let (b, len, f) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let m = t.shape()[1];
    if t.shape()[0] != b || t.shape()[2] != f {
        return Err(Error::dim("decoder_input", e.shape(), t.shape()));
    }
    let mut data = Vec::with_capacity(b * m * f);
    for bi in 0..b {
        let last = (bi * len + len - 1) * f;
        data.extend_from_slice(&e.data()[last..last + f]);
        data.extend_from_slice(&t.data()[bi * m * f..(bi * m + m - 1) * f]);
    }
    unbatch(Tensor::from_parts(vec![b, m, f], data), squeeze)
}

/// Teacher-forced prediction without gradient tracking.
pub fn model_forward_teacher_forced(params: &TsbParams, enc_in: &Tensor, dec_in: &Tensor) -> Result<Tensor> {
    let (e, squeeze) = as_batch(enc_in)?;
    let (d, _) = as_batch(dec_in)?;
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, false);
    let ev = g.constant(e);
    let dv = g.constant(d);
    let out = forward_teacher_forced(&mut g, params, &p, ev, dv)?;
    unbatch(g.value(out).clone(), squeeze)
}

/// Autoregressive forecast of `M` rows: the decoder starts from the last
/// encoder row and each generated row is appended to its input.
pub fn predict_autoregressive(params: &TsbParams, enc_in: &Tensor) -> Result<Tensor> {
    let (e, squeeze) = as_batch(enc_in)?;
    let (b, len, f) = (e.shape()[0], e.shape()[1], e.shape()[2]);
    let horizon = params.config.horizon;
    let mut g = Graph::new();
    let p = params.store.bind(&mut g, false);
    let ev = g.constant(e.clone());
    let enc_out = encode(&mut g, params, &p, ev)?;
    let mark = g.len();

    let mut rows: Vec<Vec<f64>> = (0..b)
        .map(|bi| e.data()[(bi * len + len - 1) * f..(bi * len + len) * f].to_vec())
        .collect();
    let mut preds = vec![Vec::with_capacity(horizon * f); b];
    for step in 1..=horizon {
        let dec = Tensor::from_parts(vec![b, step, f], rows.concat());
        let dv = g.constant(dec);
        let out = decode_and_project(&mut g, params, &p, dv, enc_out)?;
        let o = g.value(out).data();
        for bi in 0..b {
            let last = &o[(bi * step + step - 1) * f..(bi * step + step) * f];
            preds[bi].extend_from_slice(last);
            rows[bi].extend_from_slice(last);
        }
        g.truncate(mark);
    }
    unbatch(Tensor::from_parts(vec![b, horizon, f], preds.concat()), squeeze)
}

/// Availability decision per cell: 1 (unavailable) where power ≥ `threshold`,
/// 0 (available) otherwise.
pub fn hard_decision(pred_dbm: &Tensor, threshold_dbm: f64) -> Tensor {
    pred_dbm.map(|p| if p >= threshold_dbm { 1.0 } else { 0.0 })
}
