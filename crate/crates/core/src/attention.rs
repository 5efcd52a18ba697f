//! Scaled dot-product and multi-head attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Additive logit applied to disallowed query/key pairs.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig { d_model, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 {
            return Err(Error::config("d_model and heads must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads: d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Per-head key/query width; values use the same width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Projection weights of one multi-head attention block.
///
/// `w_q`, `w_k` and `w_v` are `d_model × (heads·d_k)`; column block `i`
/// (columns `i·d_k .. (i+1)·d_k`) is head `i`'s projection. `w_out` is
/// `(heads·d_k) × d_model`.
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
}

impl HeadProjections {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let inner = cfg.heads * cfg.d_k();
        HeadProjections {
            w_q: store.add_glorot(format!("{prefix}.w_q"), d, inner, rng),
            w_k: store.add_glorot(format!("{prefix}.w_k"), d, inner, rng),
            w_v: store.add_glorot(format!("{prefix}.w_v"), d, inner, rng),
            w_out: store.add_glorot(format!("{prefix}.w_out"), inner, d, rng),
        }
    }

    /// Head `i`'s query projection as a standalone `d_model × d_k` matrix.
    pub fn head_query(&self, store: &ParamStore, cfg: &AttentionConfig, head: usize) -> Tensor {
        column_block(store.get(self.w_q), head * cfg.d_k(), cfg.d_k())
    }
}

fn column_block(m: &Tensor, start: usize, width: usize) -> Tensor {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        data.extend_from_slice(&m.data()[r * cols + start..r * cols + start + width]);
    }
    Tensor::from_parts(vec![rows, width], data)
}

/// Boolean `queries × keys` pattern of allowed attention pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("mask", &[rows, cols], &[allowed.len()]));
        }
        Ok(AttentionMask { rows, cols, allowed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.cols + key]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// The mask as additive logits: 0 where allowed, [`MASK_LOGIT`] elsewhere.
    pub fn to_logits(&self) -> Result<Tensor> {
        for r in 0..self.rows {
            if !(0..self.cols).any(|c| self.is_allowed(r, c)) {
                return Err(Error::contract(format!(
                    "attention mask row {r} allows no keys"
                )));
            }
        }
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_LOGIT })
            .collect();
        Ok(Tensor::from_parts(vec![self.rows, self.cols], data))
    }
}

/// Lower-triangular mask: query `i` may attend to keys `j <= i`.
pub fn make_causal_mask(len: usize) -> AttentionMask {
    let allowed = (0..len * len).map(|k| k % len <= k / len).collect();
    AttentionMask {
        rows: len,
        cols: len,
        allowed,
    }
}

/// `Softmax(QKᵀ/√d_k)·V`, also returning the attention weights.
///
/// Operands are `[T, d]` matrices or `[B, T, d]` batches of them; a mask is
/// `T_q × T_k` and applies to every batch element.
pub fn attention_with_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    let rank = sq.len();
    if !(rank == 2 || rank == 3) || sk.len() != rank || sv.len() != rank {
        return Err(Error::dim("attention", &sq, &sk));
    }
    let d_k = sq[rank - 1];
    if sk[rank - 1] != d_k || sk[rank - 2] != sv[rank - 2] || (rank == 3 && (sq[0] != sk[0] || sk[0] != sv[0])) {
        return Err(Error::dim("attention", &sq, &sk));
    }
    let q_scaled = g.scale(q, 1.0 / (d_k as f64).sqrt())?;
    let kt = g.transpose(k)?;
    let mut logits = g.matmul(q_scaled, kt)?;
    if let Some(mask) = mask {
        let (tq, tk) = (sq[rank - 2], sk[rank - 2]);
        if mask.rows() != tq || mask.cols() != tk {
            return Err(Error::dim("attention mask", &[mask.rows(), mask.cols()], &[tq, tk]));
        }
        let m = g.constant(mask.to_logits()?);
        logits = g.add(logits, m)?;
    }
    let weights = g.softmax(logits, rank - 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// `Softmax(QKᵀ/√d_k)·V`; see [`attention_with_weights`].
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    attention_with_weights(g, q, k, v, mask).map(|(out, _)| out)
}

/// `[B, T, heads·d_k]` → `[B·heads, T, d_k]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, inner) = (s[0], s[1], s[2]);
    let dk = inner / heads;
    let x = g.reshape(x, &[b, t, heads, dk])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b * heads, t, dk])
}

/// Inverse of [`split_heads`]: heads land in consecutive column blocks.
fn merge_heads(g: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, dk) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, t, dk])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, t, heads * dk])
}

/// Multi-head attention: per-head projected attention, heads concatenated,
/// then projected by `w_out`.
///
/// `x_q` is `[T_q, d_model]` or `[B, T_q, d_model]`; `x_kv` matches its rank.
/// Passing the same variable for both gives self-attention.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    params: &Binding,
    proj: &HeadProjections,
    cfg: &AttentionConfig,
    x_q: Var,
    x_kv: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let (sq, skv) = (g.shape(x_q).to_vec(), g.shape(x_kv).to_vec());
    let rank = sq.len();
    let valid = (rank == 2 || rank == 3)
        && skv.len() == rank
        && sq[rank - 1] == cfg.d_model
        && skv[rank - 1] == cfg.d_model
        && (rank == 2 || sq[0] == skv[0]);
    if !valid {
        return Err(Error::dim("multi_head_attention", &sq, &skv));
    }
    let (xq3, xkv3) = if rank == 2 {
        let a = g.reshape(x_q, &[1, sq[0], sq[1]])?;
        let b = g.reshape(x_kv, &[1, skv[0], skv[1]])?;
        (a, b)
    } else {
        (x_q, x_kv)
    };
    let batch = g.shape(xq3)[0];
    let q = g.matmul(xq3, params[proj.w_q])?;
    let k = g.matmul(xkv3, params[proj.w_k])?;
    let v = g.matmul(xkv3, params[proj.w_v])?;
    let q = split_heads(g, q, cfg.heads)?;
    let k = split_heads(g, k, cfg.heads)?;
    let v = split_heads(g, v, cfg.heads)?;
    let att = scaled_dot_product_attention(g, q, k, v, mask)?;
    let merged = merge_heads(g, att, batch, cfg.heads)?;
    let out = g.matmul(merged, params[proj.w_out])?;
    if rank == 2 {
        g.reshape(out, &[sq[0], cfg.d_model])
    } else {
        Ok(out)
    }
}
