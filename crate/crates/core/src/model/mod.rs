//! The TSB network: embedding with positional encoding, encoder and decoder
//! stacks whose feed-forward sublayers are stacked Bi-LSTMs, and a linear
//! output head.

mod checkpoint;
mod network;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use network::{
    decoder_input, decoder_layer_forward, decoder_layer_trace, embed_with_positional_encoding,
    encoder_layer_forward, forward_teacher_forced, hard_decision, model_forward_teacher_forced,
    positional_encoding, predict_autoregressive, DecoderTrace, LAYER_NORM_EPS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, HeadProjections};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::recurrent::StackedBiLstm;
use crate::tensor::Tensor;

/// Network dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of spectrum channels `F`.
    pub channels: usize,
    /// Encoder input length `T` in time slots.
    pub input_len: usize,
    /// Prediction horizon `M`.
    pub horizon: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Bi-LSTM layers per feed-forward sublayer.
    pub bilstm_layers: usize,
    /// Add sinusoidal positional encoding after embedding.
    pub positional_encoding: bool,
    /// Restrict the decoder Bi-LSTM's backward cell to the current row so
    /// the whole decoder is causal.
    pub causal_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            input_len: 96,
            horizon: 48,
            d_model: 64,
            enc_layers: 3,
            dec_layers: 3,
            heads: 8,
            bilstm_layers: 2,
            positional_encoding: true,
            causal_decoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("bilstm_layers", self.bilstm_layers),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("{field}: must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!("d_model: must be even, got {}", self.d_model)));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            heads: self.heads,
        }
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (f, d, l) = (self.channels, self.d_model, self.bilstm_layers);
        let h = d / 2;
        let attention = 4 * d * d;
        // two directions × (input weights + recurrent weights + biases), four gates each
        let bilstm_layer = 2 * 4 * (d * h + h * h + h);
        let norm = 2 * d;
        let encoder = attention + l * bilstm_layer + 2 * norm;
        let decoder = 2 * attention + l * bilstm_layer + 3 * norm;
        (f * d + d) + self.enc_layers * encoder + self.dec_layers * decoder + norm + (d * f + f)
    }
}

/// Scale and shift of one layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        NormParams {
            gamma: store.add(format!("{prefix}.gamma"), ParamKind::NormScale, Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{prefix}.beta"), ParamKind::NormShift, Tensor::zeros(&[d])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn: HeadProjections,
    pub bilstm: StackedBiLstm,
    pub norm1: NormParams,
    pub norm2: NormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: HeadProjections,
    pub cross_attn: HeadProjections,
    pub bilstm: StackedBiLstm,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub norm3: NormParams,
}

/// All learnable tensors of a TSB network plus their structural layout.
#[derive(Clone, Debug)]
pub struct TsbParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub emb_w: ParamId,
    pub emb_b: ParamId,
    pub encoders: Vec<EncoderLayerParams>,
    pub decoders: Vec<DecoderLayerParams>,
    pub final_norm: NormParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl TsbParams {
    /// Randomly initialized parameters for `config`, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (f, d) = (config.channels, config.d_model);
        let att = config.attention();
        let emb_w = store.add_glorot("embed.w", f, d, &mut rng);
        let emb_b = store.add("embed.b", ParamKind::Bias, Tensor::zeros(&[d]));
        let mut encoders = Vec::with_capacity(config.enc_layers);
        for n in 0..config.enc_layers {
            let p = format!("enc.{n}");
            encoders.push(EncoderLayerParams {
                attn: HeadProjections::init(&mut store, &format!("{p}.attn"), &att, &mut rng),
                bilstm: StackedBiLstm::init(&mut store, &format!("{p}.bilstm"), d, config.bilstm_layers, &mut rng)?,
                norm1: NormParams::init(&mut store, &format!("{p}.norm1"), d),
                norm2: NormParams::init(&mut store, &format!("{p}.norm2"), d),
            });
        }
        let mut decoders = Vec::with_capacity(config.dec_layers);
        for e in 0..config.dec_layers {
            let p = format!("dec.{e}");
            decoders.push(DecoderLayerParams {
                self_attn: HeadProjections::init(&mut store, &format!("{p}.self_attn"), &att, &mut rng),
                cross_attn: HeadProjections::init(&mut store, &format!("{p}.cross_attn"), &att, &mut rng),
                bilstm: StackedBiLstm::init(&mut store, &format!("{p}.bilstm"), d, config.bilstm_layers, &mut rng)?,
                norm1: NormParams::init(&mut store, &format!("{p}.norm1"), d),
                norm2: NormParams::init(&mut store, &format!("{p}.norm2"), d),
                norm3: NormParams::init(&mut store, &format!("{p}.norm3"), d),
            });
        }
        let final_norm = NormParams::init(&mut store, "final_norm", d);
        let out_w = store.add_glorot("head.w", d, f, &mut rng);
        let out_b = store.add("head.b", ParamKind::Bias, Tensor::zeros(&[f]));
        Ok(TsbParams {
            config: config.clone(),
            store,
            emb_w,
            emb_b,
            encoders,
            decoders,
            final_norm,
            out_w,
            out_b,
        })
    }

    pub fn num_elements(&self) -> usize {
        self.store.num_elements()
    }
}
