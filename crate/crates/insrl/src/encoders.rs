//! Sequence and type-set encoders.
//!
//! A sequence runs through: input embedding (word + position, projected to
//! `d_model`) → convolutional block → self-attention block → relation-aware
//! attention pooling. Type sets skip the convolutional block because their
//! order carries no meaning. Blocks are pre-norm residual; padding positions
//! are zeroed before convolutions and excluded from every attention softmax.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::data::{EncodedDescription, EncodedSentence, EncodedTypeSet};
use crate::error::{Error, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// Relation-aware attention over positions (the default).
    RelationAttention,
    /// Plain mean over non-pad positions (attention-free ablation).
    Mean,
}

#[derive(Clone, Debug)]
pub struct EncoderDims {
    pub d_model: usize,
    pub d_word: usize,
    /// Total position embedding width; sentences split it across two tables.
    pub d_position: usize,
    pub d_type: usize,
    pub heads: usize,
    pub conv_layers: usize,
    pub conv_width: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_position % 2 != 0 {
            return Err(Error::Config(format!(
                "d_position ({}) must be even: it splits into two tables",
                self.d_position
            )));
        }
        if self.conv_width % 2 == 0 {
            return Err(Error::Config(format!(
                "conv width ({}) must be odd",
                self.conv_width
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

// ── parameter bundles ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SatParams {
    pub ln: LayerNormParams,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct RatParams {
    pub ln: LayerNormParams,
    /// `W` applied to each position before the tanh.
    pub proj: ParamId,
    /// Scoring vector `w`.
    pub score: ParamId,
    /// Scalar offset `b`.
    pub offset: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayerParams {
    pub ln: LayerNormParams,
    pub kernels: ParamId,
}

/// One encoder instance (sentence, description, head types, or tail types).
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub conv: Vec<ConvLayerParams>,
    pub sat: SatParams,
    pub rat: RatParams,
}

/// Embedding tables shared by all encoder instances.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingTables {
    pub word: ParamId,
    pub pos_head: ParamId,
    pub pos_tail: ParamId,
    pub pos_desc: ParamId,
    pub type_embed: ParamId,
    /// Projects `[word; positions]` to `d_model`.
    pub token_proj: ParamId,
    /// Projects a type embedding to `d_model`.
    pub type_proj: ParamId,
}

// ── initialization ────────────────────────────────────────────────────

fn init_layer_norm<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    width: usize,
) -> LayerNormParams {
    LayerNormParams {
        gain: store.add(&format!("{prefix}.ln.gain"), Tensor::filled(&[1, width], T::one())),
        bias: store.add(&format!("{prefix}.ln.bias"), Tensor::zeros(&[1, width])),
    }
}

pub fn init_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dims: &EncoderDims,
    with_conv: bool,
) -> EncoderParams {
    let d = dims.d_model;
    let conv = if with_conv {
        (0..dims.conv_layers)
            .map(|i| {
                let p = format!("{prefix}.conv{i}");
                let fan = dims.conv_width * d;
                ConvLayerParams {
                    ln: init_layer_norm(store, &p, d),
                    kernels: store.add(
                        &format!("{p}.kernels"),
                        init::xavier(rng, &[dims.conv_width, d, d], fan, d),
                    ),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let sat = SatParams {
        ln: init_layer_norm(store, &format!("{prefix}.sat"), d),
        wq: store.add(&format!("{prefix}.sat.wq"), init::xavier(rng, &[d, d], d, d)),
        wk: store.add(&format!("{prefix}.sat.wk"), init::xavier(rng, &[d, d], d, d)),
        wv: store.add(&format!("{prefix}.sat.wv"), init::xavier(rng, &[d, d], d, d)),
        wo: store.add(&format!("{prefix}.sat.wo"), init::xavier(rng, &[d, d], d, d)),
    };
    let rat = RatParams {
        ln: init_layer_norm(store, &format!("{prefix}.rat"), d),
        proj: store.add(&format!("{prefix}.rat.proj"), init::xavier(rng, &[d, d], d, d)),
        score: store.add(&format!("{prefix}.rat.score"), init::xavier(rng, &[d, 1], d, 1)),
        offset: store.add(&format!("{prefix}.rat.offset"), Tensor::zeros(&[1, 1])),
    };
    EncoderParams { conv, sat, rat }
}

/// Embedding tables. Word rows present in `pretrained` are copied from it;
/// all other rows (and every position/type row) start uniform in ±0.1.
#[allow(clippy::too_many_arguments)]
pub fn init_embedding_tables<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    dims: &EncoderDims,
    words: &[String],
    n_types: usize,
    position_vocab: usize,
    pretrained: Option<&HashMap<String, Vec<f64>>>,
) -> EmbeddingTables {
    let half = dims.d_position / 2;
    let mut word = init::uniform::<T>(rng, &[words.len(), dims.d_word], -0.1, 0.1);
    if let Some(vectors) = pretrained {
        for (i, w) in words.iter().enumerate() {
            if let Some(v) = vectors.get(w) {
                for (j, &x) in v.iter().enumerate() {
                    word.set(i, j, T::from_f64(x));
                }
            }
        }
    }
    EmbeddingTables {
        word: store.add("embed.word", word),
        pos_head: store.add(
            "embed.pos_head",
            init::uniform(rng, &[position_vocab, half], -0.1, 0.1),
        ),
        pos_tail: store.add(
            "embed.pos_tail",
            init::uniform(rng, &[position_vocab, half], -0.1, 0.1),
        ),
        pos_desc: store.add(
            "embed.pos_desc",
            init::uniform(rng, &[position_vocab, dims.d_position], -0.1, 0.1),
        ),
        type_embed: store.add(
            "embed.type",
            init::uniform(rng, &[n_types, dims.d_type], -0.1, 0.1),
        ),
        token_proj: store.add(
            "embed.token_proj",
            init::xavier(
                rng,
                &[dims.d_model, dims.d_word + dims.d_position],
                dims.d_word + dims.d_position,
                dims.d_model,
            ),
        ),
        type_proj: store.add(
            "embed.type_proj",
            init::xavier(rng, &[dims.d_model, dims.d_type], dims.d_type, dims.d_model),
        ),
    }
}

// ── forward builders ──────────────────────────────────────────────────

/// Embed a sentence: per token `[word; head-pos; tail-pos]` projected to
/// `d_model`. Output `[l, d_model]`.
pub fn embed_sentence<T: Scalar>(
    tape: &mut Tape<T>,
    tables: &EmbeddingTables,
    sent: &EncodedSentence,
) -> Result<BufId> {
    let word_tbl = tape.param(tables.word);
    let head_tbl = tape.param(tables.pos_head);
    let tail_tbl = tape.param(tables.pos_tail);
    let proj = tape.param(tables.token_proj);
    let w = tape.gather_rows(word_tbl, &sent.tokens)?;
    let ph = tape.gather_rows(head_tbl, &sent.pos_head)?;
    let pt = tape.gather_rows(tail_tbl, &sent.pos_tail)?;
    let e = tape.concat_cols(&[w, ph, pt])?;
    tape.matmul_tb(e, proj)
}

/// Embed a description: per token `[word; entity-pos]` projected to `d_model`.
pub fn embed_description<T: Scalar>(
    tape: &mut Tape<T>,
    tables: &EmbeddingTables,
    desc: &EncodedDescription,
) -> Result<BufId> {
    let word_tbl = tape.param(tables.word);
    let pos_tbl = tape.param(tables.pos_desc);
    let proj = tape.param(tables.token_proj);
    let w = tape.gather_rows(word_tbl, &desc.tokens)?;
    let p = tape.gather_rows(pos_tbl, &desc.pos)?;
    let e = tape.concat_cols(&[w, p])?;
    tape.matmul_tb(e, proj)
}

/// Embed a type set (no position information). Output `[l0, d_model]`.
pub fn embed_typeset<T: Scalar>(
    tape: &mut Tape<T>,
    tables: &EmbeddingTables,
    types: &EncodedTypeSet,
) -> Result<BufId> {
    let type_tbl = tape.param(tables.type_embed);
    let proj = tape.param(tables.type_proj);
    let c = tape.gather_rows(type_tbl, &types.types)?;
    tape.matmul_tb(c, proj)
}

/// Repeated pre-norm convolution layers with rectifier and residual add.
/// Padding rows are zeroed before each convolution so that nothing beyond
/// `valid` leaks into real positions.
pub fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &[ConvLayerParams],
    x: BufId,
    valid: usize,
) -> Result<BufId> {
    let mut x = x;
    for layer in layers {
        let gain = tape.param(layer.ln.gain);
        let bias = tape.param(layer.ln.bias);
        let kernels = tape.param(layer.kernels);
        let ln = tape.layer_norm(x, gain, bias)?;
        let masked = tape.mask_rows(ln, valid)?;
        let conv = tape.conv1d_same(masked, kernels)?;
        let act = tape.relu(conv)?;
        x = tape.add(x, act)?;
    }
    Ok(x)
}

/// Pre-norm multi-head scaled dot-product self-attention with residual add.
/// Attention rows only see the first `valid` positions.
pub fn sat_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &SatParams,
    x: BufId,
    valid: usize,
    heads: usize,
) -> Result<BufId> {
    let d = tape.shape(x)[1];
    debug_assert_eq!(d % heads, 0);
    let dh = d / heads;
    let gain = tape.param(params.ln.gain);
    let bias = tape.param(params.ln.bias);
    let wq = tape.param(params.wq);
    let wk = tape.param(params.wk);
    let wv = tape.param(params.wv);
    let wo = tape.param(params.wo);

    let ln = tape.layer_norm(x, gain, bias)?;
    let q = tape.matmul_tb(ln, wq)?;
    let k = tape.matmul_tb(ln, wk)?;
    let v = tape.matmul_tb(ln, wv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = tape.row_softmax(scaled, valid)?;
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let proj = tape.matmul_tb(merged, wo)?;
    tape.add(x, proj)
}

/// Relation-aware attention pooling: score each layer-normed position against
/// the global relation query, softmax over non-pad positions, and return the
/// weighted combination. Output `[1, d_model]`.
pub fn rat_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &RatParams,
    x: BufId,
    valid: usize,
    r_hat: BufId,
) -> Result<BufId> {
    let gain = tape.param(params.ln.gain);
    let bias = tape.param(params.ln.bias);
    let proj = tape.param(params.proj);
    let score = tape.param(params.score);
    let offset = tape.param(params.offset);

    let h = tape.layer_norm(x, gain, bias)?;
    let t = tape.matmul_tb(h, proj)?;
    let t = tape.add_row(t, r_hat)?;
    let t = tape.tanh(t)?;
    let scores = tape.matmul(t, score)?;
    let scores = tape.add_scalar(scores, offset)?;
    let l = tape.shape(scores)[0];
    let row = tape.reshape(scores, &[1, l])?;
    let alpha = tape.row_softmax(row, valid)?;
    tape.matmul(alpha, h)
}

fn encode_blocks<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams,
    embedded: BufId,
    valid: usize,
    heads: usize,
    r_hat: BufId,
    pooling: Pooling,
) -> Result<BufId> {
    let x = conv_block(tape, &params.conv, embedded, valid)?;
    let x = sat_block(tape, &params.sat, x, valid, heads)?;
    match pooling {
        Pooling::RelationAttention => rat_block(tape, &params.rat, x, valid, r_hat),
        Pooling::Mean => tape.mean_rows(x, valid),
    }
}

/// Full sequence encoder for a sentence. Output `[1, d_model]`.
#[allow(clippy::too_many_arguments)]
pub fn srl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams,
    tables: &EmbeddingTables,
    dims: &EncoderDims,
    sent: &EncodedSentence,
    r_hat: BufId,
    pooling: Pooling,
) -> Result<BufId> {
    let e = embed_sentence(tape, tables, sent)?;
    encode_blocks(tape, params, e, sent.len, dims.heads, r_hat, pooling)
}

/// Full sequence encoder for an entity description.
#[allow(clippy::too_many_arguments)]
pub fn srl_forward_description<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams,
    tables: &EmbeddingTables,
    dims: &EncoderDims,
    desc: &EncodedDescription,
    r_hat: BufId,
    pooling: Pooling,
) -> Result<BufId> {
    let e = embed_description(tape, tables, desc)?;
    encode_blocks(tape, params, e, desc.len, dims.heads, r_hat, pooling)
}

/// Type-set encoder: no convolutions, no positions.
#[allow(clippy::too_many_arguments)]
pub fn trl_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &EncoderParams,
    tables: &EmbeddingTables,
    dims: &EncoderDims,
    types: &EncodedTypeSet,
    r_hat: BufId,
    pooling: Pooling,
) -> Result<BufId> {
    debug_assert!(params.conv.is_empty(), "type encoder has no conv block");
    let e = embed_typeset(tape, tables, types)?;
    encode_blocks(tape, params, e, types.len, dims.heads, r_hat, pooling)
}
