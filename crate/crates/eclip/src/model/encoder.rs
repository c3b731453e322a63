//! Image and text encoders with joint-space projections.
//!
//! Both are small pre-norm transformers. The image side linearly embeds a
//! feature grid and prepends a learned CLS token; the text side embeds token
//! ids with id 0 reserved as the CLS slot. One shared projection per
//! modality maps encoder width into the joint dimension D; projected CLS
//! vectors are unit-normalized, projected visual tokens Z are left raw.

use crate::config::ModelConfig;
use crate::data::{ImageSample, TextSample};
use crate::tensor::graph::Var;

use super::layers::{encoder_block, layer_norm, linear, Bound};
use super::params::{ImageEncoderIds, TextEncoderIds};
use super::ModelError;

#[derive(Clone, Copy)]
pub struct EncodedImageVars<'g> {
    /// 1 x width raw CLS state.
    pub v_cls: Var<'g>,
    /// N x width raw token states.
    pub tokens: Var<'g>,
    /// 1 x D unit-normalized g_I(v_cls).
    pub projected_cls: Var<'g>,
    /// N x D projected tokens Z (not normalized).
    pub projected_tokens: Var<'g>,
}

#[derive(Clone, Copy)]
pub struct EncodedTextVars<'g> {
    /// 1 x width raw CLS state.
    pub w_cls: Var<'g>,
    /// M x width raw token states.
    pub tokens: Var<'g>,
    /// 1 x D unit-normalized g_T(w_cls).
    pub projected_cls: Var<'g>,
}

pub fn encode_image_vars<'g>(
    b: &Bound<'g>,
    ids: &ImageEncoderIds,
    cfg: &ModelConfig,
    sample: &ImageSample,
) -> Result<EncodedImageVars<'g>, ModelError> {
    if sample.grid_h > cfg.grid_h || sample.grid_w > cfg.grid_w {
        return Err(ModelError::GridTooLarge {
            got: (sample.grid_h, sample.grid_w),
            max: (cfg.grid_h, cfg.grid_w),
        });
    }
    if sample.input_dim() != cfg.input_dim {
        return Err(ModelError::InputDimMismatch {
            got: sample.input_dim(),
            expected: cfg.input_dim,
        });
    }
    let g = b.var(ids.cls).graph();
    let n = sample.num_patches();

    let features = g.constant(sample.patch_features.clone());
    let embedded = linear(b, &ids.patch_embed, features)?;
    let mut seq = g.concat_rows(&[b.var(ids.cls), embedded])?;

    // Position rows: 0 for CLS, then the cell's slot in the configured grid
    // so sub-grids keep consistent positions.
    let mut pos_idx = Vec::with_capacity(1 + n);
    pos_idx.push(0);
    for y in 0..sample.grid_h {
        for x in 0..sample.grid_w {
            pos_idx.push(1 + y * cfg.grid_w + x);
        }
    }
    seq = seq.add(b.var(ids.pos).gather_rows(&pos_idx)?)?;

    for blk in &ids.blocks {
        seq = encoder_block(b, blk, seq)?;
    }
    seq = layer_norm(b, &ids.final_ln, seq)?;

    let v_cls = seq.slice_rows(0, 1)?;
    let tokens = seq.slice_rows(1, n)?;
    let projected_cls = linear(b, &ids.proj, v_cls)?.l2_normalize_rows();
    let projected_tokens = linear(b, &ids.proj, tokens)?;
    Ok(EncodedImageVars {
        v_cls,
        tokens,
        projected_cls,
        projected_tokens,
    })
}

pub fn encode_text_vars<'g>(
    b: &Bound<'g>,
    ids: &TextEncoderIds,
    cfg: &ModelConfig,
    sample: &TextSample,
) -> Result<EncodedTextVars<'g>, ModelError> {
    let m = sample.len();
    if m == 0 || m > cfg.max_text_len {
        return Err(ModelError::TextLength {
            len: m,
            max: cfg.max_text_len,
        });
    }
    if let Some(&bad) = sample.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }

    // Token 0 is the reserved CLS slot, prepended to every sequence.
    let mut tok_idx = Vec::with_capacity(1 + m);
    tok_idx.push(0usize);
    tok_idx.extend(sample.token_ids.iter().map(|&t| t as usize));
    let pos_idx: Vec<usize> = (0..=m).collect();

    let emb = b.var(ids.tok_embed).gather_rows(&tok_idx)?;
    let mut seq = emb.add(b.var(ids.pos).gather_rows(&pos_idx)?)?;

    for blk in &ids.blocks {
        seq = encoder_block(b, blk, seq)?;
    }
    seq = layer_norm(b, &ids.final_ln, seq)?;

    let w_cls = seq.slice_rows(0, 1)?;
    let tokens = seq.slice_rows(1, m)?;
    let projected_cls = linear(b, &ids.proj, w_cls)?.l2_normalize_rows();
    Ok(EncodedTextVars {
        w_cls,
        tokens,
        projected_cls,
    })
}
