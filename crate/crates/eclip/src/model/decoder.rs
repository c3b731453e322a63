//! Prompt-conditioned instance decoder.
//!
//! Queries compose a prompt embedding with per-query positional and
//! per-modality type embeddings. Each block runs slot attention (softmax
//! over queries, so visual tokens are softly partitioned among them),
//! then multi-head self-attention and a feed-forward over the T slots.
//! The recurrent slot state starts at zero and only ever receives visual
//! information through the weighted token means.

use crate::config::ModelConfig;
use crate::data::GtBox;
use crate::tensor::graph::Var;
use crate::tensor::Tensor;

use super::layers::{feed_forward, layer_norm, self_attention, Bound};
use super::params::{DecBlockIds, DecoderIds};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    /// Row index into the query type-embedding table.
    pub fn type_row(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
        }
    }
}

/// A prompt a query is conditioned on: a joint-space embedding plus its
/// modality. Exactly one prompt per decode is the positive.
#[derive(Debug, Clone)]
pub struct Prompt {
    /// 1 x D row.
    pub embedding: Tensor,
    pub modality: Modality,
    pub is_positive: bool,
}

impl Prompt {
    pub fn new(embedding: Tensor, modality: Modality, is_positive: bool) -> Self {
        Prompt {
            embedding,
            modality,
            is_positive,
        }
    }
}

/// Prompt already materialized in a graph.
#[derive(Clone, Copy)]
pub struct PromptVar<'g> {
    /// 1 x D row.
    pub embedding: Var<'g>,
    pub modality: Modality,
    pub is_positive: bool,
}

/// Composed query set: Q rows are prompt + positional + type embeddings.
pub struct QueryVars<'g> {
    /// T x D.
    pub q: Var<'g>,
    pub modalities: Vec<Modality>,
    /// Index of the positive query.
    pub positive: usize,
}

/// Soft token-to-query assignments; every row is a distribution over T.
#[derive(Debug, Clone)]
pub struct AssignmentMatrix(pub Tensor);

impl AssignmentMatrix {
    pub fn num_tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn num_queries(&self) -> usize {
        self.0.cols()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.0.row(i).iter().sum()
    }

    /// Total assignment mass of `query` over cells inside `gt_box`, with
    /// token i covering cell (i % grid_w, i / grid_w).
    pub fn mass_in_box(&self, query: usize, gt_box: &GtBox, grid_w: usize) -> f64 {
        let mut mass = 0.0;
        for y in gt_box.y1..gt_box.y2 {
            for x in gt_box.x1..gt_box.x2 {
                mass += self.0.get2(y * grid_w + x, query);
            }
        }
        mass
    }

    /// Mass of `query` over cells outside the box.
    pub fn mass_outside_box(&self, query: usize, gt_box: &GtBox, grid_w: usize) -> f64 {
        let mut mass = 0.0;
        for i in 0..self.num_tokens() {
            let (x, y) = (i % grid_w, i / grid_w);
            if !gt_box.contains_cell(x, y) {
                mass += self.0.get2(i, query);
            }
        }
        mass
    }
}

/// Compose queries per-row: prompt embedding + positional + type embedding.
pub fn build_queries_vars<'g>(
    b: &Bound<'g>,
    ids: &DecoderIds,
    cfg: &ModelConfig,
    prompts: &[PromptVar<'g>],
) -> Result<QueryVars<'g>, ModelError> {
    if prompts.len() != cfg.num_queries {
        return Err(ModelError::PromptCount {
            got: prompts.len(),
            expected: cfg.num_queries,
        });
    }
    let mut positive = None;
    for (t, p) in prompts.iter().enumerate() {
        let cols = p.embedding.value_with(|v| v.numel());
        if cols != cfg.embed_dim {
            return Err(ModelError::PromptDim {
                got: cols,
                expected: cfg.embed_dim,
            });
        }
        if p.is_positive {
            if positive.is_some() {
                return Err(ModelError::PositiveCount { got: 2 });
            }
            positive = Some(t);
        }
    }
    let positive = positive.ok_or(ModelError::PositiveCount { got: 0 })?;

    let g = b.var(ids.query_pos).graph();
    let rows: Vec<Var<'g>> = prompts.iter().map(|p| p.embedding).collect();
    let prompt_mat = g.concat_rows(&rows)?;
    let type_idx: Vec<usize> = prompts.iter().map(|p| p.modality.type_row()).collect();
    let q = prompt_mat
        .add(b.var(ids.query_pos))?
        .add(b.var(ids.query_type).gather_rows(&type_idx)?)?;
    Ok(QueryVars {
        q,
        modalities: prompts.iter().map(|p| p.modality).collect(),
        positive,
    })
}

/// One slot-attention update:
/// scores = (Z Wz)((Q + H) Wq)^T / sqrt(D), M = softmax over queries,
/// delta_t = sum_i M_it (Wv z_i) / sum_i M_it, H_mid = H + delta Wo.
pub fn slot_attention_step<'g>(
    b: &Bound<'g>,
    blk: &DecBlockIds,
    z: Var<'g>,
    q: Var<'g>,
    h_prev: Var<'g>,
) -> Result<(Var<'g>, Var<'g>), ModelError> {
    let d = z.value_with(|t| t.cols());
    let a = z.matmul(b.var(blk.w_z))?;
    let k = q.add(h_prev)?.matmul(b.var(blk.w_q))?;
    let scores = a.matmul(k.t()?)?.mul_scalar(1.0 / (d as f64).sqrt());
    let m = scores.softmax(1)?;
    let v = z.matmul(b.var(blk.w_v))?;
    let weighted = m.t()?.matmul(v)?;
    let norm = m.sum_axis(0)?.recip();
    let delta = weighted.scale_rows(norm)?;
    let h_mid = h_prev.add(delta.matmul(b.var(blk.w_o))?)?;
    Ok((m, h_mid))
}

/// Slot attention, then pre-norm MSA + FFN over the T slots.
pub fn decoder_block_vars<'g>(
    b: &Bound<'g>,
    blk: &DecBlockIds,
    z: Var<'g>,
    q: Var<'g>,
    h_prev: Var<'g>,
) -> Result<(Var<'g>, Var<'g>), ModelError> {
    let (m, h_mid) = slot_attention_step(b, blk, z, q, h_prev)?;
    let attn_in = layer_norm(b, &blk.ln1, h_mid)?;
    let h_attn = h_mid.add(self_attention(b, &blk.attn, attn_in)?)?;
    let ffn_in = layer_norm(b, &blk.ln2, h_attn)?;
    let h_next = h_attn.add(feed_forward(b, &blk.ffn, ffn_in)?)?;
    Ok((m, h_next))
}

pub struct DecodeVars<'g> {
    /// T x D, rows unit-normalized.
    pub h_final: Var<'g>,
    /// Final block's N x T assignment matrix.
    pub m_final: Var<'g>,
    /// Every block's assignment matrix, in block order.
    pub m_all: Vec<Var<'g>>,
}

/// Run L decoder blocks from a zero slot state over projected tokens Z.
pub fn decode_vars<'g>(
    b: &Bound<'g>,
    ids: &DecoderIds,
    z: Var<'g>,
    queries: &QueryVars<'g>,
) -> Result<DecodeVars<'g>, ModelError> {
    let g = queries.q.graph();
    let (t, d) = queries.q.value_with(|v| (v.rows(), v.cols()));
    let mut h = g.constant(Tensor::zeros(vec![t, d]).expect("query dims are positive"));
    let mut m_all = Vec::with_capacity(ids.blocks.len());
    for blk in &ids.blocks {
        let (m, h_next) = decoder_block_vars(b, blk, z, queries.q, h)?;
        m_all.push(m);
        h = h_next;
    }
    let m_final = *m_all.last().expect("decoder has at least one block");
    Ok(DecodeVars {
        h_final: h.l2_normalize_rows(),
        m_final,
        m_all,
    })
}
