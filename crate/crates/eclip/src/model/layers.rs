//! Graph-level transformer building blocks shared by encoders and decoder.

use crate::tensor::graph::{Graph, Var};
use crate::tensor::TensorError;

use super::params::{AttnIds, BlockIds, FfnIds, LinearIds, NormIds, ParamId, ParamSet};

pub const LN_EPS: f64 = 1e-5;

/// Parameters bound into one graph as leaves. Index with a [`ParamId`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Bind every parameter as a grad-requiring leaf (training).
    pub fn trainable(g: &'g Graph, params: &ParamSet) -> Self {
        Bound {
            vars: params
                .tensors()
                .iter()
                .map(|t| g.leaf(t.clone().with_grad()))
                .collect(),
        }
    }

    /// Bind every parameter as a constant (evaluation, momentum model).
    pub fn frozen(g: &'g Graph, params: &ParamSet) -> Self {
        Bound {
            vars: params
                .tensors()
                .iter()
                .map(|t| g.constant(t.clone()))
                .collect(),
        }
    }

    /// Wrap an explicit variable list (used to splice grad-requiring leaves
    /// over an otherwise frozen binding in gradient checks).
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

pub fn linear<'g>(b: &Bound<'g>, ids: &LinearIds, x: Var<'g>) -> Result<Var<'g>, TensorError> {
    x.matmul(b.var(ids.w))?.add_rows(b.var(ids.b))
}

pub fn layer_norm<'g>(b: &Bound<'g>, ids: &NormIds, x: Var<'g>) -> Result<Var<'g>, TensorError> {
    x.layer_norm(b.var(ids.gain), b.var(ids.bias), LN_EPS)
}

/// Multi-head self-attention over an S x width sequence.
pub fn self_attention<'g>(
    b: &Bound<'g>,
    ids: &AttnIds,
    x: Var<'g>,
) -> Result<Var<'g>, TensorError> {
    let width = x.value_with(|t| t.cols());
    debug_assert_eq!(width % ids.heads, 0);
    let dh = width / ids.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(b, &ids.q, x)?;
    let k = linear(b, &ids.k, x)?;
    let v = linear(b, &ids.v, x)?;
    let mut ctx = Vec::with_capacity(ids.heads);
    for h in 0..ids.heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = qh.matmul(kh.t()?)?.mul_scalar(scale);
        let probs = scores.softmax(1)?;
        ctx.push(probs.matmul(vh)?);
    }
    let merged = if ctx.len() == 1 {
        ctx[0]
    } else {
        x.graph().concat_cols(&ctx)?
    };
    linear(b, &ids.o, merged)
}

pub fn feed_forward<'g>(b: &Bound<'g>, ids: &FfnIds, x: Var<'g>) -> Result<Var<'g>, TensorError> {
    let h = linear(b, &ids.fc1, x)?.gelu();
    linear(b, &ids.fc2, h)
}

/// Pre-norm block: x + MSA(LN1(x)), then + FFN(LN2(.)).
pub fn encoder_block<'g>(
    b: &Bound<'g>,
    ids: &BlockIds,
    x: Var<'g>,
) -> Result<Var<'g>, TensorError> {
    let attn_in = layer_norm(b, &ids.ln1, x)?;
    let a = x.add(self_attention(b, &ids.attn, attn_in)?)?;
    let ffn_in = layer_norm(b, &ids.ln2, a)?;
    a.add(feed_forward(b, &ids.ffn, ffn_in)?)
}
