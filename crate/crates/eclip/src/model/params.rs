//! Flat parameter storage with a typed layout over it.
//!
//! Parameters live in one ordered `Vec<Tensor>`; layout structs hold
//! [`ParamId`] indices into it. Order is construction order and never
//! changes, which keeps optimizer state, checkpoints, and gradient
//! accumulation aligned without any map iteration.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Ids whose name starts with `prefix`, in storage order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Overwrite every tensor's values from `other`; shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamSet) {
        assert_eq!(self.tensors.len(), other.tensors.len(), "parameter count drift");
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            assert_eq!(dst.shape(), src.shape(), "parameter shape drift");
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    /// in x out weight.
    pub w: ParamId,
    /// out-length bias.
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIds {
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// Pre-norm transformer block: x + MSA(LN(x)), then + FFN(LN(.)).
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub struct ImageEncoderIds {
    pub patch_embed: LinearIds,
    /// 1 x width learned CLS token.
    pub cls: ParamId,
    /// (1 + grid_h*grid_w) x width position table; row 0 is the CLS slot.
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_ln: NormIds,
    /// width x D joint projection g_I, shared by CLS and tokens.
    pub proj: LinearIds,
}

#[derive(Debug, Clone)]
pub struct TextEncoderIds {
    /// vocab x width embedding table; row 0 doubles as the CLS embedding.
    pub tok_embed: ParamId,
    /// (1 + max_text_len) x width position table.
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_ln: NormIds,
    /// width x D joint projection g_T.
    pub proj: LinearIds,
}

/// One decoder block: slot-attention matrices plus MSA + FFN over slots.
#[derive(Debug, Clone, Copy)]
pub struct DecBlockIds {
    pub w_z: ParamId,
    pub w_q: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub struct DecoderIds {
    /// T x D per-query positional embeddings.
    pub query_pos: ParamId,
    /// 2 x D type embeddings: row 0 = image prompts, row 1 = text prompts.
    pub query_type: ParamId,
    pub blocks: Vec<DecBlockIds>,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub img: ImageEncoderIds,
    pub txt: TextEncoderIds,
    pub dec: DecoderIds,
    /// D -> 2 match head over the fused instance-text vector.
    pub itm: LinearIds,
    /// Scalar log-temperature shared by all contrastive losses.
    pub log_tau: ParamId,
}

pub const INIT_STD: f64 = 0.02;

struct Builder<'r> {
    params: ParamSet,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Truncated normal: redraw anything beyond two standard deviations.
    fn trunc_normal(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                loop {
                    let x: f64 = self.rng.sample(StandardNormal);
                    if x.abs() <= 2.0 {
                        return x * INIT_STD;
                    }
                }
            })
            .collect();
        Tensor::new(shape, data).expect("builder shapes are valid")
    }

    fn weight(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let t = self.trunc_normal(vec![rows, cols]);
        self.params.push(name, t)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> LinearIds {
        let w = self.weight(format!("{name}.w"), inp, out);
        let b = self
            .params
            .push(format!("{name}.b"), Tensor::zeros(vec![out]).unwrap());
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, dim: usize) -> NormIds {
        let gain = self
            .params
            .push(format!("{name}.gain"), Tensor::full(vec![dim], 1.0).unwrap());
        let bias = self
            .params
            .push(format!("{name}.bias"), Tensor::zeros(vec![dim]).unwrap());
        NormIds { gain, bias }
    }

    fn attn(&mut self, name: &str, width: usize, heads: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), width, width),
            k: self.linear(&format!("{name}.k"), width, width),
            v: self.linear(&format!("{name}.v"), width, width),
            o: self.linear(&format!("{name}.o"), width, width),
            heads,
        }
    }

    fn ffn(&mut self, name: &str, width: usize, hidden: usize) -> FfnIds {
        FfnIds {
            fc1: self.linear(&format!("{name}.fc1"), width, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, width),
        }
    }

    fn block(&mut self, name: &str, width: usize, heads: usize, hidden: usize) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), width),
            attn: self.attn(&format!("{name}.attn"), width, heads),
            ln2: self.norm(&format!("{name}.ln2"), width),
            ffn: self.ffn(&format!("{name}.ffn"), width, hidden),
        }
    }
}

/// Create all parameters for a fresh model. Construction order is part of
/// the checkpoint contract: do not reorder.
pub fn build_params(
    cfg: &ModelConfig,
    tau_init: f64,
    rng: &mut ChaCha8Rng,
) -> (ParamSet, ModelIds) {
    let mut b = Builder {
        params: ParamSet::new(),
        rng,
    };
    let w = cfg.width;
    let d = cfg.embed_dim;

    let img = ImageEncoderIds {
        patch_embed: b.linear("img.patch_embed", cfg.input_dim, w),
        cls: {
            let t = b.trunc_normal(vec![1, w]);
            b.params.push("img.cls", t)
        },
        pos: {
            let t = b.trunc_normal(vec![1 + cfg.num_patches(), w]);
            b.params.push("img.pos", t)
        },
        blocks: (0..cfg.encoder_blocks)
            .map(|i| b.block(&format!("img.blocks.{i}"), w, cfg.heads, cfg.ffn_hidden))
            .collect(),
        final_ln: b.norm("img.final_ln", w),
        proj: b.linear("img.proj", w, d),
    };

    let txt = TextEncoderIds {
        tok_embed: {
            let t = b.trunc_normal(vec![cfg.vocab_size, w]);
            b.params.push("txt.tok_embed", t)
        },
        pos: {
            let t = b.trunc_normal(vec![1 + cfg.max_text_len, w]);
            b.params.push("txt.pos", t)
        },
        blocks: (0..cfg.encoder_blocks)
            .map(|i| b.block(&format!("txt.blocks.{i}"), w, cfg.heads, cfg.ffn_hidden))
            .collect(),
        final_ln: b.norm("txt.final_ln", w),
        proj: b.linear("txt.proj", w, d),
    };

    let dec = DecoderIds {
        query_pos: {
            let t = b.trunc_normal(vec![cfg.num_queries, d]);
            b.params.push("dec.query_pos", t)
        },
        query_type: {
            let t = b.trunc_normal(vec![2, d]);
            b.params.push("dec.query_type", t)
        },
        blocks: (0..cfg.decoder_blocks)
            .map(|i| {
                let name = format!("dec.blocks.{i}");
                DecBlockIds {
                    w_z: b.weight(format!("{name}.w_z"), d, d),
                    w_q: b.weight(format!("{name}.w_q"), d, d),
                    w_v: b.weight(format!("{name}.w_v"), d, d),
                    w_o: b.weight(format!("{name}.w_o"), d, d),
                    ln1: b.norm(&format!("{name}.ln1"), d),
                    attn: b.attn(&format!("{name}.attn"), d, cfg.decoder_heads),
                    ln2: b.norm(&format!("{name}.ln2"), d),
                    ffn: b.ffn(&format!("{name}.ffn"), d, cfg.decoder_ffn_hidden),
                }
            })
            .collect(),
    };

    let itm = b.linear("itm", d, 2);
    let log_tau = b
        .params
        .push("log_tau", Tensor::scalar(tau_init.ln()));

    (
        b.params,
        ModelIds {
            img,
            txt,
            dec,
            itm,
            log_tau,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_truncated() {
        let cfg = ModelConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let (p1, _) = build_params(&cfg, 0.07, &mut r1);
        let (p2, _) = build_params(&cfg, 0.07, &mut r2);
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        // Truncation bound: |w| <= 2 * std for every weight entry.
        for (name, t) in p1.iter() {
            if name.ends_with(".w") || name.contains("embed") || name.contains("pos") {
                for &v in t.data() {
                    assert!(v.abs() <= 2.0 * INIT_STD + 1e-15, "{name}: {v}");
                }
            }
        }
    }

    #[test]
    fn layout_prefixes_partition_the_set() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (params, ids) = build_params(&cfg, 0.07, &mut rng);
        let img = params.ids_with_prefix("img.");
        let txt = params.ids_with_prefix("txt.");
        let dec = params.ids_with_prefix("dec.");
        let itm = params.ids_with_prefix("itm");
        let tau = params.ids_with_prefix("log_tau");
        assert_eq!(
            img.len() + txt.len() + dec.len() + itm.len() + tau.len(),
            params.len()
        );
        assert_eq!(params.get(ids.log_tau).item(), 0.07f64.ln());
        assert_eq!(params.get(ids.itm.w).shape(), &[cfg.embed_dim, 2]);
        assert_eq!(params.get(ids.img.pos).rows(), 1 + cfg.num_patches());
        assert_eq!(params.get(ids.dec.query_pos).rows(), cfg.num_queries);
        // Biases start at zero, norms at one.
        assert!(params.get(ids.itm.b).data().iter().all(|&v| v == 0.0));
        assert!(params
            .get(ids.img.final_ln.gain)
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn copy_values_from_mirrors_exactly() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut a, _) = build_params(&cfg, 0.07, &mut rng);
        let (b, _) = build_params(&cfg, 0.05, &mut rng);
        a.copy_values_from(&b);
        for (x, y) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
