//! Model assembly: parameters, encoders, instance decoder, and plain-tensor
//! entry points used by evaluation (training drives the graph layer
//! directly).

pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig};
use crate::data::{ImageSample, TextSample};
use crate::tensor::graph::Graph;
use crate::tensor::{Tensor, TensorError};

use decoder::{
    build_queries_vars, decode_vars, AssignmentMatrix, Prompt, PromptVar,
};
use layers::Bound;
use params::{build_params, ModelIds, ParamSet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image grid {got:?} exceeds configured maximum {max:?}")]
    GridTooLarge {
        got: (usize, usize),
        max: (usize, usize),
    },
    #[error("patch feature dimension {got} does not match configured input_dim {expected}")]
    InputDimMismatch { got: usize, expected: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("text length {len} outside 1..={max}")]
    TextLength { len: usize, max: usize },
    #[error("expected one prompt per query ({expected}), got {got}")]
    PromptCount { got: usize, expected: usize },
    #[error("prompt embedding dimension {got} does not match D = {expected}")]
    PromptDim { got: usize, expected: usize },
    #[error("decode requires exactly one positive prompt, found {got}")]
    PositiveCount { got: usize },
}

/// Encoded image: raw encoder states plus joint-space projections.
#[derive(Debug, Clone)]
pub struct EncodedImage {
    pub v_cls: Tensor,
    pub tokens: Tensor,
    /// 1 x D, unit norm.
    pub projected_cls: Tensor,
    /// N x D projected tokens Z.
    pub projected_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncodedText {
    pub w_cls: Tensor,
    pub tokens: Tensor,
    /// 1 x D, unit norm.
    pub projected_cls: Tensor,
}

/// Cosine similarity of the two unit-normalized projected CLS vectors.
pub fn pair_similarity(img: &EncodedImage, txt: &EncodedText) -> f64 {
    img.projected_cls
        .data()
        .iter()
        .zip(txt.projected_cls.data())
        .map(|(a, b)| a * b)
        .sum()
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// T x D instance representations, rows unit-normalized.
    pub h_final: Tensor,
    pub m_final: AssignmentMatrix,
    pub m_all: Vec<AssignmentMatrix>,
}

#[derive(Debug, Clone)]
pub struct EclipModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub ids: ModelIds,
}

impl EclipModel {
    pub fn init(config: ModelConfig, tau_init: f64, rng: &mut ChaCha8Rng) -> Result<Self, ConfigError> {
        config.validate()?;
        let (params, ids) = build_params(&config, tau_init, rng);
        Ok(EclipModel { config, params, ids })
    }

    pub fn init_seeded(config: ModelConfig, tau_init: f64, seed: u64) -> Result<Self, ConfigError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, tau_init, &mut rng)
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.ids.log_tau).item().exp()
    }

    pub fn encode_image(&self, sample: &ImageSample) -> Result<EncodedImage, ModelError> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let enc = encoder::encode_image_vars(&b, &self.ids.img, &self.config, sample)?;
        Ok(EncodedImage {
            v_cls: enc.v_cls.value(),
            tokens: enc.tokens.value(),
            projected_cls: enc.projected_cls.value(),
            projected_tokens: enc.projected_tokens.value(),
        })
    }

    pub fn encode_text(&self, sample: &TextSample) -> Result<EncodedText, ModelError> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let enc = encoder::encode_text_vars(&b, &self.ids.txt, &self.config, sample)?;
        Ok(EncodedText {
            w_cls: enc.w_cls.value(),
            tokens: enc.tokens.value(),
            projected_cls: enc.projected_cls.value(),
        })
    }

    /// Decode projected tokens Z with one prompt per query.
    pub fn decode(
        &self,
        encoded: &EncodedImage,
        prompts: &[Prompt],
    ) -> Result<DecodeOutput, ModelError> {
        let g = Graph::new();
        let b = Bound::frozen(&g, &self.params);
        let z = g.constant(encoded.projected_tokens.clone());
        let prompt_vars: Vec<PromptVar<'_>> = prompts
            .iter()
            .map(|p| PromptVar {
                embedding: g.constant(row_vector(&p.embedding)),
                modality: p.modality,
                is_positive: p.is_positive,
            })
            .collect();
        let queries = build_queries_vars(&b, &self.ids.dec, &self.config, &prompt_vars)?;
        let out = decode_vars(&b, &self.ids.dec, z, &queries)?;
        Ok(DecodeOutput {
            h_final: out.h_final.value(),
            m_final: AssignmentMatrix(out.m_final.value()),
            m_all: out.m_all.into_iter().map(|m| AssignmentMatrix(m.value())).collect(),
        })
    }
}

/// View a [D] or 1xD tensor as a 1xD row.
pub fn row_vector(t: &Tensor) -> Tensor {
    if t.rank() == 2 {
        t.clone()
    } else {
        Tensor::matrix(1, t.numel(), t.data().to_vec()).expect("row reshape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTag;
    use decoder::Modality;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            width: 8,
            encoder_blocks: 1,
            heads: 2,
            ffn_hidden: 16,
            embed_dim: 8,
            grid_h: 2,
            grid_w: 2,
            vocab_size: 16,
            max_text_len: 4,
            decoder_blocks: 2,
            num_queries: 3,
            decoder_heads: 2,
            decoder_ffn_hidden: 16,
        }
    }

    fn tiny_model(seed: u64) -> EclipModel {
        EclipModel::init_seeded(tiny_config(), 0.07, seed).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, cfg: &ModelConfig, tag: SourceTag) -> ImageSample {
        let n = cfg.num_patches();
        let data = (0..n * cfg.input_dim).map(|_| rng.sample(StandardNormal)).collect();
        ImageSample::new(
            cfg.grid_h,
            cfg.grid_w,
            Tensor::matrix(n, cfg.input_dim, data).unwrap(),
            tag,
        )
        .unwrap()
    }

    fn random_prompts(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<Prompt> {
        (0..cfg.num_queries)
            .map(|t| {
                let data: Vec<f64> =
                    (0..cfg.embed_dim).map(|_| rng.sample(StandardNormal)).collect();
                Prompt::new(
                    Tensor::matrix(1, cfg.embed_dim, data).unwrap(),
                    if t % 2 == 0 { Modality::Text } else { Modality::Image },
                    t == 0,
                )
            })
            .collect()
    }

    #[test]
    fn projected_cls_is_unit_norm() {
        let model = tiny_model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, &model.config, SourceTag::DetailPage);
        let enc = model.encode_image(&img).unwrap();
        assert!((enc.projected_cls.norm() - 1.0).abs() < 1e-9);
        let txt = TextSample::new(vec![1, 5, 9], 16).unwrap();
        let et = model.encode_text(&txt).unwrap();
        assert!((et.projected_cls.norm() - 1.0).abs() < 1e-9);
        let sim = pair_similarity(&enc, &et);
        assert!((-1.0..=1.0).contains(&sim));
        // Loop oracle for the dot product.
        let oracle: f64 = (0..model.config.embed_dim)
            .map(|d| enc.projected_cls.data()[d] * et.projected_cls.data()[d])
            .sum();
        assert_eq!(sim, oracle);
    }

    #[test]
    fn source_tag_is_metadata_only() {
        let model = tiny_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, &model.config, SourceTag::DetailPage);
        let mut img2 = img.clone();
        img2.source_tag = SourceTag::VideoFrame;
        let a = model.encode_image(&img).unwrap();
        let b = model.encode_image(&img2).unwrap();
        assert_eq!(a.projected_cls.data(), b.projected_cls.data());
        assert_eq!(a.tokens.data(), b.tokens.data());
    }

    #[test]
    fn patch_permutation_with_position_rows_preserves_cls() {
        let model = tiny_model(5);
        let cfg = model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, &cfg, SourceTag::Comment);
        let base = model.encode_image(&img).unwrap();

        let n = cfg.num_patches();
        let perm: Vec<usize> = vec![2, 0, 3, 1];
        assert_eq!(perm.len(), n);
        // Permute patch rows and the matching position-table rows together.
        let d = cfg.input_dim;
        let mut feat = vec![0.0; n * d];
        for (j, &src) in perm.iter().enumerate() {
            feat[j * d..(j + 1) * d].copy_from_slice(img.patch_features.row(src));
        }
        let permuted = ImageSample::new(
            cfg.grid_h,
            cfg.grid_w,
            Tensor::matrix(n, d, feat).unwrap(),
            img.source_tag,
        )
        .unwrap();

        let mut model2 = model.clone();
        let pos_id = model2.ids.img.pos;
        let old_pos = model2.params.get(pos_id).clone();
        let w = old_pos.cols();
        let new_pos = model2.params.get_mut(pos_id);
        for (j, &src) in perm.iter().enumerate() {
            let row = old_pos.row(1 + src).to_vec();
            new_pos.data_mut()[(1 + j) * w..(2 + j) * w].copy_from_slice(&row);
        }

        let enc = model2.encode_image(&permuted).unwrap();
        for (a, b) in enc.v_cls.data().iter().zip(base.v_cls.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (a, b) in enc.projected_cls.data().iter().zip(base.projected_cls.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn text_token_permutation_with_positions_preserves_cls() {
        let model = tiny_model(7);
        let txt = TextSample::new(vec![3, 7, 11], 16).unwrap();
        let base = model.encode_text(&txt).unwrap();

        let perm = [1usize, 2, 0];
        let permuted = TextSample::new(vec![7, 11, 3], 16).unwrap();
        let mut model2 = model.clone();
        let pos_id = model2.ids.txt.pos;
        let old_pos = model2.params.get(pos_id).clone();
        let w = old_pos.cols();
        let new_pos = model2.params.get_mut(pos_id);
        for (j, &src) in perm.iter().enumerate() {
            let row = old_pos.row(1 + src).to_vec();
            new_pos.data_mut()[(1 + j) * w..(2 + j) * w].copy_from_slice(&row);
        }
        let enc = model2.encode_text(&permuted).unwrap();
        for (a, b) in enc.w_cls.data().iter().zip(base.w_cls.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_rejects_invalid_inputs() {
        let model = tiny_model(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // Grid too large.
        let big = ImageSample::new(
            3,
            3,
            Tensor::matrix(9, 5, (0..45).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
            SourceTag::Comment,
        )
        .unwrap();
        assert!(matches!(
            model.encode_image(&big),
            Err(ModelError::GridTooLarge { .. })
        ));
        // Wrong feature dimension.
        let narrow = ImageSample::new(
            2,
            2,
            Tensor::matrix(4, 3, vec![0.0; 12]).unwrap(),
            SourceTag::Comment,
        )
        .unwrap();
        assert!(matches!(
            model.encode_image(&narrow),
            Err(ModelError::InputDimMismatch { .. })
        ));
        // Token out of the model's vocabulary.
        let txt = TextSample::new(vec![20], 32).unwrap();
        assert!(matches!(
            model.encode_text(&txt),
            Err(ModelError::TokenOutOfRange { .. })
        ));
        // Too long for the position table.
        let long = TextSample::new(vec![1; 5], 16).unwrap();
        assert!(matches!(
            model.encode_text(&long),
            Err(ModelError::TextLength { .. })
        ));
    }

    #[test]
    fn assignment_rows_sum_to_one_at_every_block() {
        let model = tiny_model(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, &model.config, SourceTag::DetailPage);
        let enc = model.encode_image(&img).unwrap();
        let prompts = random_prompts(&mut rng, &model.config);
        let out = model.decode(&enc, &prompts).unwrap();
        assert_eq!(out.m_all.len(), model.config.decoder_blocks);
        for m in &out.m_all {
            for i in 0..m.num_tokens() {
                assert!((m.row_sum(i) - 1.0).abs() < 1e-9);
            }
            for &v in m.0.data() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
        for r in 0..model.config.num_queries {
            let row = out.h_final.row(r);
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_permutation_leaves_h_final_invariant() {
        let model = tiny_model(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = random_image(&mut rng, &model.config, SourceTag::DetailPage);
        let enc = model.encode_image(&img).unwrap();
        let prompts = random_prompts(&mut rng, &model.config);
        let base = model.decode(&enc, &prompts).unwrap();

        let perm = [3usize, 1, 0, 2];
        let d = model.config.embed_dim;
        let n = model.config.num_patches();
        let mut z = vec![0.0; n * d];
        for (j, &src) in perm.iter().enumerate() {
            z[j * d..(j + 1) * d].copy_from_slice(enc.projected_tokens.row(src));
        }
        let mut enc2 = enc.clone();
        enc2.projected_tokens = Tensor::matrix(n, d, z).unwrap();
        let permuted = model.decode(&enc2, &prompts).unwrap();

        for (a, b) in permuted.h_final.data().iter().zip(base.h_final.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        // M rows follow the token permutation.
        for (j, &src) in perm.iter().enumerate() {
            for t in 0..model.config.num_queries {
                let a = permuted.m_final.0.get2(j, t);
                let b = base.m_final.0.get2(src, t);
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn query_permutation_is_equivariant() {
        let model = tiny_model(14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = random_image(&mut rng, &model.config, SourceTag::DetailPage);
        let enc = model.encode_image(&img).unwrap();
        let prompts = random_prompts(&mut rng, &model.config);
        let base = model.decode(&enc, &prompts).unwrap();

        let perm = [2usize, 0, 1];
        let permuted_prompts: Vec<Prompt> = perm.iter().map(|&i| prompts[i].clone()).collect();
        let mut model2 = model.clone();
        let qp_id = model2.ids.dec.query_pos;
        let old = model2.params.get(qp_id).clone();
        let d = old.cols();
        let qp = model2.params.get_mut(qp_id);
        for (j, &src) in perm.iter().enumerate() {
            let row = old.row(src).to_vec();
            qp.data_mut()[j * d..(j + 1) * d].copy_from_slice(&row);
        }
        let permuted = model2.decode(&enc, &permuted_prompts).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let a = permuted.h_final.get2(j, c);
                let b = base.h_final.get2(src, c);
                assert!((a - b).abs() < 1e-9, "row {j}");
            }
        }
    }

    #[test]
    fn identical_prompts_and_positions_give_identical_rows() {
        let model = {
            let mut m = tiny_model(16);
            // Collapse per-query positions to a single shared row.
            let qp_id = m.ids.dec.query_pos;
            let old = m.params.get(qp_id).clone();
            let d = old.cols();
            let first = old.row(0).to_vec();
            let qp = m.params.get_mut(qp_id);
            for j in 0..old.rows() {
                qp.data_mut()[j * d..(j + 1) * d].copy_from_slice(&first);
            }
            m
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let img = random_image(&mut rng, &model.config, SourceTag::DetailPage);
        let enc = model.encode_image(&img).unwrap();
        let shared: Vec<f64> = (0..model.config.embed_dim).map(|_| rng.sample(StandardNormal)).collect();
        let prompts: Vec<Prompt> = (0..model.config.num_queries)
            .map(|t| {
                Prompt::new(
                    Tensor::matrix(1, model.config.embed_dim, shared.clone()).unwrap(),
                    Modality::Text,
                    t == 0,
                )
            })
            .collect();
        let out = model.decode(&enc, &prompts).unwrap();
        let first = out.h_final.row(0).to_vec();
        for r in 1..model.config.num_queries {
            for (a, b) in out.h_final.row(r).iter().zip(&first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_slot_update_cancels_normalizer() {
        // With N=1 every M entry is 1 after row-softmax over... each row is a
        // distribution over T, so entries are not 1; the normalizer
        // sum_i M_it equals the single entry M_1t and cancels, leaving
        // delta_t = W_v z_1 for every t.
        let model = tiny_model(18);
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g = Graph::new();
        let b = Bound::frozen(&g, &model.params);
        let z_data: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.sample(StandardNormal)).collect();
        let z = g.constant(Tensor::matrix(1, cfg.embed_dim, z_data.clone()).unwrap());
        let q_data: Vec<f64> = (0..cfg.num_queries * cfg.embed_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let q = g.constant(Tensor::matrix(cfg.num_queries, cfg.embed_dim, q_data).unwrap());
        let h0 = g.constant(Tensor::zeros(vec![cfg.num_queries, cfg.embed_dim]).unwrap());
        let blk = &model.ids.dec.blocks[0];
        let (_, h_mid) = decoder::slot_attention_step(&b, blk, z, q, h0).unwrap();
        // Expected: each row = (W_v z)^T W_o.
        let wv = model.params.get(blk.w_v);
        let wo = model.params.get(blk.w_o);
        let vz = crate::tensor::matmul_raw(&z_data, wv.data(), 1, cfg.embed_dim, cfg.embed_dim);
        let expect = crate::tensor::matmul_raw(&vz, wo.data(), 1, cfg.embed_dim, cfg.embed_dim);
        let got = h_mid.value();
        for r in 0..cfg.num_queries {
            for (a, b) in got.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slot_attention_matches_double_loop_reference() {
        // Independent reference: explicit loops over tokens i and queries t.
        let model = tiny_model(30);
        let cfg = &model.config;
        let d = cfg.embed_dim;
        let (n, t_q) = (cfg.num_patches(), cfg.num_queries);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let zd: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let qd: Vec<f64> = (0..t_q * d).map(|_| rng.sample(StandardNormal)).collect();
        let hd: Vec<f64> = (0..t_q * d).map(|_| rng.sample(StandardNormal)).collect();

        let g = Graph::new();
        let b = Bound::frozen(&g, &model.params);
        let blk = &model.ids.dec.blocks[1];
        let z = g.constant(Tensor::matrix(n, d, zd.clone()).unwrap());
        let q = g.constant(Tensor::matrix(t_q, d, qd.clone()).unwrap());
        let h = g.constant(Tensor::matrix(t_q, d, hd.clone()).unwrap());
        let (m, h_mid) = decoder::slot_attention_step(&b, blk, z, q, h).unwrap();
        let (m, h_mid) = (m.value(), h_mid.value());

        let wz = model.params.get(blk.w_z).data();
        let wq = model.params.get(blk.w_q).data();
        let wv = model.params.get(blk.w_v).data();
        let wo = model.params.get(blk.w_o).data();
        let dot = |a: &[f64], w: &[f64], row: usize, col: usize| -> f64 {
            (0..d).map(|k| a[row * d + k] * w[k * d + col]).sum()
        };
        // scores, softmax over queries per token row
        let mut m_ref = vec![0.0; n * t_q];
        for i in 0..n {
            let mut row = vec![0.0; t_q];
            for t in 0..t_q {
                let mut s = 0.0;
                for c in 0..d {
                    let a_ic = dot(&zd, wz, i, c);
                    let k_tc = {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += (qd[t * d + k] + hd[t * d + k]) * wq[k * d + c];
                        }
                        acc
                    };
                    s += a_ic * k_tc;
                }
                row[t] = s / (d as f64).sqrt();
            }
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z_sum: f64 = exps.iter().sum();
            for t in 0..t_q {
                m_ref[i * t_q + t] = exps[t] / z_sum;
            }
        }
        for (a, b) in m.data().iter().zip(&m_ref) {
            assert!((a - b).abs() < 1e-12);
        }
        // delta_t = sum_i M_it (Wv z_i) / sum_i M_it, then H_mid = H + delta Wo
        for t in 0..t_q {
            let denom: f64 = (0..n).map(|i| m_ref[i * t_q + t]).sum();
            let mut delta = vec![0.0; d];
            for i in 0..n {
                let w = m_ref[i * t_q + t];
                for c in 0..d {
                    delta[c] += w * dot(&zd, wv, i, c);
                }
            }
            delta.iter_mut().for_each(|v| *v /= denom);
            for c in 0..d {
                let proj: f64 = (0..d).map(|k| delta[k] * wo[k * d + c]).sum();
                let expect = hd[t * d + c] + proj;
                assert!((h_mid.get2(t, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_tokens_leave_slot_state_unchanged() {
        let model = tiny_model(20);
        let cfg = &model.config;
        let g = Graph::new();
        let b = Bound::frozen(&g, &model.params);
        let z = g.constant(Tensor::zeros(vec![cfg.num_patches(), cfg.embed_dim]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q_data: Vec<f64> = (0..cfg.num_queries * cfg.embed_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let q = g.constant(Tensor::matrix(cfg.num_queries, cfg.embed_dim, q_data.clone()).unwrap());
        let h_prev = g.constant(Tensor::matrix(cfg.num_queries, cfg.embed_dim, q_data).unwrap());
        let blk = &model.ids.dec.blocks[0];
        let (_, h_mid) = decoder::slot_attention_step(&b, blk, z, q, h_prev).unwrap();
        assert_eq!(h_mid.value().data(), h_prev.value().data());
    }

    #[test]
    fn build_queries_composition_and_errors() {
        let model = tiny_model(22);
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(23);

        // Zero positional/type tables make Q equal the prompt embeddings.
        let mut m2 = model.clone();
        for id in [m2.ids.dec.query_pos, m2.ids.dec.query_type] {
            let t = m2.params.get_mut(id);
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let prompts = random_prompts(&mut rng, cfg);
        let g = Graph::new();
        let b = Bound::frozen(&g, &m2.params);
        let pvars: Vec<PromptVar<'_>> = prompts
            .iter()
            .map(|p| PromptVar {
                embedding: g.constant(p.embedding.clone()),
                modality: p.modality,
                is_positive: p.is_positive,
            })
            .collect();
        let qv = build_queries_vars(&b, &m2.ids.dec, cfg, &pvars).unwrap();
        let q = qv.q.value();
        for (t, p) in prompts.iter().enumerate() {
            assert_eq!(q.row(t), p.embedding.data());
        }
        assert_eq!(qv.positive, 0);

        // Composition against a per-element loop oracle.
        let g2 = Graph::new();
        let b2 = Bound::frozen(&g2, &model.params);
        let pvars2: Vec<PromptVar<'_>> = prompts
            .iter()
            .map(|p| PromptVar {
                embedding: g2.constant(p.embedding.clone()),
                modality: p.modality,
                is_positive: p.is_positive,
            })
            .collect();
        let qv2 = build_queries_vars(&b2, &model.ids.dec, cfg, &pvars2).unwrap();
        let q2 = qv2.q.value();
        let pos = model.params.get(model.ids.dec.query_pos);
        let typ = model.params.get(model.ids.dec.query_type);
        for (t, p) in prompts.iter().enumerate() {
            for dcol in 0..cfg.embed_dim {
                let want = p.embedding.data()[dcol]
                    + pos.get2(t, dcol)
                    + typ.get2(p.modality.type_row(), dcol);
                assert!((q2.get2(t, dcol) - want).abs() < 1e-15);
            }
        }

        // Wrong count, wrong dim, no positive.
        let g3 = Graph::new();
        let b3 = Bound::frozen(&g3, &model.params);
        let short: Vec<PromptVar<'_>> = pvars2[..2]
            .iter()
            .map(|p| PromptVar {
                embedding: g3.constant(p.embedding.value()),
                modality: p.modality,
                is_positive: p.is_positive,
            })
            .collect();
        assert!(matches!(
            build_queries_vars(&b3, &model.ids.dec, cfg, &short),
            Err(ModelError::PromptCount { .. })
        ));
        let mut no_pos = prompts.clone();
        for p in &mut no_pos {
            p.is_positive = false;
        }
        let g4 = Graph::new();
        let b4 = Bound::frozen(&g4, &model.params);
        let pv: Vec<PromptVar<'_>> = no_pos
            .iter()
            .map(|p| PromptVar {
                embedding: g4.constant(p.embedding.clone()),
                modality: p.modality,
                is_positive: p.is_positive,
            })
            .collect();
        assert!(matches!(
            build_queries_vars(&b4, &model.ids.dec, cfg, &pv),
            Err(ModelError::PositiveCount { got: 0 })
        ));
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        use crate::tensor::gradcheck::{check_gradients, GradCheckConfig};
        // Scalar readout of H_final differentiated w.r.t. one block's
        // slot-attention matrices and the query tables.
        let model = tiny_model(24);
        let cfg = model.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let img = random_image(&mut rng, &cfg, SourceTag::DetailPage);
        let enc = model.encode_image(&img).unwrap();
        let prompts = random_prompts(&mut rng, &cfg);
        let readout: Vec<f64> = (0..cfg.num_queries * cfg.embed_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();

        let blk = model.ids.dec.blocks[0];
        let inputs = vec![
            model.params.get(blk.w_z).clone().with_grad(),
            model.params.get(blk.w_q).clone().with_grad(),
            model.params.get(blk.w_v).clone().with_grad(),
            model.params.get(blk.w_o).clone().with_grad(),
            model.params.get(model.ids.dec.query_pos).clone().with_grad(),
            model.params.get(model.ids.dec.query_type).clone().with_grad(),
        ];
        let names = ["w_z", "w_q", "w_v", "w_o", "query_pos", "query_type"];
        let cfg_gc = GradCheckConfig::default();
        let report = check_gradients(
            &inputs,
            |g, v| {
                // Rebind the model with the checked tensors substituted in.
                let mut work = model.params.clone();
                *work.get_mut(blk.w_z) = v[0].value();
                *work.get_mut(blk.w_q) = v[1].value();
                *work.get_mut(blk.w_v) = v[2].value();
                *work.get_mut(blk.w_o) = v[3].value();
                *work.get_mut(model.ids.dec.query_pos) = v[4].value();
                *work.get_mut(model.ids.dec.query_type) = v[5].value();
                let bound = Bound::frozen(g, &work);
                // Splice the grad-requiring vars over the frozen copies.
                let mut vars = bound.vars().to_vec();
                vars[blk.w_z.0] = v[0];
                vars[blk.w_q.0] = v[1];
                vars[blk.w_v.0] = v[2];
                vars[blk.w_o.0] = v[3];
                vars[model.ids.dec.query_pos.0] = v[4];
                vars[model.ids.dec.query_type.0] = v[5];
                let bound = Bound::from_vars(vars);
                let z = g.constant(enc.projected_tokens.clone());
                let pvars: Vec<PromptVar<'_>> = prompts
                    .iter()
                    .map(|p| PromptVar {
                        embedding: g.constant(p.embedding.clone()),
                        modality: p.modality,
                        is_positive: p.is_positive,
                    })
                    .collect();
                let qv = build_queries_vars(&bound, &model.ids.dec, &cfg, &pvars)
                    .map_err(|_| TensorError::NonFinite { what: "decode".into() })?;
                let out = decode_vars(&bound, &model.ids.dec, z, &qv)
                    .map_err(|_| TensorError::NonFinite { what: "decode".into() })?;
                let w = g.constant(
                    Tensor::matrix(cfg.num_queries, cfg.embed_dim, readout.clone()).unwrap(),
                );
                Ok(out.h_final.mul(w)?.sum_all())
            },
            &cfg_gc,
        )
        .unwrap();
        assert!(
            report.passes(&cfg_gc),
            "decoder gradcheck failed: rel err {} at {:?} ({})",
            report.max_rel_err,
            report.worst,
            report.worst.map(|(i, _)| names[i]).unwrap_or("-")
        );
    }
}
