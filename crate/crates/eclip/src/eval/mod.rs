//! Zero-shot transfer heads: classification, image-text retrieval, product
//! retrieval over instance representations, and grounding checks. All
//! evaluation is read-only over the model and deterministic given the
//! negative-query generator's construction.

pub mod grounding;
pub mod metrics;
pub mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{DataError, GtBox, ImageSample, LoadedDataset, TextSample};
use crate::model::decoder::{Modality, Prompt};
use crate::model::{DecodeOutput, EclipModel, ModelError};
use crate::tensor::{Tensor, TensorError};

use metrics::{rank_by_scores, RetrievalResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid evaluation input: {0}")]
    Input(String),
}

/// Source of the T-1 negative prompt embeddings filling the non-positive
/// query slots. Negatives enter query composition exactly like real prompts
/// (positional + text-type embedding added); Gaussian draws are used raw,
/// without normalization.
#[derive(Debug, Clone)]
pub enum NegativeQueries {
    /// A fixed set of embeddings reused for every evaluated sample, so one
    /// sample always maps to one representation.
    Fixed(Vec<Tensor>),
    /// Running average of the positive prompts seen so far; each sample is
    /// probed against the trail of its predecessors.
    Ema {
        current: Tensor,
        momentum: f64,
        count: usize,
    },
}

impl NegativeQueries {
    /// `count` i.i.d. standard-normal rows of width `dim`.
    pub fn random(count: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..count)
            .map(|_| {
                let data: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                Tensor::matrix(1, dim, data).expect("row data matches dim")
            })
            .collect();
        NegativeQueries::Fixed(rows)
    }

    /// `count` rows drawn uniformly (with replacement) from a pool of
    /// projected text embeddings.
    pub fn from_text_pool(
        pool: &[Tensor],
        count: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        if pool.is_empty() {
            return Err(EvalError::Input(
                "text-pool negatives need a non-empty pool".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..count)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        Ok(NegativeQueries::Fixed(rows))
    }

    /// EMA negatives start from the zero embedding.
    pub fn ema(count: usize, dim: usize, momentum: f64) -> Self {
        let _ = count;
        NegativeQueries::Ema {
            current: Tensor::zeros(vec![1, dim]).expect("positive dim"),
            momentum,
            count: 0,
        }
    }

    /// Embeddings for one sample; the EMA variant then folds in the
    /// sample's positive prompt.
    fn next(&mut self, count: usize, positive: &Tensor) -> Vec<Tensor> {
        match self {
            NegativeQueries::Fixed(rows) => {
                assert_eq!(rows.len(), count, "negative count fixed at construction");
                rows.clone()
            }
            NegativeQueries::Ema {
                current,
                momentum,
                count: seen,
            } => {
                let out = vec![current.clone(); count];
                let m = *momentum;
                for (c, p) in current.data_mut().iter_mut().zip(positive.data()) {
                    *c = m * *c + (1.0 - m) * p;
                }
                *seen += 1;
                out
            }
        }
    }
}

/// Decode one sample with its text as the positive prompt in slot 0 and
/// generator-supplied negatives in the remaining slots.
pub fn positive_decode(
    model: &EclipModel,
    image: &ImageSample,
    text: &TextSample,
    neg: &mut NegativeQueries,
) -> Result<DecodeOutput, EvalError> {
    let enc_img = model.encode_image(image)?;
    let enc_txt = model.encode_text(text)?;
    let t = model.config.num_queries;
    let mut prompts = Vec::with_capacity(t);
    prompts.push(Prompt::new(
        enc_txt.projected_cls.clone(),
        Modality::Text,
        true,
    ));
    for emb in neg.next(t - 1, &enc_txt.projected_cls) {
        prompts.push(Prompt::new(emb, Modality::Text, false));
    }
    Ok(model.decode(&enc_img, &prompts)?)
}

/// The positive query's final representation (slot 0), a unit 1 x D row.
pub fn instance_representation(
    model: &EclipModel,
    image: &ImageSample,
    text: &TextSample,
    neg: &mut NegativeQueries,
) -> Result<Tensor, EvalError> {
    let out = positive_decode(model, image, text, neg)?;
    let d = out.h_final.cols();
    Ok(Tensor::matrix(1, d, out.h_final.row(0).to_vec())?)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Project each text's CLS into the joint space (unit rows).
pub fn embed_texts(model: &EclipModel, texts: &[TextSample]) -> Result<Vec<Tensor>, EvalError> {
    texts
        .iter()
        .map(|t| Ok(model.encode_text(t)?.projected_cls))
        .collect()
}

/// Argmax category by similarity between the sample's instance
/// representation and each category-text embedding; ties break toward the
/// lowest index.
pub fn zero_shot_classify(
    model: &EclipModel,
    image: &ImageSample,
    text: &TextSample,
    category_embs: &[Tensor],
    neg: &mut NegativeQueries,
) -> Result<usize, EvalError> {
    if category_embs.len() < 2 {
        return Err(EvalError::Input(format!(
            "classification needs >= 2 categories, got {}",
            category_embs.len()
        )));
    }
    let rep = instance_representation(model, image, text, neg)?;
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (c, emb) in category_embs.iter().enumerate() {
        let s = dot(&rep, emb);
        if s > best_sim {
            best_sim = s;
            best = c;
        }
    }
    Ok(best)
}

/// Encoder-only retrieval in both directions, ranked by the projected CLS
/// similarity. Returns (image-to-text, text-to-image).
pub fn image_text_retrieval(
    model: &EclipModel,
    images: &[ImageSample],
    texts: &[TextSample],
) -> Result<(RetrievalResult, RetrievalResult), EvalError> {
    let img_embs: Vec<Tensor> = images
        .iter()
        .map(|s| Ok(model.encode_image(s)?.projected_cls))
        .collect::<Result<_, ModelError>>()?;
    let txt_embs = embed_texts(model, texts)?;
    let i2t = RetrievalResult {
        queries: img_embs
            .iter()
            .map(|q| {
                let scores: Vec<f64> = txt_embs.iter().map(|g| dot(q, g)).collect();
                rank_by_scores(&scores)
            })
            .collect(),
    };
    let t2i = RetrievalResult {
        queries: txt_embs
            .iter()
            .map(|q| {
                let scores: Vec<f64> = img_embs.iter().map(|g| dot(q, g)).collect();
                rank_by_scores(&scores)
            })
            .collect(),
    };
    Ok((i2t, t2i))
}

/// One evaluation sample with the labels retrieval relevance is built from.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub image: ImageSample,
    pub text: TextSample,
    pub product_id: u64,
    pub category_id: u32,
}

/// Every (product, source) pair of the dataset as an evaluation item.
pub fn dataset_items(ds: &LoadedDataset, vocab_size: u32) -> Result<Vec<EvalItem>, EvalError> {
    let mut items = Vec::new();
    for p in 0..ds.len() {
        let record = &ds.manifest.products[p];
        let text = ds.manifest.text_sample(p, vocab_size)?;
        for img in &ds.images[p] {
            items.push(EvalItem {
                image: img.clone(),
                text: text.clone(),
                product_id: record.product_id,
                category_id: record.category_id,
            });
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchRule {
    SameCategory,
    SameProduct,
}

/// Gallery ids relevant to each query under the match rule.
pub fn match_relevance(
    queries: &[EvalItem],
    gallery: &[EvalItem],
    rule: MatchRule,
) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| match rule {
                    MatchRule::SameCategory => g.category_id == q.category_id,
                    MatchRule::SameProduct => g.product_id == q.product_id,
                })
                .map(|(j, _)| j)
                .collect()
        })
        .collect()
}

/// Instance-representation retrieval: embed gallery then queries with the
/// same negative generator and rank by cosine (dot of unit rows).
pub fn product_retrieval(
    model: &EclipModel,
    queries: &[EvalItem],
    gallery: &[EvalItem],
    neg: &mut NegativeQueries,
) -> Result<RetrievalResult, EvalError> {
    let gallery_reps: Vec<Tensor> = gallery
        .iter()
        .map(|it| instance_representation(model, &it.image, &it.text, neg))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(queries.len());
    for it in queries {
        let rep = instance_representation(model, &it.image, &it.text, neg)?;
        let scores: Vec<f64> = gallery_reps.iter().map(|g| dot(&rep, g)).collect();
        out.push(rank_by_scores(&scores));
    }
    Ok(RetrievalResult { queries: out })
}

/// Mean assignment mass of the positive query (slot 0) inside and outside
/// the ground-truth box at the final decoder block.
pub fn positive_mass_means(out: &DecodeOutput, gt: &GtBox, grid_w: usize) -> (f64, f64) {
    let m = &out.m_final;
    let inside = m.mass_in_box(0, gt, grid_w);
    let outside = m.mass_outside_box(0, gt, grid_w);
    let in_cells = gt.area() as f64;
    let out_cells = m.num_tokens() as f64 - in_cells;
    let inside_mean = inside / in_cells;
    let outside_mean = if out_cells > 0.0 {
        outside / out_cells
    } else {
        0.0
    };
    (inside_mean, outside_mean)
}
