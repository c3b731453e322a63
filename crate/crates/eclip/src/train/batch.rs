//! Batch assembly: multi-source positive pairs, prompt negatives from the
//! other in-batch products, and hard-negative sampling once the encoders
//! carry signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{DataError, ImageSample, LoadedDataset, TextSample};
use crate::model::decoder::Modality;
use crate::model::{EclipModel, ModelError};
use crate::tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("batch needs at least 2 distinct products, got {got}")]
    TooFewProducts { got: usize },
    #[error("duplicate product index {index} in batch draw")]
    DuplicateProduct { index: usize },
}

/// One training sample: a product with two views, its text, and the prompt
/// plan for the decoder.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Dataset product index.
    pub product: usize,
    pub anchor_source: usize,
    pub partner_source: usize,
    /// True when the product has a single source and the partner is a
    /// noise-jittered copy of the anchor instead of a second view.
    pub partner_reaugmented: bool,
    pub anchor: ImageSample,
    pub partner: ImageSample,
    pub text: TextSample,
    /// Slot index r of the positive query.
    pub positive_slot: usize,
    /// Positive prompt modality: the sample's own text, or the partner
    /// image's projected CLS.
    pub positive_modality: Modality,
    /// (batch position, prompt modality) for each of the T-1 negatives.
    pub negatives: Vec<(usize, Modality)>,
    /// Batch position whose text plays the mismatched ITM pair.
    pub itm_negative: usize,
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub items: Vec<BatchItem>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Compact description for diagnostics when a step fails.
    pub fn describe(&self) -> String {
        let parts: Vec<String> = self
            .items
            .iter()
            .map(|it| {
                format!(
                    "p{}@{}/{}{}r{}",
                    it.product,
                    it.anchor_source,
                    it.partner_source,
                    if it.partner_reaugmented { "*" } else { ":" },
                    it.positive_slot
                )
            })
            .collect();
        parts.join(" ")
    }
}

/// Softmax weights over the other rows' texts for anchor `i`, given the
/// B x B image-to-text similarity matrix; entry `i` gets weight zero. With
/// all similarities equal the result is exactly uniform over the B-1 others.
pub fn hard_negative_weights(sims: &Tensor, i: usize) -> Vec<f64> {
    let b = sims.rows();
    let row = sims.row(i);
    let mut mx = f64::NEG_INFINITY;
    for (j, &s) in row.iter().enumerate() {
        if j != i {
            mx = mx.max(s);
        }
    }
    let mut w = vec![0.0; b];
    let mut z = 0.0;
    for (j, &s) in row.iter().enumerate() {
        if j != i {
            let e = (s - mx).exp();
            w[j] = e;
            z += e;
        }
    }
    for v in &mut w {
        *v /= z;
    }
    w
}

/// Draw one index proportionally to `weights`, then zero it out so repeated
/// calls sample without replacement.
fn draw_weighted(weights: &mut [f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "no remaining sampling mass");
    let x = rng.random_range(0.0..total);
    let mut acc = 0.0;
    let mut chosen = None;
    for (j, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        if x < acc {
            chosen = Some(j);
            break;
        }
    }
    // Float round-off can leave x just past the last positive bucket.
    let j = chosen.unwrap_or_else(|| {
        weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("at least one positive weight")
    });
    weights[j] = 0.0;
    j
}

/// Assemble a batch from `anchors`: (product, anchor source, partner source)
/// triples with pairwise-distinct products. A partner equal to the anchor
/// marks a single-view product whose partner is a re-augmented anchor copy.
///
/// Per item, in fixed RNG order: the re-augmentation noise (single-view
/// only), positive slot, positive-modality coin. Then, when `hard_model` is
/// given, anchor images and texts are encoded to build the cross-modal
/// similarity matrix; finally per item the T-1 negative donors, their
/// modality coins, and the ITM donor are drawn (softmax-weighted when
/// similarities exist, uniform otherwise).
pub fn build_batch(
    dataset: &LoadedDataset,
    anchors: &[(usize, usize, usize)],
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    hard_model: Option<&EclipModel>,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch, BatchError> {
    if anchors.len() < 2 {
        return Err(BatchError::TooFewProducts { got: anchors.len() });
    }
    let mut seen: Vec<usize> = anchors.iter().map(|&(p, _, _)| p).collect();
    seen.sort_unstable();
    for w in seen.windows(2) {
        if w[0] == w[1] {
            return Err(BatchError::DuplicateProduct { index: w[0] });
        }
    }

    let t_queries = model_cfg.num_queries;
    let mut items = Vec::with_capacity(anchors.len());
    for &(p, anchor_source, partner_src) in anchors {
        let sources = &dataset.images[p];
        debug_assert!(anchor_source < sources.len() && partner_src < sources.len());
        let (partner_source, partner, reaug) = if partner_src != anchor_source {
            (partner_src, sources[partner_src].clone(), false)
        } else {
            // Single view: jitter the anchor features into a second view.
            let a = &sources[anchor_source];
            let mut feats = a.patch_features.clone();
            for v in feats.data_mut() {
                *v += train_cfg.augment_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            let img = ImageSample::new(a.grid_h, a.grid_w, feats, a.source_tag)?;
            (anchor_source, img, true)
        };
        let positive_slot = rng.random_range(0..t_queries);
        let positive_modality = if rng.random_bool(0.5) {
            Modality::Text
        } else {
            Modality::Image
        };
        items.push(BatchItem {
            product: p,
            anchor_source,
            partner_source,
            partner_reaugmented: reaug,
            anchor: sources[anchor_source].clone(),
            partner,
            text: dataset
                .manifest
                .text_sample(p, model_cfg.vocab_size as u32)?,
            positive_slot,
            positive_modality,
            negatives: Vec::new(),
            itm_negative: 0,
        });
    }

    // Cross-modal similarities for hard negatives (does not consume RNG).
    let sims = match hard_model {
        Some(model) => {
            let b = items.len();
            let inv_tau = 1.0 / model.tau();
            let imgs: Vec<Tensor> = items
                .iter()
                .map(|it| Ok(model.encode_image(&it.anchor)?.projected_cls))
                .collect::<Result<_, ModelError>>()?;
            let txts: Vec<Tensor> = items
                .iter()
                .map(|it| Ok(model.encode_text(&it.text)?.projected_cls))
                .collect::<Result<_, ModelError>>()?;
            let mut s = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    let dot: f64 = imgs[i]
                        .data()
                        .iter()
                        .zip(txts[j].data())
                        .map(|(a, c)| a * c)
                        .sum();
                    s[i * b + j] = dot * inv_tau;
                }
            }
            Some(Tensor::matrix(b, b, s).expect("square similarity matrix"))
        }
        None => None,
    };

    let b = items.len();
    for i in 0..b {
        let mut weights = match &sims {
            Some(s) => hard_negative_weights(s, i),
            None => {
                let mut w = vec![1.0; b];
                w[i] = 0.0;
                w
            }
        };
        let negatives: Vec<(usize, Modality)> = (0..t_queries - 1)
            .map(|_| {
                let donor = draw_weighted(&mut weights, rng);
                let modality = if rng.random_bool(0.5) {
                    Modality::Text
                } else {
                    Modality::Image
                };
                (donor, modality)
            })
            .collect();
        // Fresh weights: the ITM donor draw is independent of the prompt set.
        let mut itm_weights = match &sims {
            Some(s) => hard_negative_weights(s, i),
            None => {
                let mut w = vec![1.0; b];
                w[i] = 0.0;
                w
            }
        };
        let itm_negative = draw_weighted(&mut itm_weights, rng);
        items[i].negatives = negatives;
        items[i].itm_negative = itm_negative;
    }

    Ok(TrainBatch { items })
}
