//! Two-stage trainer: contrastive encoder warm-up, then decoder training
//! with the encoder path cut out of every decoder-side loss.
//!
//! Stage 1 updates the encoders and the temperature with the image-text
//! contrastive loss only; decoder parameters stay bitwise untouched. Stage 2
//! turns on all losses, but every decoder input that comes out of an encoder
//! (projected tokens, prompt embeddings, text vectors) is detached first, so
//! encoder gradients keep flowing solely from the contrastive alignment term
//! while the decoder, the match head, and the temperature train freely.

pub mod batch;
pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, PretrainConfig};
use crate::data::{DataError, LoadedDataset};
use crate::model::decoder::{build_queries_vars, decode_vars, Modality, PromptVar};
use crate::model::encoder::{
    encode_image_vars, encode_text_vars, EncodedImageVars, EncodedTextVars,
};
use crate::model::layers::Bound;
use crate::model::{EclipModel, ModelError};
use crate::momentum::{MomentumModel, RepresentationQueue};
use crate::objectives::{
    intra_loss_sample, inv_tau_var, itc_loss, itm_pair_loss, total_loss, BatchLossVars,
    LossBreakdown,
};
use crate::objectives::{entropy_reg_target, inter_loss};
use crate::tensor::graph::Graph;
use crate::tensor::{Tensor, TensorError};

use batch::{build_batch, BatchError, TrainBatch};
use checkpoint::{restore_params, CheckpointError, TrainState};
use optim::{clamp_log_tau, AdamW, LrSchedule};

/// Stream id of the training RNG; stream 0 is used for weight init.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("dataset of {got} products cannot fill a batch of {batch_size}")]
    DatasetTooSmall { got: usize, batch_size: usize },
    #[error(
        "training state was built for {expected} products but the dataset has {got}; \
         resume with the dataset the run started on"
    )]
    DatasetMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {step} ({detail}); offending batch: {batch}")]
    NonFiniteLoss {
        step: u64,
        detail: String,
        batch: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn as_u8(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    fn from_u8(v: u8) -> Self {
        match v {
            1 => Stage::One,
            _ => Stage::Two,
        }
    }
}

/// Result of one optimizer step, for logging.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// 1-based count over both stages.
    pub global_step: u64,
    pub stage: Stage,
    /// Epoch within the stage that this step belonged to.
    pub epoch: u64,
    pub breakdown: LossBreakdown,
}

/// Anchor enumeration for one epoch: every ordered pair of distinct views
/// (anchor source, partner source) of each product once, in product-major
/// order. A single-view product contributes one entry whose partner is the
/// anchor itself (re-augmented at batch time). `epoch_order` holds shuffled
/// indices into this table.
fn anchor_table(dataset: &LoadedDataset) -> Vec<(usize, usize, usize)> {
    let mut table = Vec::new();
    for (p, sources) in dataset.images.iter().enumerate() {
        let n = sources.len();
        if n == 1 {
            table.push((p, 0, 0));
            continue;
        }
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    table.push((p, a, b));
                }
            }
        }
    }
    table
}

fn active_mask(model: &EclipModel, stage: Stage) -> Vec<bool> {
    match stage {
        Stage::One => model
            .params
            .iter()
            .map(|(name, _)| {
                name.starts_with("img.") || name.starts_with("txt.") || name == "log_tau"
            })
            .collect(),
        Stage::Two => vec![true; model.params.len()],
    }
}

pub struct Trainer {
    pub config: PretrainConfig,
    pub model: EclipModel,
    pub momentum: MomentumModel,
    pub queue: RepresentationQueue,
    opt: AdamW,
    schedule: LrSchedule,
    rng: ChaCha8Rng,
    stage: Stage,
    global_step: u64,
    stage_step: u64,
    epoch: u64,
    epoch_order: Vec<usize>,
    epoch_pos: usize,
    active: Vec<bool>,
}

impl Trainer {
    pub fn new(config: PretrainConfig, dataset: &LoadedDataset) -> Result<Self, TrainError> {
        config.validate()?;
        if dataset.len() < config.train.batch_size {
            return Err(TrainError::DatasetTooSmall {
                got: dataset.len(),
                batch_size: config.train.batch_size,
            });
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = EclipModel::init(config.model.clone(), config.train.tau_init, &mut init_rng)?;
        let momentum = MomentumModel::new(&model.params);
        let queue =
            RepresentationQueue::new(config.train.queue_capacity, config.model.embed_dim);
        let opt = AdamW::new(
            &model.params,
            config.train.lr_encoders,
            config.train.lr_rest,
            config.train.weight_decay,
        );
        let schedule = LrSchedule {
            warmup_steps: config.train.warmup_steps,
            epoch_decay: config.train.epoch_lr_decay,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(TRAIN_STREAM);
        let active = active_mask(&model, Stage::One);
        let mut trainer = Trainer {
            config,
            model,
            momentum,
            queue,
            opt,
            schedule,
            rng,
            stage: Stage::One,
            global_step: 0,
            stage_step: 0,
            epoch: 0,
            epoch_order: Vec::new(),
            epoch_pos: 0,
            active,
        };
        trainer.reshuffle(anchor_table(dataset).len());
        Ok(trainer)
    }

    /// Rebuild a trainer from a checkpoint; the values of every parameter,
    /// moment, queue row, and the RNG cursor come back bit for bit.
    pub fn from_state(state: TrainState) -> Result<Self, TrainError> {
        let config = state.config.clone();
        config.validate()?;
        let mut model =
            EclipModel::init_seeded(config.model.clone(), config.train.tau_init, 0)?;
        restore_params(&mut model.params, &state.base)?;
        let mut momentum = MomentumModel::new(&model.params);
        restore_params(&mut momentum.params, &state.momentum)?;
        let queue = RepresentationQueue::restore(
            state.queue_capacity as usize,
            state.queue_dim as usize,
            &state.queue_rows,
        );
        let mut opt = AdamW::new(
            &model.params,
            config.train.lr_encoders,
            config.train.lr_rest,
            config.train.weight_decay,
        );
        opt.restore_state(state.opt_t, state.opt_m, state.opt_v);
        let schedule = LrSchedule {
            warmup_steps: config.train.warmup_steps,
            epoch_decay: config.train.epoch_lr_decay,
        };
        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        let stage = Stage::from_u8(state.stage);
        let active = active_mask(&model, stage);
        Ok(Trainer {
            config,
            model,
            momentum,
            queue,
            opt,
            schedule,
            rng,
            stage,
            global_step: state.global_step,
            stage_step: state.stage_step,
            epoch: state.epoch,
            epoch_order: state.epoch_order.iter().map(|&p| p as usize).collect(),
            epoch_pos: state.epoch_pos as usize,
            active,
        })
    }

    pub fn to_state(&self) -> TrainState {
        let named = |p: &crate::model::params::ParamSet| {
            p.iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect::<Vec<_>>()
        };
        let (opt_t, m, v) = self.opt.state();
        TrainState {
            config: self.config.clone(),
            stage: self.stage.as_u8(),
            global_step: self.global_step,
            stage_step: self.stage_step,
            epoch: self.epoch,
            epoch_order: self.epoch_order.iter().map(|&p| p as u64).collect(),
            epoch_pos: self.epoch_pos as u64,
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            base: named(&self.model.params),
            momentum: named(&self.momentum.params),
            queue_capacity: self.queue.capacity() as u64,
            queue_dim: self.queue.dim() as u64,
            queue_rows: self.queue.snapshot_rows(),
            opt_t,
            opt_m: m.to_vec(),
            opt_v: v.to_vec(),
        }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Two && self.epoch as usize >= self.config.train.stage2_epochs
    }

    fn stage_epochs(&self) -> usize {
        match self.stage {
            Stage::One => self.config.train.stage1_epochs,
            Stage::Two => self.config.train.stage2_epochs,
        }
    }

    fn reshuffle(&mut self, n: usize) {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        self.epoch_order = order;
    }

    fn advance_epoch(&mut self, n: usize) {
        self.epoch += 1;
        self.epoch_pos = 0;
        if (self.epoch as usize) < self.stage_epochs() {
            self.reshuffle(n);
        }
    }

    fn enter_stage2(&mut self, n: usize) {
        self.stage = Stage::Two;
        self.stage_step = 0;
        self.epoch = 0;
        self.epoch_pos = 0;
        // Fresh optimizer, fresh warmup, and a momentum copy resynced to the
        // stage-1 result; the queue only ever fills during stage 2.
        self.opt = AdamW::new(
            &self.model.params,
            self.config.train.lr_encoders,
            self.config.train.lr_rest,
            self.config.train.weight_decay,
        );
        self.momentum = MomentumModel::new(&self.model.params);
        self.active = active_mask(&self.model, Stage::Two);
        self.reshuffle(n);
    }

    /// Advance the state machine until one optimizer step has run. Returns
    /// `None` once both stages are exhausted.
    ///
    /// An epoch is one pass over every ordered pair of product views. Since
    /// a batch needs pairwise-distinct products, the walk greedily pulls the
    /// next compatible pair forward in `epoch_order`; a tail that cannot
    /// fill a full batch is dropped.
    pub fn step(&mut self, dataset: &LoadedDataset) -> Result<Option<StepRecord>, TrainError> {
        let table = anchor_table(dataset);
        if self.epoch_order.len() != table.len() {
            return Err(TrainError::DatasetMismatch {
                expected: self.epoch_order.len(),
                got: table.len(),
            });
        }
        loop {
            if (self.epoch as usize) >= self.stage_epochs() {
                match self.stage {
                    Stage::One => {
                        self.enter_stage2(table.len());
                        continue;
                    }
                    Stage::Two => return Ok(None),
                }
            }
            let b = self.config.train.batch_size;
            if self.epoch_pos + b > self.epoch_order.len() {
                // Drop the remainder; the next epoch reshuffles.
                self.advance_epoch(table.len());
                continue;
            }
            let mut filled = true;
            for k in 0..b {
                let pos = self.epoch_pos + k;
                let used: Vec<usize> = self.epoch_order[self.epoch_pos..pos]
                    .iter()
                    .map(|&e| table[e].0)
                    .collect();
                let pick = (pos..self.epoch_order.len())
                    .find(|&j| !used.contains(&table[self.epoch_order[j]].0));
                match pick {
                    Some(j) => self.epoch_order.swap(pos, j),
                    None => {
                        filled = false;
                        break;
                    }
                }
            }
            if !filled {
                self.advance_epoch(table.len());
                continue;
            }
            let chunk: Vec<(usize, usize, usize)> = self.epoch_order
                [self.epoch_pos..self.epoch_pos + b]
                .iter()
                .map(|&e| table[e])
                .collect();
            let hard_model = match self.stage {
                Stage::One => None,
                Stage::Two => Some(&self.model),
            };
            let batch = build_batch(
                dataset,
                &chunk,
                &self.config.train,
                &self.model.config,
                hard_model,
                &mut self.rng,
            )?;
            let breakdown = self.train_step(&batch)?;
            self.epoch_pos += b;
            self.global_step += 1;
            self.stage_step += 1;
            return Ok(Some(StepRecord {
                global_step: self.global_step,
                stage: self.stage,
                epoch: self.epoch,
                breakdown,
            }));
        }
    }

    /// Drive [`Trainer::step`] until both stages finish.
    pub fn run_to_completion<F>(
        &mut self,
        dataset: &LoadedDataset,
        mut on_step: F,
    ) -> Result<(), TrainError>
    where
        F: FnMut(&StepRecord),
    {
        while let Some(record) = self.step(dataset)? {
            on_step(&record);
        }
        Ok(())
    }

    /// One forward/backward/update on an assembled batch.
    fn train_step(&mut self, batch: &TrainBatch) -> Result<LossBreakdown, TrainError> {
        let stage2 = self.stage == Stage::Two;
        let tau_now = self.model.tau();
        let (grads, breakdown, mom_rows) = {
            let cfg = &self.model.config;
            let ids = &self.model.ids;
            let tw = &self.config.train;
            let n_items = batch.items.len();

            let g = Graph::new();
            let bound = Bound::trainable(&g, &self.model.params);
            let inv_tau = inv_tau_var(bound.var(ids.log_tau));

            let mut enc_anchor: Vec<EncodedImageVars> = Vec::with_capacity(n_items);
            let mut enc_text: Vec<EncodedTextVars> = Vec::with_capacity(n_items);
            for item in &batch.items {
                enc_anchor.push(encode_image_vars(&bound, &ids.img, cfg, &item.anchor)?);
                enc_text.push(encode_text_vars(&bound, &ids.txt, cfg, &item.text)?);
            }
            let img_rows: Vec<_> = enc_anchor.iter().map(|e| e.projected_cls).collect();
            let txt_rows: Vec<_> = enc_text.iter().map(|e| e.projected_cls).collect();
            let itc = itc_loss(g.stack_rows(&img_rows)?, g.stack_rows(&txt_rows)?, inv_tau)?;

            let zero = || g.constant(Tensor::scalar(0.0));
            let mut parts = BatchLossVars {
                itc,
                inter: zero(),
                itm: zero(),
                intra: zero(),
                reg: zero(),
            };
            let mut mom_rows: Vec<Vec<f64>> = Vec::new();

            if stage2 {
                let mom_bound = Bound::frozen(&g, &self.momentum.params);

                // Which per-item encodes the prompt plan actually touches.
                let mut need_partner = vec![false; n_items];
                let mut need_m_anchor = vec![false; n_items];
                let mut need_m_text = vec![false; n_items];
                for (i, item) in batch.items.iter().enumerate() {
                    match item.positive_modality {
                        Modality::Text => need_m_text[i] = true,
                        Modality::Image => {
                            need_partner[i] = true;
                            need_m_anchor[i] = true;
                        }
                    }
                    for &(j, m) in &item.negatives {
                        match m {
                            Modality::Text => need_m_text[j] = true,
                            Modality::Image => need_m_anchor[j] = true,
                        }
                    }
                }

                // Base-side partner views feed image prompts; they ride the
                // tape but every use below is detached.
                let mut enc_partner: Vec<Option<EncodedImageVars>> = Vec::with_capacity(n_items);
                for (i, item) in batch.items.iter().enumerate() {
                    enc_partner.push(if need_partner[i] {
                        Some(encode_image_vars(&bound, &ids.img, cfg, &item.partner)?)
                    } else {
                        None
                    });
                }
                // Momentum side mirrors the pair with the roles swapped: it
                // decodes the partner view, prompted by the anchor.
                let mut enc_m_partner: Vec<EncodedImageVars> = Vec::with_capacity(n_items);
                let mut enc_m_anchor: Vec<Option<EncodedImageVars>> =
                    Vec::with_capacity(n_items);
                let mut enc_m_text: Vec<Option<EncodedTextVars>> = Vec::with_capacity(n_items);
                for (i, item) in batch.items.iter().enumerate() {
                    enc_m_partner.push(encode_image_vars(
                        &mom_bound, &ids.img, cfg, &item.partner,
                    )?);
                    enc_m_anchor.push(if need_m_anchor[i] {
                        Some(encode_image_vars(&mom_bound, &ids.img, cfg, &item.anchor)?)
                    } else {
                        None
                    });
                    enc_m_text.push(if need_m_text[i] {
                        Some(encode_text_vars(&mom_bound, &ids.txt, cfg, &item.text)?)
                    } else {
                        None
                    });
                }

                let mut h_pos_rows = Vec::with_capacity(n_items);
                let mut h_mom_rows = Vec::with_capacity(n_items);
                let mut intra = zero();
                let mut itm = zero();
                let mut reg = zero();
                for (i, item) in batch.items.iter().enumerate() {
                    let mut prompts = Vec::with_capacity(cfg.num_queries);
                    let mut prompts_m = Vec::with_capacity(cfg.num_queries);
                    let mut negs = item.negatives.iter();
                    for slot in 0..cfg.num_queries {
                        if slot == item.positive_slot {
                            let (emb, emb_m) = match item.positive_modality {
                                Modality::Text => (
                                    enc_text[i].projected_cls.detach(),
                                    enc_m_text[i].as_ref().expect("needed").projected_cls,
                                ),
                                Modality::Image => (
                                    enc_partner[i]
                                        .as_ref()
                                        .expect("needed")
                                        .projected_cls
                                        .detach(),
                                    enc_m_anchor[i].as_ref().expect("needed").projected_cls,
                                ),
                            };
                            prompts.push(PromptVar {
                                embedding: emb,
                                modality: item.positive_modality,
                                is_positive: true,
                            });
                            prompts_m.push(PromptVar {
                                embedding: emb_m,
                                modality: item.positive_modality,
                                is_positive: true,
                            });
                        } else {
                            let &(j, m) = negs.next().expect("T-1 negatives");
                            let (emb, emb_m) = match m {
                                Modality::Text => (
                                    enc_text[j].projected_cls.detach(),
                                    enc_m_text[j].as_ref().expect("needed").projected_cls,
                                ),
                                Modality::Image => (
                                    enc_anchor[j].projected_cls.detach(),
                                    enc_m_anchor[j].as_ref().expect("needed").projected_cls,
                                ),
                            };
                            prompts.push(PromptVar {
                                embedding: emb,
                                modality: m,
                                is_positive: false,
                            });
                            prompts_m.push(PromptVar {
                                embedding: emb_m,
                                modality: m,
                                is_positive: false,
                            });
                        }
                    }

                    let queries = build_queries_vars(&bound, &ids.dec, cfg, &prompts)?;
                    let z = enc_anchor[i].projected_tokens.detach();
                    let dec = decode_vars(&bound, &ids.dec, z, &queries)?;
                    let h_r = dec
                        .h_final
                        .select_row(item.positive_slot)?
                        .reshape(vec![1, cfg.embed_dim])?;
                    h_pos_rows.push(h_r);

                    let queries_m = build_queries_vars(&mom_bound, &ids.dec, cfg, &prompts_m)?;
                    let dec_m = decode_vars(
                        &mom_bound,
                        &ids.dec,
                        enc_m_partner[i].projected_tokens,
                        &queries_m,
                    )?;
                    let h_mom = dec_m.h_final.select_row(item.positive_slot)?;
                    h_mom_rows.push(h_mom);

                    let txt_det = enc_text[i].projected_cls.detach();
                    intra = intra.add(intra_loss_sample(
                        dec.h_final,
                        txt_det,
                        item.positive_slot,
                        inv_tau,
                    )?)?;
                    let txt_neg = enc_text[item.itm_negative].projected_cls.detach();
                    itm = itm.add(itm_pair_loss(&bound, &ids.itm, h_r, txt_det, true)?)?;
                    itm = itm.add(itm_pair_loss(&bound, &ids.itm, h_r, txt_neg, false)?)?;
                    reg = reg.add(entropy_reg_target(
                        &dec.m_all,
                        item.positive_slot,
                        tw.reg_target,
                    )?)?;
                }

                let h_mat = g.stack_rows(&h_pos_rows)?;
                let target_mat = g.stack_rows(&h_mom_rows)?;
                let queue_var = if self.queue.len() >= tw.inter_queue_warmup {
                    self.queue.as_tensor().map(|t| g.constant(t))
                } else {
                    None
                };
                parts.inter = inter_loss(&g, h_mat, target_mat, queue_var, inv_tau)?;
                parts.intra = intra;
                parts.itm = itm;
                parts.reg = reg;
                mom_rows = h_mom_rows
                    .iter()
                    .map(|h| h.value_with(|t| t.row(0).to_vec()))
                    .collect();
            }

            let (total, breakdown) =
                match total_loss(&parts, &tw.loss_weights, n_items, tau_now) {
                    Ok(x) => x,
                    Err(TensorError::NonFinite { what }) => {
                        return Err(TrainError::NonFiniteLoss {
                            step: self.global_step,
                            detail: what,
                            batch: batch.describe(),
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
            let mut store = g.backward(total)?;
            let grads: Vec<Tensor> = bound
                .vars()
                .iter()
                .map(|v| store.take_or_zeros(*v))
                .collect();
            (grads, breakdown, mom_rows)
        };

        // Warmup counts global steps so stage 2 starts at full rate; the
        // per-epoch decay ladder restarts with each stage.
        let lr_mult = self
            .schedule
            .multiplier(self.global_step as usize, self.epoch as usize);
        self.opt
            .step(&mut self.model.params, &grads, lr_mult, &self.active);
        clamp_log_tau(&mut self.model.params, self.model.ids.log_tau);
        if stage2 {
            self.momentum
                .update(&self.model.params, self.config.train.ema_momentum);
            // Enqueue this batch's momentum targets only after the loss used
            // the queue, so a batch never contrast against itself.
            for row in &mom_rows {
                self.queue.push(row);
            }
        }
        Ok(breakdown)
    }
}
