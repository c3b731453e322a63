//! AdamW with decoupled weight decay, two learning-rate groups, and the
//! warmup + per-epoch decay schedule.

use crate::model::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Temperature bounds: tau stays in [5e-3, 1.0].
pub const TAU_MIN: f64 = 5e-3;
pub const TAU_MAX: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct AdamW {
    /// First and second moment per parameter, parameter-set order.
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Number of completed steps (bias correction uses t+1).
    t: u64,
    /// Base learning rate per parameter.
    base_lr: Vec<f64>,
    /// Whether weight decay applies to the parameter.
    decayed: Vec<bool>,
    weight_decay: f64,
}

impl AdamW {
    /// Group parameters by name: `img.*` and `txt.*` use `lr_encoders`,
    /// everything else (`dec.*`, `itm.*`, `log_tau`) uses `lr_rest`.
    /// Weight decay applies to every parameter except the log-temperature.
    pub fn new(params: &ParamSet, lr_encoders: f64, lr_rest: f64, weight_decay: f64) -> Self {
        let mut base_lr = Vec::with_capacity(params.len());
        let mut decayed = Vec::with_capacity(params.len());
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, tensor) in params.iter() {
            let enc = name.starts_with("img.") || name.starts_with("txt.");
            base_lr.push(if enc { lr_encoders } else { lr_rest });
            decayed.push(name != "log_tau");
            m.push(Tensor::zeros(tensor.shape().to_vec()).expect("moment shape"));
            v.push(Tensor::zeros(tensor.shape().to_vec()).expect("moment shape"));
        }
        AdamW {
            m,
            v,
            t: 0,
            base_lr,
            decayed,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: `p -= lr (m_hat / (sqrt(v_hat) + eps) + wd p)` with
    /// `lr = base_lr * lr_mult`. Parameters where `active` is false are
    /// skipped entirely: no moment update, no decay, bitwise untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Tensor],
        lr_mult: f64,
        active: &[bool],
    ) {
        assert_eq!(grads.len(), params.len());
        assert_eq!(active.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            if !active[i] {
                continue;
            }
            let lr = self.base_lr[i] * lr_mult;
            let wd = if self.decayed[i] { self.weight_decay } else { 0.0 };
            let p = params.get_mut(ParamId(i));
            debug_assert_eq!(p.shape(), grads[i].shape());
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for ((x, g), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *x);
            }
        }
    }

    /// Moments for checkpointing, parameter-set order.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Clamp the log-temperature so tau stays inside [TAU_MIN, TAU_MAX].
pub fn clamp_log_tau(params: &mut ParamSet, id: ParamId) {
    let t = params.get_mut(id);
    let v = t.data_mut();
    v[0] = v[0].clamp(TAU_MIN.ln(), TAU_MAX.ln());
}

/// Linear warmup over the first `warmup_steps` of a stage, multiplied by
/// `epoch_decay^epoch`. The warmup step count is global while epochs are
/// counted within the stage: a stage change restarts the decay ladder but
/// never re-runs warmup.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub epoch_decay: f64,
}

impl LrSchedule {
    pub fn multiplier(&self, global_step: usize, stage_epoch: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            (((global_step + 1) as f64) / self.warmup_steps as f64).min(1.0)
        };
        warm * self.epoch_decay.powi(stage_epoch as i32)
    }
}
