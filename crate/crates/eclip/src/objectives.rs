//! Training objectives.
//!
//! Every builder returns a scalar graph node holding the batch *sum* of its
//! per-sample terms; [`total_loss`] converts the sums to per-batch means,
//! applies the loss weights, and adds them up, so the logged breakdown
//! fields always sum to the logged total.
//!
//! All contrastive terms share one temperature. Callers pass
//! `inv_tau = exp(-log_tau)` as a graph node so gradients reach the log
//! parameter; the [5e-3, 1.0] clamp on tau itself is enforced by the
//! optimizer after each step, not here.

use crate::config::{LossWeights, RegTarget};
use crate::model::layers::{linear, Bound};
use crate::model::params::LinearIds;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

/// `exp(-log_tau)`, the logit scale shared by all contrastive terms.
pub fn inv_tau_var<'g>(log_tau: Var<'g>) -> Var<'g> {
    log_tau.mul_scalar(-1.0).exp()
}

/// Symmetric image-text contrastive loss over a batch of B pairs.
///
/// `img` and `txt` are B x D with unit rows; pair (i, i) is the positive.
/// Returns (sum_i CE_i2t + sum_i CE_t2i) / 2.
pub fn itc_loss<'g>(
    img: Var<'g>,
    txt: Var<'g>,
    inv_tau: Var<'g>,
) -> Result<Var<'g>, TensorError> {
    let sim = img.matmul(txt.t()?)?.mul_var_scalar(inv_tau)?;
    let lse_rows = sim.log_sum_exp(1)?.sum_all();
    let lse_cols = sim.log_sum_exp(0)?.sum_all();
    let diag = sim.trace()?;
    lse_rows.add(lse_cols)?.mul_scalar(0.5).sub(diag)
}

/// Queue-contrastive loss pulling each row of `h` toward its momentum
/// target against the queue negatives; sums the per-sample terms.
///
/// `h` and `targets` are B x D with unit rows, `queue` is K x D. With no
/// queue there are no negatives and the loss is identically zero, so the
/// caller gets a gradient-free constant.
pub fn inter_loss<'g>(
    g: &'g Graph,
    h: Var<'g>,
    targets: Var<'g>,
    queue: Option<Var<'g>>,
    inv_tau: Var<'g>,
) -> Result<Var<'g>, TensorError> {
    let queue = match queue {
        Some(q) => q,
        None => return Ok(g.constant(Tensor::scalar(0.0))),
    };
    let b = h.value_with(|t| t.rows());
    let pos = h.mul(targets)?.sum_axis(1)?.mul_var_scalar(inv_tau)?;
    let pos_col = pos.reshape(vec![b, 1])?;
    let neg = h.matmul(queue.t()?)?.mul_var_scalar(inv_tau)?;
    let logits = g.concat_cols(&[pos_col, neg])?;
    logits.log_sum_exp(1)?.sum_all().sub(pos.sum_all())
}

/// Cross-entropy of the positive query against all T query representations
/// of one sample: -log softmax over rows of `h . txt / tau` at `positive`.
///
/// `h` is T x D with unit rows, `txt` is 1 x D unit. With T = 1 the softmax
/// is degenerate and the loss is exactly zero.
pub fn intra_loss_sample<'g>(
    h: Var<'g>,
    txt: Var<'g>,
    positive: usize,
    inv_tau: Var<'g>,
) -> Result<Var<'g>, TensorError> {
    let t = h.value_with(|v| v.rows());
    let sims = h.matmul(txt.t()?)?.mul_var_scalar(inv_tau)?;
    let lse = sims.reshape(vec![1, t])?.log_sum_exp(1)?.sum_all();
    lse.sub(sims.select_elem(positive, 0)?)
}

/// Two-way match cross-entropy on the fused instance-text vector
/// `h_r * txt` for one (instance, text) pair.
pub fn itm_pair_loss<'g>(
    b: &Bound<'g>,
    head: &LinearIds,
    h_r: Var<'g>,
    txt: Var<'g>,
    matched: bool,
) -> Result<Var<'g>, TensorError> {
    let logits = linear(b, head, h_r.mul(txt)?)?;
    let label = usize::from(matched);
    let lse = logits.log_sum_exp(1)?.sum_all();
    lse.sub(logits.select_elem(0, label)?)
}

/// Assignment-entropy regularizer for one N x T matrix:
/// `2 c_r - sum_j c_j + (T - 1) ln N` with `c_j = -sum_i M_ij ln M_ij`,
/// using the convention `0 ln 0 = 0`. Pushes the positive query's column
/// toward concentration and the negatives' toward spread.
pub fn entropy_reg<'g>(m: Var<'g>, positive: usize) -> Result<Var<'g>, TensorError> {
    let (n, t) = m.value_with(|v| (v.rows(), v.cols()));
    let c = m.x_ln_x().sum_axis(0)?.mul_scalar(-1.0);
    let c_r = c.select_elem(0, positive)?;
    Ok(c_r
        .mul_scalar(2.0)
        .sub(c.sum_all())?
        .add_scalar((t as f64 - 1.0) * (n as f64).ln()))
}

/// Regularizer over the configured target: the final block's matrix or the
/// mean across all blocks.
pub fn entropy_reg_target<'g>(
    m_all: &[Var<'g>],
    positive: usize,
    target: RegTarget,
) -> Result<Var<'g>, TensorError> {
    match target {
        RegTarget::FinalBlock => {
            entropy_reg(*m_all.last().expect("at least one block"), positive)
        }
        RegTarget::AllBlocksMean => {
            let mut acc = entropy_reg(m_all[0], positive)?;
            for m in &m_all[1..] {
                acc = acc.add(entropy_reg(*m, positive)?)?;
            }
            Ok(acc.mul_scalar(1.0 / m_all.len() as f64))
        }
    }
}

/// Batch sums of each objective as graph nodes. Disabled objectives are
/// zero constants.
pub struct BatchLossVars<'g> {
    pub itc: Var<'g>,
    pub inter: Var<'g>,
    pub itm: Var<'g>,
    pub intra: Var<'g>,
    pub reg: Var<'g>,
}

/// Weighted per-batch-mean contributions; fields sum to `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub itc: f64,
    pub inter: f64,
    pub itm: f64,
    pub intra: f64,
    pub reg: f64,
    pub total: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn csv_header() -> &'static str {
        "step,itc,inter,itm,intra,reg,total,tau"
    }

    pub fn csv_line(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.itc, self.inter, self.itm, self.intra, self.reg, self.total, self.tau
        )
    }
}

/// Combine batch sums into the scalar training loss:
/// `total = sum_k w_k * part_k / B`.
pub fn total_loss<'g>(
    parts: &BatchLossVars<'g>,
    weights: &LossWeights,
    batch_size: usize,
    tau: f64,
) -> Result<(Var<'g>, LossBreakdown), TensorError> {
    let inv_b = 1.0 / batch_size as f64;
    let itc = parts.itc.mul_scalar(weights.itc * inv_b);
    let inter = parts.inter.mul_scalar(weights.inter * inv_b);
    let itm = parts.itm.mul_scalar(weights.itm * inv_b);
    let intra = parts.intra.mul_scalar(weights.intra * inv_b);
    let reg = parts.reg.mul_scalar(weights.reg * inv_b);
    let total = itc.add(inter)?.add(itm)?.add(intra)?.add(reg)?;
    let breakdown = LossBreakdown {
        itc: itc.value().item(),
        inter: inter.value().item(),
        itm: itm.value().item(),
        intra: intra.value().item(),
        reg: reg.value().item(),
        total: total.value().item(),
        tau,
    };
    for (name, v) in [
        ("itc", breakdown.itc),
        ("inter", breakdown.inter),
        ("itm", breakdown.itm),
        ("intra", breakdown.intra),
        ("reg", breakdown.reg),
    ] {
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                what: format!("{name} loss component"),
            });
        }
    }
    Ok((total, breakdown))
}
