//! Central finite-difference oracle for auditing reverse-mode gradients.
//!
//! The oracle never touches the tape's backward pass: it re-evaluates the
//! forward function at perturbed inputs, so agreement between the two is
//! evidence of correctness rather than self-consistency.

use super::graph::{value_and_grad, Graph, Var};
use super::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error per coordinate.
    pub rel_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            rel_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Function value at the unperturbed inputs.
    pub value: f64,
    /// Worst relative error over all checked coordinates.
    pub max_rel_err: f64,
    /// (input index, flat coordinate) where the worst error occurred.
    pub worst: Option<(usize, usize)>,
    /// Coordinates compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_err <= cfg.rel_tolerance
    }
}

/// |a - b| scaled by max(|a|, |b|, 1): relative for large gradients,
/// absolute for small ones, so finite-difference noise near zero does not
/// produce spurious failures.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Evaluate the scalar builder at fixed inputs without a backward pass.
pub fn eval_scalar<F>(inputs: &[Tensor], builder: F) -> Result<f64, TensorError>
where
    F: for<'g> FnOnce(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let root = builder(&g, &vars)?;
    let v = root.value();
    if v.numel() != 1 {
        return Err(TensorError::NotScalar {
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Central difference (f(x+eps) - f(x-eps)) / (2 eps), one coordinate at a
/// time, for every input regardless of its `requires_grad` flag.
pub fn finite_diff_grad<F>(
    inputs: &[Tensor],
    builder: F,
    eps: f64,
) -> Result<Vec<Tensor>, TensorError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    assert!(eps > 0.0, "finite_diff_grad requires eps > 0");
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec())?;
        for j in 0..n {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&work, &builder)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&work, &builder)?;
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compare reverse-mode gradients against the finite-difference oracle for
/// every coordinate of every input with `requires_grad` set.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    builder: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let (value, analytic) = value_and_grad(inputs, &builder)?;
    let mut report = GradCheckReport {
        value,
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        if !inputs[i].requires_grad {
            continue;
        }
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + cfg.eps;
            let plus = eval_scalar(&work, &builder)?;
            work[i].data_mut()[j] = orig - cfg.eps;
            let minus = eval_scalar(&work, &builder)?;
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * cfg.eps);
            let err = rel_err(analytic[i].data()[j], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
