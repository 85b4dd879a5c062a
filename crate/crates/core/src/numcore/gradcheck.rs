//! Finite-difference gradient checking.
//!
//! Compares analytic gradients against central differences
//! `(f(θ+eps) - f(θ-eps)) / (2 eps)` per coordinate, with deterministic
//! coordinate subsampling (at least 64 coordinates per tensor, all of them
//! when a tensor is smaller). Relative error uses
//! `|a - n| / max(|a|, |n|, 1)`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckCfg {
    pub eps: f64,
    pub tol: f64,
    /// Minimum number of coordinates probed per tensor.
    pub min_coords: usize,
}

impl Default for GradCheckCfg {
    fn default() -> Self {
        GradCheckCfg {
            eps: 1e-5,
            tol: 1e-6,
            min_coords: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub tol: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }
}

/// Check the analytic gradients of `f` at `params`.
///
/// `f` maps parameter tensors to `(loss, analytic gradients)`, one gradient
/// tensor per parameter, computed by whatever reverse-mode path is under
/// test. `names` labels the parameters in the report.
pub fn gradcheck<E>(
    mut f: E,
    names: &[&str],
    params: &[Tensor<f64>],
    cfg: &GradCheckCfg,
) -> Result<GradReport>
where
    E: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    if names.len() != params.len() {
        return Err(Error::Eval("names/params length mismatch".to_string()));
    }
    let (loss0, grads) = f(params)?;
    if !loss0.is_finite() {
        return Err(Error::Eval(format!("non-finite loss {loss0}")));
    }
    if grads.len() != params.len() {
        return Err(Error::Eval("gradient count mismatch".to_string()));
    }
    let mut reports = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[pi].numel() != n {
            return Err(Error::Eval(format!(
                "gradient shape mismatch for {}",
                names[pi]
            )));
        }
        // Evenly spaced coordinates, always covering index 0 and n-1.
        let probes = n.min(cfg.min_coords.max(1));
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for j in 0..probes {
            let idx = if probes == 1 {
                0
            } else {
                j * (n - 1) / (probes - 1)
            };
            let orig = work[pi].data[idx];
            work[pi].data[idx] = orig + cfg.eps;
            let (lp, _) = f(&work)?;
            work[pi].data[idx] = orig - cfg.eps;
            let (lm, _) = f(&work)?;
            work[pi].data[idx] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Eval("non-finite perturbed loss".to_string()));
            }
            let fd = (lp - lm) / (2.0 * cfg.eps);
            let an = grads[pi].data[idx];
            let abs = (fd - an).abs();
            let rel = abs / an.abs().max(fd.abs()).max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        reports.push(ParamReport {
            name: names[pi].to_string(),
            max_rel,
            max_abs,
        });
    }
    let pass = reports.iter().all(|r| r.max_rel <= cfg.tol);
    Ok(GradReport {
        params: reports,
        tol: cfg.tol,
        pass,
    })
}
