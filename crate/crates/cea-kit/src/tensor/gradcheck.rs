//! Central finite-difference oracle for the tape gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::Tensor;
use crate::error::{CeaError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (parameter name, max relative error over probed elements)
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compare tape gradients of the scalar `f()` against central finite
/// differences (f(x+eps) - f(x-eps)) / (2 eps) for every element of every
/// parameter. `f` must rebuild its graph from the given parameter leaves on
/// each call.
pub fn grad_check<F: Fn() -> Tensor>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let probes: Vec<(usize, Vec<usize>)> = params
        .iter()
        .enumerate()
        .map(|(i, (_, p))| (i, (0..p.numel()).collect()))
        .collect();
    grad_check_probes(f, params, eps, tol, &probes)
}

/// As [`grad_check`] but probing a random fraction of elements per parameter
/// (at least one each). Used for large parameter sets.
pub fn grad_check_sampled<F: Fn() -> Tensor>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let probes: Vec<(usize, Vec<usize>)> = params
        .iter()
        .enumerate()
        .map(|(i, (_, p))| {
            let n = p.numel();
            let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.truncate(take);
            idx.sort_unstable();
            (i, idx)
        })
        .collect();
    grad_check_probes(f, params, eps, tol, &probes)
}

fn grad_check_probes<F: Fn() -> Tensor>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
    probes: &[(usize, Vec<usize>)],
) -> Result<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = f();
    if !loss.all_finite() {
        return Err(CeaError::Numeric(
            "grad_check: objective is non-finite at the given parameters".into(),
        ));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, p)| {
            p.grad()
                .ok_or_else(|| CeaError::Numeric(format!("no gradient reached parameter {name}")))
        })
        .collect::<Result<_>>()?;

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel: f64 = 0.0;
    for (pi, idxs) in probes {
        let (name, p) = &params[*pi];
        let mut worst: f64 = 0.0;
        for &i in idxs {
            p.nudge(i, eps);
            let fp = f().item();
            p.nudge(i, -2.0 * eps);
            let fm = f().item();
            p.nudge(i, eps);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(CeaError::Numeric(format!(
                    "grad_check: non-finite objective while probing {name}[{i}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[*pi][i], numeric));
        }
        max_rel = max_rel.max(worst);
        per_param.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        tol,
    })
}
