//! Variational MI lower bounds with a dot-product critic.
//!
//! Both bounds take critic scores on joint pairs (same image) and on marginal
//! pairs (deranged images):
//!
//! * JSD: `mean(-sp(-t_joint)) - mean(sp(t_marginal))`, `sp(x) = ln(1 + e^x)`
//! * DV:  `mean(t_joint) - ln(mean(exp(t_marginal)))`

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    Jsd,
    Dv,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Jsd => "JSD",
            EstimatorKind::Dv => "DV",
        })
    }
}

/// Terms of one MI estimate. The optimizer minimizes `total = -(joint_term - marginal_term)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiLossReport {
    pub total: f64,
    pub joint_term: f64,
    pub marginal_term: f64,
    /// The MI estimate averaged over all positions and images.
    pub per_position_mean: f64,
}

impl MiLossReport {
    pub fn from_terms(joint_term: f64, marginal_term: f64) -> Self {
        let estimate = joint_term - marginal_term;
        Self {
            total: -estimate,
            joint_term,
            marginal_term,
            per_position_mean: estimate,
        }
    }

    pub fn estimate(&self) -> f64 {
        self.per_position_mean
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_scores(joint: &[f64], marginal: &[f64]) -> Result<()> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::Config(
            "MI estimate needs at least one joint and one marginal score".into(),
        ));
    }
    if joint.iter().chain(marginal).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite critic score".into()));
    }
    Ok(())
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

pub fn jsd_mi(joint: &[f64], marginal: &[f64]) -> Result<MiLossReport> {
    check_scores(joint, marginal)?;
    let joint_term = mean(joint.iter().map(|&t| -softplus(-t)));
    let marginal_term = mean(marginal.iter().map(|&t| softplus(t)));
    Ok(MiLossReport::from_terms(joint_term, marginal_term))
}

pub fn dv_mi(joint: &[f64], marginal: &[f64]) -> Result<MiLossReport> {
    check_scores(joint, marginal)?;
    let joint_term = mean(joint.iter().copied());
    let shift = marginal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = marginal.iter().map(|&t| (t - shift).exp()).sum();
    let marginal_term = shift + sum.ln() - (marginal.len() as f64).ln();
    Ok(MiLossReport::from_terms(joint_term, marginal_term))
}

pub fn estimate(kind: EstimatorKind, joint: &[f64], marginal: &[f64]) -> Result<MiLossReport> {
    match kind {
        EstimatorKind::Jsd => jsd_mi(joint, marginal),
        EstimatorKind::Dv => dv_mi(joint, marginal),
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Differentiable softplus: `m + ln(e^-m + e^(x-m))` with `m = max(x, 0)` held constant.
pub(crate) fn softplus_tensor(x: &Tensor) -> Result<Tensor> {
    let m = x.relu()?.detach();
    let inner = (m.neg()?.exp()? + x.sub(&m)?.exp()?)?;
    Ok((m + inner.log()?)?)
}

/// Differentiable estimate over flat score tensors.
///
/// Returns the estimate (to be maximized) and its terms.
pub fn estimate_tensor(kind: EstimatorKind, joint: &Tensor, marginal: &Tensor) -> Result<(Tensor, MiLossReport)> {
    if joint.elem_count() == 0 || marginal.elem_count() == 0 {
        return Err(Error::Config(
            "MI estimate needs at least one joint and one marginal score".into(),
        ));
    }
    let joint = joint.flatten_all()?;
    let marginal = marginal.flatten_all()?;
    let (joint_term, marginal_term) = match kind {
        EstimatorKind::Jsd => (
            softplus_tensor(&joint.neg()?)?.neg()?.mean_all()?,
            softplus_tensor(&marginal)?.mean_all()?,
        ),
        EstimatorKind::Dv => {
            let shift = marginal.max_all()?.detach();
            let lse = (marginal.broadcast_sub(&shift)?.exp()?.sum_all()?.log()? + shift)?;
            (joint.mean_all()?, (lse - (marginal.elem_count() as f64).ln())?)
        }
    };
    // Non-finite terms are reported, not rejected; the caller owns the diagnostics.
    let report = MiLossReport::from_terms(scalar(&joint_term)?, scalar(&marginal_term)?);
    Ok(((joint_term - marginal_term)?, report))
}
