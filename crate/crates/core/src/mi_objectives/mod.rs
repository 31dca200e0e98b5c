//! Mutual-information maximization step: global-feature assignment per local
//! feature, critic scores on joint and marginal pairs, and the estimators.

mod estimators;
pub mod iic;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{GlobalFeatureSet, LocalFeatureMap};
use crate::segmenter::{argmax_segmentation, ClassProbVolume};

pub use estimators::{dv_mi, estimate, estimate_tensor, jsd_mi, softplus, EstimatorKind, MiLossReport};
pub use iic::{iic_mi_loss, IicReport, PairTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// Probability-weighted mixture of all global features.
    #[default]
    Soft,
    /// The global feature of the argmax class; no gradient through the argmax.
    Hard,
}

impl std::fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AssignmentMode::Soft => "soft",
            AssignmentMode::Hard => "hard",
        })
    }
}

/// `S[b, n] = sum_k V[b, n, k] * H[b, k]`, shape `(B, U*V, P)`.
pub fn soft_assign(volume: &ClassProbVolume, global: &GlobalFeatureSet) -> Result<Tensor> {
    let (b, _, k) = volume.dims();
    let (gb, gk, _) = global.dims();
    if (b, k) != (gb, gk) {
        return Err(Error::Shape(format!(
            "volume (B={b}, K={k}) does not match global features (B={gb}, K={gk})"
        )));
    }
    Ok(volume.tensor().matmul(global.tensor())?)
}

/// `S[b, n] = H[b, label(b, n)]`, shape `(B, U*V, P)`.
pub fn hard_assign(labels: &[Array2<u16>], global: &GlobalFeatureSet) -> Result<Tensor> {
    let (b, k, _) = global.dims();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} label maps for a batch of {b}", labels.len())));
    }
    let n = labels.first().map_or(0, |m| m.len());
    let mut one_hot = vec![0f64; b * n * k];
    for (bi, map) in labels.iter().enumerate() {
        if map.len() != n {
            return Err(Error::Shape("label maps differ in size".into()));
        }
        for (pos, &label) in map.iter().enumerate() {
            if label as usize >= k {
                return Err(Error::Shape(format!("label {label} outside 0..{k}")));
            }
            one_hot[(bi * n + pos) * k + label as usize] = 1.0;
        }
    }
    let selector = Tensor::from_vec(one_hot, (b, n, k), &Device::Cpu)?.to_dtype(global.tensor().dtype())?;
    Ok(selector.matmul(global.tensor())?)
}

pub fn validate_pairing(pairing: &[usize], batch: usize) -> Result<()> {
    if batch < 2 {
        return Err(Error::Config(format!("a batch of {batch} has no marginal pairs")));
    }
    if pairing.len() != batch {
        return Err(Error::Config(format!(
            "pairing covers {} images, batch has {batch}",
            pairing.len()
        )));
    }
    let mut seen = vec![false; batch];
    for (i, &j) in pairing.iter().enumerate() {
        if j >= batch || seen[j] || i == j {
            return Err(Error::Config(format!(
                "pairing {pairing:?} is not a fixed-point-free permutation"
            )));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Critic scores `<L[b, n], S[b, n]>` and `<L[b, n], S[pairing[b], n]>`, each `(B, U*V)`.
pub fn critic_scores(local: &LocalFeatureMap, assigned: &Tensor, pairing: &[usize]) -> Result<(Tensor, Tensor)> {
    let positions = local.positions()?;
    if positions.dims() != assigned.dims() {
        return Err(Error::Shape(format!(
            "local features {:?} vs assignments {:?}",
            positions.dims(),
            assigned.dims()
        )));
    }
    validate_pairing(pairing, positions.dim(0)?)?;
    let index = Tensor::from_vec(
        pairing.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        pairing.len(),
        &Device::Cpu,
    )?;
    let joint = (&positions * assigned)?.sum(2)?;
    let marginal = (&positions * assigned.index_select(&index, 0)?)?.sum(2)?;
    Ok((joint, marginal))
}

/// Output of one MI maximization step.
#[derive(Debug, Clone)]
pub struct MiStep {
    /// Scalar to minimize: the negated estimate.
    pub loss: Tensor,
    pub report: MiLossReport,
    pub joint_scores: Tensor,
    pub marginal_scores: Tensor,
}

/// Negated MI estimate between every local feature and its assigned global
/// feature, averaged over all positions and images of the batch.
pub fn mi_step_loss(
    local: &LocalFeatureMap,
    volume: &ClassProbVolume,
    global: &GlobalFeatureSet,
    pairing: &[usize],
    mode: AssignmentMode,
    kind: EstimatorKind,
) -> Result<MiStep> {
    validate_pairing(pairing, local.dims().0)?;
    let assigned = match mode {
        AssignmentMode::Soft => soft_assign(volume, global)?,
        AssignmentMode::Hard => hard_assign(&argmax_segmentation(volume)?, global)?,
    };
    let (joint, marginal) = critic_scores(local, &assigned, pairing)?;
    let (estimate, report) = estimate_tensor(kind, &joint, &marginal)?;
    Ok(MiStep {
        loss: estimate.neg()?,
        report,
        joint_scores: joint,
        marginal_scores: marginal,
    })
}

/// min / max / mean of a score tensor, for diagnostics.
pub fn score_summary(scores: &Tensor) -> Result<(f64, f64, f64)> {
    let v = scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((min, max, mean))
}
