//! Discrete MI between class predictions of two views of the same images,
//! used as the replacement objective in the ablation grid.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::ClassProbVolume;

/// Floor applied inside logarithms of the joint table.
const EPS: f64 = f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IicReport {
    pub mutual_information: f64,
    /// H(y); zero when every prediction collapses to one class.
    pub marginal_entropy: f64,
    /// H(y | y').
    pub conditional_entropy: f64,
}

/// Symmetrized `K x K` joint distribution averaged over positions.
///
/// `p` and `q` are row-major `(n, K)` class distributions of paired positions.
pub fn joint_distribution(p: &[f64], q: &[f64], k: usize) -> Result<Vec<f64>> {
    if p.len() != q.len() || k == 0 || !p.len().is_multiple_of(k) || p.is_empty() {
        return Err(Error::Shape(format!(
            "paired distributions of length {} and {} with K={k}",
            p.len(),
            q.len()
        )));
    }
    let n = p.len() / k;
    let mut joint = vec![0f64; k * k];
    for (a, b) in p.chunks(k).zip(q.chunks(k)) {
        for i in 0..k {
            for j in 0..k {
                joint[i * k + j] += a[i] * b[j];
            }
        }
    }
    let mut sym = vec![0f64; k * k];
    for i in 0..k {
        for j in 0..k {
            sym[i * k + j] = (joint[i * k + j] + joint[j * k + i]) / (2.0 * n as f64);
        }
    }
    Ok(sym)
}

fn entropy(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// `I(y; y') = H(y) - H(y | y')` of a `K x K` joint table.
pub fn discrete_mutual_information(joint: &[f64], k: usize) -> IicReport {
    let row: Vec<f64> = (0..k).map(|i| joint[i * k..(i + 1) * k].iter().sum()).collect();
    let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| joint[i * k + j]).sum()).collect();
    let marginal_entropy = entropy(row.iter().copied());
    let conditional_entropy = entropy(joint.iter().copied()) - entropy(col.iter().copied());
    IicReport {
        mutual_information: marginal_entropy - conditional_entropy,
        marginal_entropy,
        conditional_entropy,
    }
}

/// Negated MI of the paired predictions, differentiable in both volumes.
pub fn iic_mi_loss(v: &ClassProbVolume, v_other: &ClassProbVolume) -> Result<(Tensor, IicReport)> {
    if v.dims() != v_other.dims() {
        return Err(Error::Shape(format!(
            "paired volumes differ: {:?} vs {:?}",
            v.dims(),
            v_other.dims()
        )));
    }
    let (b, n, k) = v.dims();
    let rows = b * n;
    let p = v.tensor().reshape((rows, k))?;
    let q = v_other.tensor().reshape((rows, k))?;
    let joint = (p.t()?.matmul(&q)? / rows as f64)?;
    let joint = ((&joint + joint.t()?)? * 0.5)?;
    let row = joint.sum_keepdim(1)?;
    let col = joint.sum_keepdim(0)?;
    let log_ratio = joint
        .maximum(EPS)?
        .log()?
        .broadcast_sub(&row.maximum(EPS)?.log()?)?
        .broadcast_sub(&col.maximum(EPS)?.log()?)?;
    let mi = (joint * log_ratio)?.sum_all()?;

    let table = joint_distribution(&v.to_vec()?, &v_other.to_vec()?, k)?;
    let report = discrete_mutual_information(&table, k);
    Ok((mi.neg()?, report))
}

/// Random view generator: photometric jitter plus a horizontal flip and a
/// translation by whole feature cells, both invertible on the feature grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTransform {
    pub flip: bool,
    /// Cyclic shift in feature cells (rows, columns).
    pub shift: (i32, i32),
    pub gain: Vec<f32>,
    pub offset: Vec<f32>,
}

impl PairTransform {
    pub fn identity(channels: usize) -> Self {
        Self {
            flip: false,
            shift: (0, 0),
            gain: vec![1.0; channels],
            offset: vec![0.0; channels],
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, channels: usize, max_shift: i32, jitter: f32) -> Self {
        let flip = rng.random_bool(0.5);
        let shift = (
            rng.random_range(-max_shift..=max_shift),
            rng.random_range(-max_shift..=max_shift),
        );
        let gain = (0..channels)
            .map(|_| 1.0 + rng.random_range(-jitter..=jitter))
            .collect();
        let offset = (0..channels).map(|_| rng.random_range(-jitter..=jitter)).collect();
        Self {
            flip,
            shift,
            gain,
            offset,
        }
    }

    /// Transforms a `(B, C, M, N)` batch; `cell` is the pixel size of one feature cell.
    pub fn apply(&self, x: &Tensor, cell: usize) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.gain.len() {
            return Err(Error::Shape(format!(
                "transform built for {} channels, got {c}",
                self.gain.len()
            )));
        }
        let dtype = x.dtype();
        let gain = Tensor::new(self.gain.as_slice(), x.device())?
            .to_dtype(dtype)?
            .reshape((1, c, 1, 1))?;
        let offset = Tensor::new(self.offset.as_slice(), x.device())?
            .to_dtype(dtype)?
            .reshape((1, c, 1, 1))?;
        let mut y = x.broadcast_mul(&gain)?.broadcast_add(&offset)?;
        if self.flip {
            y = y.flip(&[3])?;
        }
        let cell = cell as i32;
        Ok(y.roll(self.shift.0 * cell, 2)?.roll(self.shift.1 * cell, 3)?)
    }

    /// Maps a volume predicted on the transformed view back onto the original grid.
    pub fn align(&self, volume: &ClassProbVolume) -> Result<ClassProbVolume> {
        let (b, _, k) = volume.dims();
        let (u, v) = volume.grid();
        let mut grid = volume
            .tensor()
            .reshape((b, u, v, k))?
            .roll(-self.shift.0, 1)?
            .roll(-self.shift.1, 2)?;
        if self.flip {
            grid = grid.flip(&[2])?;
        }
        ClassProbVolume::from_probs(grid.reshape((b, u * v, k))?, (u, v), volume.temperature())
    }
}
