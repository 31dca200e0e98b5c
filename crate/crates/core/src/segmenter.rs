//! Segmentation step: dot-product class scores, temperature softmax, argmax
//! labels and nearest-neighbour upsampling to input resolution.

use candle_core::{DType, Tensor, D};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::network::{GlobalFeatureSet, LocalFeatureMap};

/// Temperature used throughout unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.8;

/// `scores[b, i*V + j, k] = <L[b, :, i, j], H[b, k, :]>`.
#[derive(Debug, Clone)]
pub struct ClassScores {
    values: Tensor,
    grid: (usize, usize),
}

impl ClassScores {
    pub fn new(values: Tensor, grid: (usize, usize)) -> Result<Self> {
        let (_, n, _) = values.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!("{n} positions do not form a {grid:?} grid")));
        }
        Ok(Self { values, grid })
    }

    /// `(B, U*V, K)`
    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

/// Per-position class distribution `(B, U*V, K)`.
#[derive(Debug, Clone)]
pub struct ClassProbVolume {
    probs: Tensor,
    grid: (usize, usize),
    temperature: f64,
}

impl ClassProbVolume {
    /// Wraps precomputed probabilities; the last axis must be normalized.
    pub fn from_probs(probs: Tensor, grid: (usize, usize), temperature: f64) -> Result<Self> {
        let (_, n, _) = probs.dims3()?;
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!("{n} positions do not form a {grid:?} grid")));
        }
        Ok(Self {
            probs,
            grid,
            temperature,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// (B, U*V, K)
    pub fn dims(&self) -> (usize, usize, usize) {
        self.probs.dims3().expect("rank checked at construction")
    }

    /// Row-major copy of the probabilities.
    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.probs.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    }
}

pub fn class_scores(local: &LocalFeatureMap, global: &GlobalFeatureSet) -> Result<ClassScores> {
    let (b, p, u, v) = local.dims();
    let (gb, _, gp) = global.dims();
    if b != gb || p != gp {
        return Err(Error::Shape(format!(
            "local features (B={b}, P={p}) and global features (B={gb}, P={gp}) disagree"
        )));
    }
    let scores = local
        .positions()?
        .matmul(&global.tensor().transpose(1, 2)?.contiguous()?)?;
    ClassScores::new(scores, (u, v))
}

/// Temperature-scaled softmax over classes, stabilized by max subtraction.
pub fn prob_volume(scores: &ClassScores, temperature: f64) -> Result<ClassProbVolume> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let values = scores.tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite class score {bad}")));
    }
    let scaled = (scores.tensor() * temperature)?;
    // The shift cancels in the ratio, so it needs no gradient.
    let shift = scaled.max_keepdim(D::Minus1)?.detach();
    let exp = scaled.broadcast_sub(&shift)?.exp()?;
    let probs = exp.broadcast_div(&exp.sum_keepdim(D::Minus1)?)?;
    ClassProbVolume::from_probs(probs, scores.grid(), temperature)
}

/// Index of the largest entry of each length-`k` row; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<u16> {
    values
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect()
}

/// Low-resolution label map per batch element.
pub fn argmax_segmentation(volume: &ClassProbVolume) -> Result<Vec<Array2<u16>>> {
    let (b, n, k) = volume.dims();
    let labels = argmax_rows(&volume.to_vec()?, k);
    let (u, v) = volume.grid();
    labels
        .chunks(n)
        .take(b)
        .map(|chunk| Array2::from_shape_vec((u, v), chunk.to_vec()).map_err(|e| Error::Shape(e.to_string())))
        .collect()
}

/// Nearest-neighbour upsampling: each cell becomes a `factor x factor` block.
pub fn upsample(low_res: &Array2<u16>, factor: usize) -> Array2<u16> {
    let (u, v) = low_res.dim();
    Array2::from_shape_fn((u * factor, v * factor), |(y, x)| low_res[[y / factor, x / factor]])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub low_res: Array2<u16>,
    pub full_res: Array2<u16>,
}

/// Argmax segmentation at both grid and input resolution.
pub fn segment(volume: &ClassProbVolume, factor: usize) -> Result<Vec<SegmentationMap>> {
    Ok(argmax_segmentation(volume)?
        .into_iter()
        .map(|low_res| SegmentationMap {
            full_res: upsample(&low_res, factor),
            low_res,
        })
        .collect())
}
