use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Seeded shuffle; the trailing short batch is dropped.
    Train,
    /// Dataset order; the trailing short batch is kept.
    Eval,
}

/// Stacked images `(B, C, M, N)`. Carries no annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub ids: Vec<String>,
    pub pixels: Array4<f32>,
}

impl ImageBatch {
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("cannot build an empty batch".into()))?;
        let dim = first.pixels.dim();
        if let Some(bad) = images.iter().find(|im| im.pixels.dim() != dim) {
            return Err(Error::Shape(format!(
                "image '{}' is {:?}, batch expects {:?}",
                bad.id,
                bad.pixels.dim(),
                dim
            )));
        }
        let views: Vec<_> = images.iter().map(|im| im.pixels.view()).collect();
        let pixels = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            ids: images.iter().map(|im| im.id.clone()).collect(),
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Index groups for one pass over `n` items.
pub(crate) fn batch_indices(
    n: usize,
    batch_size: usize,
    shuffle_seed: u64,
    mode: BatchMode,
) -> Result<Vec<Vec<usize>>> {
    match mode {
        BatchMode::Train if batch_size < 2 => {
            return Err(Error::Config(format!(
                "training batches need at least 2 images for marginal pairs, got {batch_size}"
            )))
        }
        BatchMode::Eval if batch_size == 0 => return Err(Error::Config("batch size must be positive".into())),
        _ => {}
    }
    let mut order: Vec<usize> = (0..n).collect();
    if mode == BatchMode::Train {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    }
    Ok(order
        .chunks(batch_size)
        .filter(|chunk| mode == BatchMode::Eval || chunk.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// One epoch of batches over `data`.
pub fn make_batches(
    data: &[Image],
    batch_size: usize,
    shuffle_seed: u64,
    mode: BatchMode,
) -> Result<impl Iterator<Item = Result<ImageBatch>> + '_> {
    let groups = batch_indices(data.len(), batch_size, shuffle_seed, mode)?;
    Ok(groups.into_iter().map(move |group| {
        let refs: Vec<&Image> = group.iter().map(|&i| &data[i]).collect();
        ImageBatch::from_images(&refs)
    }))
}

/// Draws a uniformly random fixed-point-free permutation of `0..batch_size`.
///
/// Position `i` is paired with image `pairing[i]` to form a marginal sample.
pub fn pair_marginals<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "marginal pairing needs at least 2 images, got {batch_size}"
        )));
    }
    let mut perm: Vec<usize> = (0..batch_size).collect();
    // Rejection sampling; about e draws on average.
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

pub fn seeded_pairing(batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    pair_marginals(batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-channel mean and standard deviation of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn compute(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("cannot compute statistics of an empty dataset".into()))?;
        let c = first.channels();
        let mut sum = vec![0f64; c];
        let mut sum_sq = vec![0f64; c];
        let mut count = 0u64;
        for im in images {
            if im.channels() != c {
                return Err(Error::Shape(format!(
                    "image '{}' has {} channels",
                    im.id,
                    im.channels()
                )));
            }
            for (ch, plane) in im.pixels.axis_iter(Axis(0)).enumerate() {
                for &v in plane.iter() {
                    sum[ch] += v as f64;
                    sum_sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += (im.height() * im.width()) as u64;
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0).sqrt()).max(1e-6) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn standardize(&self, pixels: &Array4<f32>) -> Result<Array4<f32>> {
        let c = pixels.dim().1;
        if c != self.mean.len() {
            return Err(Error::Shape(format!(
                "batch has {c} channels, statistics cover {}",
                self.mean.len()
            )));
        }
        let mut out = pixels.clone();
        for (ch, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}
