//! Segmentation artifacts: indexed PNGs, class-name sidecars and color overlays.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::{write_labels, Image};
use crate::error::{Error, Result};

/// Index-to-name table written next to exported segmentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSidecar {
    /// Predicted index → annotated class name; `None` for unmatched predictions.
    pub classes: BTreeMap<u16, Option<String>>,
}

impl ClassSidecar {
    pub fn new(mapping: &[Option<usize>], class_names: &[String]) -> Self {
        let classes = mapping
            .iter()
            .enumerate()
            .map(|(k, m)| (k as u16, m.and_then(|t| class_names.get(t).cloned())))
            .collect();
        Self { classes }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Single-channel PNG whose pixel values are predicted class indices.
pub fn write_index_png(path: &Path, segmentation: &Array2<u16>) -> Result<()> {
    write_labels(path, segmentation)
}

/// A fixed, well-separated color per class index.
pub fn class_color(k: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 10] = [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [145, 30, 180],
        [70, 240, 240],
        [245, 130, 48],
        [240, 50, 230],
        [128, 128, 0],
        [0, 0, 128],
    ];
    let c = BASE[k % BASE.len()];
    // Darken on each wrap so indices past the table stay distinguishable.
    let shade = 1.0 / (1 + k / BASE.len()) as f32;
    c.map(|v| (v as f32 * shade) as u8)
}

/// Blends class colors over the image; `alpha` is the color weight.
pub fn overlay(image: &Image, segmentation: &Array2<u16>, alpha: f32) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    if segmentation.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "segmentation {:?} does not cover image {h}x{w}",
            segmentation.dim()
        )));
    }
    let c = image.channels();
    let alpha = alpha.clamp(0.0, 1.0);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base: [f32; 3] = match c {
            1 | 2 => [image.pixels[[0, y, x]]; 3],
            _ => [
                image.pixels[[0, y, x]],
                image.pixels[[1, y, x]],
                image.pixels[[2, y, x]],
            ],
        };
        let color = class_color(segmentation[[y, x]] as usize);
        Rgb(std::array::from_fn(|i| {
            let v = (1.0 - alpha) * base[i].clamp(0.0, 1.0) * 255.0 + alpha * color[i] as f32;
            v.round() as u8
        }))
    }))
}

pub fn write_overlay(path: &Path, image: &Image, segmentation: &Array2<u16>, alpha: f32) -> Result<()> {
    overlay(image, segmentation, alpha)?.save(path)?;
    Ok(())
}
