//! Static PNG charts: loss curves and confusion heatmaps.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use infoseg::evaluator::ConfusionMatrix;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const LINE: Rgb<u8> = Rgb([0, 90, 200]);

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let x = x0 + (x1 - x0) * s / steps;
        let y = y0 + (y1 - y0) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Loss against step, min-max scaled into the plot area. Non-finite values are skipped.
pub fn loss_curve(losses: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let margin = 20i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    line(&mut img, (margin, margin), (margin, margin + h), AXIS);
    line(&mut img, (margin, margin + h), (margin + w, margin + h), AXIS);
    let finite: Vec<(usize, f64)> = losses
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .collect();
    if finite.is_empty() {
        return img;
    }
    let lo = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let hi = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let last = (losses.len().max(2) - 1) as f64;
    let to_px = |(i, v): (usize, f64)| {
        let x = margin + (i as f64 / last * w as f64).round() as i64;
        let y = margin + h - ((v - lo) / span * h as f64).round() as i64;
        (x, y)
    };
    for pair in finite.windows(2) {
        line(&mut img, to_px(pair[0]), to_px(pair[1]), LINE);
    }
    img
}

/// Row-normalized confusion heatmap, one `cell`-pixel square per entry.
pub fn confusion_heatmap(cm: &ConfusionMatrix, cell: u32) -> RgbImage {
    let (rows, cols) = (cm.num_pred() as u32, cm.num_true() as u32);
    let mut img = RgbImage::from_pixel(cols.max(1) * cell, rows.max(1) * cell, WHITE);
    for p in 0..rows {
        let total = cm.row_sum(p as usize).max(1) as f64;
        for t in 0..cols {
            let frac = cm.get(p as usize, t as usize) as f64 / total;
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let color = Rgb([shade, shade, 255]);
            for y in p * cell..(p + 1) * cell {
                for x in t * cell..(t + 1) * cell {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_curve_draws_on_canvas() {
        let img = loss_curve(&[3.0, 2.0, f64::NAN, 1.0], 120, 80);
        assert_eq!(img.dimensions(), (120, 80));
        assert!(img.pixels().any(|p| *p == LINE));
        assert!(!loss_curve(&[], 50, 50).pixels().any(|p| *p == LINE));
    }

    #[test]
    fn heatmap_darkens_dominant_cells() {
        let cm = ConfusionMatrix::from_counts(vec![vec![10, 0], vec![0, 3]]).unwrap();
        let img = confusion_heatmap(&cm, 4);
        assert_eq!(img.dimensions(), (8, 8));
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 255]);
        assert_eq!(img.get_pixel(5, 0).0, [255, 255, 255]);
    }
}
