//! Procedural scenes of textured shapes on a textured background.
//!
//! Every class is drawn from several color pools, so no single color is constant
//! within a class; a class's pools share a hue neighborhood. Each region also gets
//! a random texture, a nuisance shared by all classes.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, DatasetMeta, Image, DEFAULT_IGNORE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneConfig {
    /// Class 0 is the background; shapes carry classes `1..num_classes`.
    pub num_classes: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Half-width of the uniform per-pixel noise added to every channel.
    pub texture_jitter: f32,
    pub color_pools_per_class: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            shapes_per_image: (2, 4),
            texture_jitter: 0.08,
            color_pools_per_class: 2,
            seed: 0,
            height: 32,
            width: 32,
            channels: 3,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shapes_per_image;
        if lo > hi {
            return Err(Error::Config(format!("shapes_per_image range {lo}..={hi} is empty")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.color_pools_per_class < 2 {
            return Err(Error::Config("each class needs at least two color pools".into()));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("synthetic images must be at least 4x4".into()));
        }
        if !matches!(self.channels, 1 | 3 | 4) {
            return Err(Error::Config(format!("unsupported channel count {}", self.channels)));
        }
        if !(0.0..=0.5).contains(&self.texture_jitter) {
            return Err(Error::Config("texture_jitter must lie in [0, 0.5]".into()));
        }
        Ok(())
    }

    fn pool_count(&self) -> usize {
        self.num_classes * self.color_pools_per_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rect,
}

/// Geometry and appearance of one rendered shape, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class: u16,
    pub pool: usize,
    /// 0 flat, 1 stripes, 2 checkerboard.
    pub texture: u8,
    /// (row, column) of the center.
    pub center: (f32, f32),
    /// Radius for discs; (row, column) half extents for rectangles.
    pub half_extent: (f32, f32),
}

impl ShapeSpec {
    /// Whether the center of pixel `(y, x)` lies inside the shape.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f32 + 0.5 - self.center.0;
        let dx = x as f32 + 0.5 - self.center.1;
        match self.kind {
            ShapeKind::Disc => dy * dy + dx * dx <= self.half_extent.0 * self.half_extent.0,
            ShapeKind::Rect => dy.abs() <= self.half_extent.0 && dx.abs() <= self.half_extent.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub meta: DatasetMeta,
    pub items: Vec<AnnotatedImage>,
    /// Shapes of each image in painting order.
    pub layouts: Vec<Vec<ShapeSpec>>,
    /// Fraction of all pixels carrying each class.
    pub class_frequencies: Vec<f64>,
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base color of one pool.
struct Pool {
    color: [f32; 4],
}

fn palette(config: &SyntheticSceneConfig) -> Vec<Pool> {
    let k = config.num_classes as f32;
    let per_class = config.color_pools_per_class;
    (0..config.pool_count())
        .map(|idx| {
            let (class, pool) = (idx / per_class, idx % per_class);
            // Pools of one class spread over +-0.05 of the hue circle around the
            // class center; class centers are 1/K apart.
            let spread = pool as f32 / (per_class - 1) as f32 - 0.5;
            let hue = (class as f32 + 0.5) / k + 0.1 * spread;
            // Brightness and IR alternate with (class + pool) so that no pool
            // index shares a look across classes.
            let parity = (class + pool) % 2;
            let value = if parity == 0 { 0.85 } else { 0.75 };
            let [r, g, b] = hsv_to_rgb(hue.rem_euclid(1.0), 0.75, value);
            Pool {
                color: [r, g, b, 0.3 + 0.4 * parity as f32],
            }
        })
        .collect()
}

fn texture_offset(texture: u8, y: usize, x: usize) -> f32 {
    match texture {
        1 => {
            if (y / 2).is_multiple_of(2) {
                0.1
            } else {
                -0.1
            }
        }
        2 => {
            if ((y / 2) + (x / 2)).is_multiple_of(2) {
                0.1
            } else {
                -0.1
            }
        }
        _ => 0.0,
    }
}

fn sample_shape(config: &SyntheticSceneConfig, class_pools: &[usize], rng: &mut ChaCha8Rng) -> ShapeSpec {
    let (h, w) = (config.height as f32, config.width as f32);
    let scale = h.min(w);
    let class = rng.random_range(1..config.num_classes) as u16;
    let pool = class_pools[class as usize];
    let kind = if rng.random_bool(0.5) {
        ShapeKind::Disc
    } else {
        ShapeKind::Rect
    };
    let center = (
        rng.random_range(0.15 * h..0.85 * h),
        rng.random_range(0.15 * w..0.85 * w),
    );
    let a = rng.random_range(0.2..0.35) * scale;
    let b = match kind {
        ShapeKind::Disc => a,
        ShapeKind::Rect => rng.random_range(0.2..0.35) * scale,
    };
    ShapeSpec {
        kind,
        class,
        pool,
        texture: rng.random_range(0..3),
        center,
        half_extent: (a, b),
    }
}

fn render(config: &SyntheticSceneConfig, pools: &[Pool], index: usize) -> (Array3<f32>, Array2<u16>, Vec<ShapeSpec>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let (h, w, c) = (config.height, config.width, config.channels);
    // One pool per class per image: a class keeps its look within a scene and
    // varies between scenes.
    let class_pools: Vec<usize> = (0..config.num_classes)
        .map(|_| rng.random_range(0..config.color_pools_per_class))
        .collect();
    let background_pool = class_pools[0];
    let background_texture: u8 = rng.random_range(0..3);
    let n_shapes = if config.num_classes > 1 {
        rng.random_range(config.shapes_per_image.0..=config.shapes_per_image.1)
    } else {
        0
    };
    let shapes: Vec<ShapeSpec> = (0..n_shapes)
        .map(|_| sample_shape(config, &class_pools, &mut rng))
        .collect();

    let mut labels = Array2::<u16>::zeros((h, w));
    let mut pool_map = Array2::<(usize, u8)>::from_elem((h, w), (background_pool, background_texture));
    for shape in &shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    labels[[y, x]] = shape.class;
                    let pool = shape.class as usize * config.color_pools_per_class + shape.pool;
                    pool_map[[y, x]] = (pool, shape.texture);
                }
            }
        }
    }

    let mut pixels = Array3::<f32>::zeros((c, h, w));
    let jitter = config.texture_jitter;
    for y in 0..h {
        for x in 0..w {
            let (pool, texture) = pool_map[[y, x]];
            let pool = &pools[pool];
            let tex = texture_offset(texture, y, x);
            let channel_values: Vec<f32> = match c {
                1 => vec![(pool.color[0] + pool.color[1] + pool.color[2]) / 3.0],
                3 => pool.color[..3].to_vec(),
                _ => pool.color.to_vec(),
            };
            for (ch, base) in channel_values.into_iter().enumerate() {
                let noise = if jitter > 0.0 {
                    rng.random_range(-jitter..=jitter)
                } else {
                    0.0
                };
                let v = (base + tex + noise).clamp(0.0, 1.0);
                // Stay on the 8-bit grid so images survive a PNG round trip unchanged.
                pixels[[ch, y, x]] = (v * 255.0).round() / 255.0;
            }
        }
    }
    (pixels, labels, shapes)
}

/// Renders `n` scenes. Output is a pure function of `(config, n)`.
pub fn generate_synthetic(config: &SyntheticSceneConfig, n: usize) -> Result<SyntheticDataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    let pools = palette(config);
    let width = n.to_string().len().max(5);
    let mut items = Vec::with_capacity(n);
    let mut layouts = Vec::with_capacity(n);
    let mut counts = vec![0u64; config.num_classes];
    for index in 0..n {
        let (pixels, labels, shapes) = render(config, &pools, index);
        for &l in labels.iter() {
            counts[l as usize] += 1;
        }
        items.push(AnnotatedImage {
            image: Image {
                id: format!("synth_{index:0width$}"),
                pixels,
            },
            labels,
        });
        layouts.push(shapes);
    }
    let total: u64 = counts.iter().sum();
    let class_frequencies = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let class_names = (0..config.num_classes)
        .map(|k| {
            if k == 0 {
                "background".to_string()
            } else {
                format!("shape_{k}")
            }
        })
        .collect();
    Ok(SyntheticDataset {
        meta: DatasetMeta {
            num_classes: config.num_classes,
            class_names,
            ignore_value: DEFAULT_IGNORE,
            channels: config.channels,
            splits: None,
        },
        items,
        layouts,
        class_frequencies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(k: usize, seed: u64) -> SyntheticSceneConfig {
        SyntheticSceneConfig {
            num_classes: k,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic(&config(3, 7), 1).unwrap();
        let b = generate_synthetic(&config(3, 7), 1).unwrap();
        assert_eq!(a.items, b.items);
        let c = generate_synthetic(&config(3, 8), 1).unwrap();
        assert_ne!(a.items[0].image.pixels, c.items[0].image.pixels);
    }

    #[test]
    fn zero_shapes_means_background_only() {
        let cfg = SyntheticSceneConfig {
            shapes_per_image: (0, 0),
            ..config(2, 1)
        };
        let ds = generate_synthetic(&cfg, 4).unwrap();
        assert!(ds.items.iter().all(|it| it.labels.iter().all(|&l| l == 0)));
        assert_eq!(ds.class_frequencies, vec![1.0, 0.0]);
    }

    #[test]
    fn empty_range_is_config_error() {
        let cfg = SyntheticSceneConfig {
            shapes_per_image: (3, 1),
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg, 1), Err(Error::Config(_))));
        let single_pool = SyntheticSceneConfig {
            color_pools_per_class: 1,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&single_pool, 1), Err(Error::Config(_))));
    }

    #[test]
    fn class_pools_have_distinct_colors() {
        let cfg = config(3, 0);
        let pools = palette(&cfg);
        for class in 0..3 {
            let a = pools[class * 2].color;
            let b = pools[class * 2 + 1].color;
            let dist: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            assert!(dist > 0.3, "class {class} pools too similar");
        }
    }

    #[test]
    fn default_scenes_are_not_dominated_by_one_class() {
        let ds = generate_synthetic(&config(3, 0), 1000).unwrap();
        for (k, f) in ds.class_frequencies.iter().enumerate() {
            assert!((0.10..=0.60).contains(f), "class {k} covers {f:.3} of all pixels");
        }
    }

    // Independent rasterizer in f64: recompute every label from the returned layout.
    // Pixels within 1e-3 of a shape boundary are rounding-ambiguous and skipped.
    #[test]
    fn labels_match_analytic_masks() {
        let cfg = SyntheticSceneConfig {
            shapes_per_image: (2, 5),
            ..config(4, 11)
        };
        let ds = generate_synthetic(&cfg, 20).unwrap();
        let mut checked = 0usize;
        for (item, shapes) in ds.items.iter().zip(&ds.layouts) {
            for ((y, x), &label) in item.labels.indexed_iter() {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut expected = 0u16;
                let mut ambiguous = false;
                for s in shapes {
                    let (dy, dx) = (py - s.center.0 as f64, px - s.center.1 as f64);
                    let (a, b) = (s.half_extent.0 as f64, s.half_extent.1 as f64);
                    let margin = match s.kind {
                        ShapeKind::Disc => a - dy.hypot(dx),
                        ShapeKind::Rect => (a - dy.abs()).min(b - dx.abs()),
                    };
                    ambiguous |= margin.abs() < 1e-3;
                    if margin >= 0.0 {
                        expected = s.class;
                    }
                }
                if !ambiguous {
                    assert_eq!(label, expected, "pixel ({y},{x}) of {}", item.id());
                    checked += 1;
                }
            }
        }
        assert!(checked > 20 * 32 * 32 * 99 / 100);
    }
}
