//! Image datasets: on-disk layout, preprocessing, synthetic scenes and batching.
//!
//! A dataset root looks like
//!
//! ```text
//! root/meta.json
//! root/images/{id}.png | {id}.tif
//! root/labels/{id}.png        single channel, integer class ids
//! ```
//!
//! Training code only ever sees [`Image`]; labels live in [`AnnotatedImage`]
//! and are consumed by the evaluator.

pub(crate) mod batching;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage, RgbaImage};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use batching::{make_batches, pair_marginals, seeded_pairing, BatchMode, ChannelStats, ImageBatch};
pub use synthetic::{generate_synthetic, ShapeKind, ShapeSpec, SyntheticDataset, SyntheticSceneConfig};

/// Label value excluded from every metric unless `meta.json` says otherwise.
pub const DEFAULT_IGNORE: u16 = 255;

const META_FILE: &str = "meta.json";
const IMAGE_DIR: &str = "images";
const LABEL_DIR: &str = "labels";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Stored images must already be `height x width`.
    #[default]
    Exact,
    /// Larger images are center-cropped; smaller ones are rejected.
    CenterCrop,
}

/// Expected geometry of every image in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    #[serde(default)]
    pub fit: FitMode,
}

impl ImageSpec {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            fit: FitMode::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "image spec dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if !matches!(self.channels, 1 | 3 | 4) {
            return Err(Error::Config(format!(
                "unsupported channel count {} (expected 1, 3 or 4)",
                self.channels
            )));
        }
        Ok(())
    }
}

/// An unlabeled image, channels-first, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub pixels: Array3<f32>,
}

impl Image {
    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// An image together with its per-pixel annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image: Image,
    pub labels: Array2<u16>,
}

impl AnnotatedImage {
    pub fn new(image: Image, labels: Array2<u16>) -> Result<Self> {
        if labels.dim() != (image.height(), image.width()) {
            return Err(Error::Shape(format!(
                "labels {:?} do not match image {}x{} for '{}'",
                labels.dim(),
                image.height(),
                image.width(),
                image.id
            )));
        }
        Ok(Self { image, labels })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Number of annotated classes K'.
    pub num_classes: usize,
    pub class_names: Vec<String>,
    #[serde(default = "default_ignore")]
    pub ignore_value: u16,
    pub channels: usize,
    /// When absent every image belongs to both splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<SplitIds>,
}

fn default_ignore() -> u16 {
    DEFAULT_IGNORE
}

impl DatasetMeta {
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::schema(
                path,
                format!(
                    "{} class names for {} classes",
                    self.class_names.len(),
                    self.num_classes
                ),
            ));
        }
        if (self.ignore_value as usize) < self.num_classes {
            return Err(Error::schema(
                path,
                format!(
                    "ignore value {} collides with a class id (K'={})",
                    self.ignore_value, self.num_classes
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub items: Vec<AnnotatedImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Label-free view used for training.
    pub fn images(&self) -> Vec<Image> {
        self.items.iter().map(|item| item.image.clone()).collect()
    }

    /// Content hash over ids, pixel values and labels, in dataset order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.meta).unwrap_or_default());
        for item in &self.items {
            hasher.update(item.id().as_bytes());
            for v in item.image.pixels.iter() {
                hasher.update(v.to_le_bytes());
            }
            for v in item.labels.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_digest(hasher)
    }

    /// Fraction of non-ignored pixels carrying each annotated class.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0u64; self.meta.num_classes];
        for item in &self.items {
            for &l in item.labels.iter() {
                if let Some(c) = counts.get_mut(l as usize) {
                    *c += 1;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

/// Content hash over ids and pixel values only.
pub fn fingerprint_images(images: &[Image]) -> String {
    let mut hasher = Sha256::new();
    for im in images {
        hasher.update(im.id.as_bytes());
        hasher.update((im.pixels.dim().0 as u64).to_le_bytes());
        for v in im.pixels.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_digest(hasher)
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let path = root.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::schema(&path, e.to_string()))?;
    meta.validate(&path)?;
    Ok(meta)
}

/// Image files under `root/images`, keyed by id and sorted.
fn list_images(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let dir = root.join(IMAGE_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::load(&path, "non-utf8 file name"))?
            .to_string();
        found.push((id, path));
    }
    found.sort();
    for pair in found.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::load(&pair[1].1, format!("duplicate image id '{}'", pair[0].0)));
        }
    }
    Ok(found)
}

fn is_empty_dir(root: &Path) -> Result<bool> {
    if !root.exists() {
        return Ok(false);
    }
    Ok(fs::read_dir(root)?.next().is_none())
}

/// Image files of one split; every file when the dataset declares no splits.
fn split_files(root: &Path, meta: &DatasetMeta, split: Split) -> Result<Vec<(String, PathBuf)>> {
    let mut files = list_images(root)?;
    if let Some(splits) = &meta.splits {
        let wanted: BTreeSet<&str> = match split {
            Split::Train => splits.train.iter().map(String::as_str).collect(),
            Split::Eval => splits.eval.iter().map(String::as_str).collect(),
        };
        let available: BTreeSet<&str> = files.iter().map(|(id, _)| id.as_str()).collect();
        if let Some(missing) = wanted.iter().find(|id| !available.contains(*id)) {
            return Err(Error::load(
                root.join(IMAGE_DIR).join(missing),
                "listed in meta.json splits but no image file exists",
            ));
        }
        files.retain(|(id, _)| wanted.contains(id.as_str()));
    }
    Ok(files)
}

/// Loads one split without touching its annotations, for training.
pub fn load_split_images(root: &Path, spec: &ImageSpec, split: Split) -> Result<Vec<Image>> {
    spec.validate()?;
    if is_empty_dir(root)? {
        return Ok(Vec::new());
    }
    let meta = read_meta(root)?;
    if meta.channels != spec.channels {
        return Err(Error::schema(
            root.join(META_FILE),
            format!("dataset has {} channels, spec expects {}", meta.channels, spec.channels),
        ));
    }
    split_files(root, &meta, split)?
        .into_iter()
        .map(|(id, path)| {
            Ok(Image {
                id,
                pixels: read_pixels(&path, spec)?,
            })
        })
        .collect()
}

/// Loads one split of a dataset in deterministic id order.
///
/// An empty root directory yields an empty dataset.
pub fn load_dataset(root: &Path, spec: &ImageSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if is_empty_dir(root)? {
        return Ok(Dataset {
            meta: DatasetMeta {
                num_classes: 0,
                class_names: Vec::new(),
                ignore_value: DEFAULT_IGNORE,
                channels: spec.channels,
                splits: None,
            },
            items: Vec::new(),
        });
    }
    let meta = read_meta(root)?;
    if meta.channels != spec.channels {
        return Err(Error::schema(
            root.join(META_FILE),
            format!("dataset has {} channels, spec expects {}", meta.channels, spec.channels),
        ));
    }

    let files = split_files(root, &meta, split)?;

    let mut items = Vec::with_capacity(files.len());
    for (id, image_path) in files {
        let label_path = root.join(LABEL_DIR).join(format!("{id}.png"));
        let pixels = read_pixels(&image_path, spec)?;
        let labels = read_labels(&label_path, spec, &meta)?;
        if labels.dim() != (pixels.dim().1, pixels.dim().2) {
            return Err(Error::load(&label_path, "label map size differs from image size"));
        }
        items.push(AnnotatedImage {
            image: Image { id, pixels },
            labels,
        });
    }
    Ok(Dataset { meta, items })
}

/// Loads every image under `dir` (flat directory, no labels), sorted by id.
pub fn load_images(dir: &Path, spec: &ImageSpec) -> Result<Vec<Image>> {
    spec.validate()?;
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::load(dir, e.to_string()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            files.push((id, path));
        }
    }
    files.sort();
    files
        .into_iter()
        .map(|(id, path)| {
            Ok(Image {
                id,
                pixels: read_pixels(&path, spec)?,
            })
        })
        .collect()
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::ImageReader::open(path)
        .map_err(|e| Error::load(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| Error::load(path, e.to_string()))?
        .decode()
        .map_err(|e| Error::load(path, e.to_string()))
}

/// Top-left corner of the window that `spec` keeps from a `h x w` source.
fn crop_origin(path: &Path, spec: &ImageSpec, h: usize, w: usize) -> Result<(usize, usize)> {
    match spec.fit {
        FitMode::Exact if (h, w) == (spec.height, spec.width) => Ok((0, 0)),
        FitMode::Exact => Err(Error::load(
            path,
            format!("size {h}x{w} differs from expected {}x{}", spec.height, spec.width),
        )),
        FitMode::CenterCrop if h >= spec.height && w >= spec.width => Ok(((h - spec.height) / 2, (w - spec.width) / 2)),
        FitMode::CenterCrop => Err(Error::load(
            path,
            format!("size {h}x{w} is smaller than {}x{}", spec.height, spec.width),
        )),
    }
}

fn read_pixels(path: &Path, spec: &ImageSpec) -> Result<Array3<f32>> {
    let img = decode(path)?;
    let stored = img.color().channel_count() as usize;
    if stored != spec.channels {
        return Err(Error::load(
            path,
            format!("has {stored} channels, expected {}", spec.channels),
        ));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    // Converting to f32 scales every integer depth to [0, 1].
    let raw: Vec<f32> = match spec.channels {
        1 => img.to_luma32f().into_raw(),
        3 => img.to_rgb32f().into_raw(),
        4 => img.to_rgba32f().into_raw(),
        c => return Err(Error::load(path, format!("unsupported channel count {c}"))),
    };
    let hwc = Array3::from_shape_vec((h, w, spec.channels), raw).map_err(|e| Error::load(path, e.to_string()))?;
    let (y0, x0) = crop_origin(path, spec, h, w)?;
    let window = hwc.slice(s![y0..y0 + spec.height, x0..x0 + spec.width, ..]);
    Ok(window.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
}

fn read_labels(path: &Path, spec: &ImageSpec, meta: &DatasetMeta) -> Result<Array2<u16>> {
    if !path.exists() {
        return Err(Error::load(path, "label file is missing"));
    }
    let (w, h, raw): (usize, usize, Vec<u16>) = match decode(path)? {
        DynamicImage::ImageLuma8(buf) => (
            buf.width() as usize,
            buf.height() as usize,
            buf.into_raw().into_iter().map(u16::from).collect(),
        ),
        DynamicImage::ImageLuma16(buf) => (buf.width() as usize, buf.height() as usize, buf.into_raw()),
        other => {
            return Err(Error::load(
                path,
                format!("labels must be single-channel integers, found {:?}", other.color()),
            ))
        }
    };
    let full = Array2::from_shape_vec((h, w), raw).map_err(|e| Error::load(path, e.to_string()))?;
    let (y0, x0) = crop_origin(path, spec, h, w)?;
    let labels = full.slice(s![y0..y0 + spec.height, x0..x0 + spec.width]).to_owned();
    if let Some(&bad) = labels
        .iter()
        .find(|&&v| v != meta.ignore_value && v as usize >= meta.num_classes)
    {
        return Err(Error::schema(
            path,
            format!("label value {bad} outside 0..{}", meta.num_classes),
        ));
    }
    Ok(labels)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an image in the channel layout matching its channel count.
pub fn write_image(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    let hwc: Vec<u8> = pixels
        .view()
        .permuted_axes([1, 2, 0])
        .iter()
        .map(|&v| quantize(v))
        .collect();
    let (w32, h32) = (w as u32, h as u32);
    let shape_err = || Error::Shape(format!("cannot encode {c}x{h}x{w} image"));
    match c {
        1 => GrayImage::from_raw(w32, h32, hwc).ok_or_else(shape_err)?.save(path)?,
        3 => RgbImage::from_raw(w32, h32, hwc).ok_or_else(shape_err)?.save(path)?,
        4 => RgbaImage::from_raw(w32, h32, hwc).ok_or_else(shape_err)?.save(path)?,
        _ => return Err(shape_err()),
    }
    Ok(())
}

/// Writes a label map as 8-bit grayscale when it fits, 16-bit otherwise.
pub fn write_labels(path: &Path, labels: &Array2<u16>) -> Result<()> {
    let (h, w) = labels.dim();
    let raw: Vec<u16> = labels.iter().copied().collect();
    if raw.iter().all(|&v| v <= u8::MAX as u16) {
        let bytes = raw.into_iter().map(|v| v as u8).collect();
        GrayImage::from_raw(w as u32, h as u32, bytes)
            .ok_or_else(|| Error::Shape("label buffer".into()))?
            .save(path)?;
    } else {
        ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::Shape("label buffer".into()))?
            .save(path)?;
    }
    Ok(())
}

/// Materializes a dataset in the standard directory layout.
pub fn save_dataset(root: &Path, meta: &DatasetMeta, items: &[AnnotatedImage]) -> Result<()> {
    meta.validate(&root.join(META_FILE))?;
    fs::create_dir_all(root.join(IMAGE_DIR))?;
    fs::create_dir_all(root.join(LABEL_DIR))?;
    for item in items {
        if item.image.channels() != meta.channels {
            return Err(Error::Shape(format!(
                "image '{}' has {} channels, meta says {}",
                item.id(),
                item.image.channels(),
                meta.channels
            )));
        }
        write_image(
            &root.join(IMAGE_DIR).join(format!("{}.png", item.id())),
            &item.image.pixels,
        )?;
        write_labels(&root.join(LABEL_DIR).join(format!("{}.png", item.id())), &item.labels)?;
    }
    fs::write(root.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}
