//! Dataset model: dot-annotated images with exemplar boxes, category-disjoint
//! splits, on-disk format and the geometric preprocessing shared by training
//! and inference.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! annotations.json   {"<id>": {"dots": [[x,y],..], "exemplars": [[x1,y1,x2,y2],..], "category": ".."}}
//! splits.json        {"train": [ids], "val": [ids], "test": [ids]}
//! images/<id>.png    (or .jpg / .jpeg)
//! ```

pub mod fsc147;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest height accepted by [`resize_for_model`].
pub const MIN_TARGET_HEIGHT: u32 = 64;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Dot annotation in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Axis-aligned box from `(x1, y1)` to `(x2, y2)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// `x1 < x2` and `y1 < y2`, all coordinates finite.
    pub fn is_ordered(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// An image with its dot annotations and exemplar boxes.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub id: String,
    pub pixels: RgbImage,
    pub dots: Vec<Point>,
    pub exemplars: Vec<BBox>,
    pub category: String,
}

impl AnnotatedImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// Ground-truth count.
    pub fn count(&self) -> usize {
        self.dots.len()
    }

    /// Copy restricted to the first `n` exemplars (annotation order).
    pub fn with_first_exemplars(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.exemplars.truncate(n);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub image_ids: Vec<String>,
    pub categories: BTreeSet<String>,
}

/// Annotation record as stored in `annotations.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub dots: Vec<Point>,
    pub exemplars: Vec<BBox>,
    pub category: String,
}

/// Lazy handle to one dataset image: annotations are in memory, pixels are
/// decoded on [`ImageRecord::load`].
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub annotation: AnnotationRecord,
}

impl ImageRecord {
    pub fn load(&self) -> Result<AnnotatedImage> {
        let pixels = image::open(&self.path)
            .map_err(|e| Error::load(&self.path, e))?
            .to_rgb8();
        Ok(AnnotatedImage {
            id: self.id.clone(),
            pixels,
            dots: self.annotation.dots.clone(),
            exemplars: self.annotation.exemplars.clone(),
            category: self.annotation.category.clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: BTreeMap<String, ImageRecord>,
    pub splits: Vec<DatasetSplit>,
    /// Non-fatal findings, e.g. exemplar boxes that contain no dot.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> Option<&DatasetSplit> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn record(&self, id: &str) -> Option<&ImageRecord> {
        self.records.get(id)
    }

    /// Records of a split in split order.
    pub fn split_records(&self, name: SplitName) -> Vec<&ImageRecord> {
        self.split(name)
            .map(|s| s.image_ids.iter().filter_map(|id| self.records.get(id)).collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct SplitsFile {
    #[serde(default)]
    train: Vec<String>,
    #[serde(default)]
    val: Vec<String>,
    #[serde(default)]
    test: Vec<String>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e))
}

fn find_image_file(images_dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| images_dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Validates one record against image dimensions. Returns warnings.
pub fn validate_record(
    id: &str,
    record: &AnnotationRecord,
    width: u32,
    height: u32,
) -> Result<Vec<String>> {
    let (w, h) = (width as f64, height as f64);
    for (i, p) in record.dots.iter().enumerate() {
        if !(p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h)
        {
            return Err(Error::validation(
                id,
                format!("dots[{i}]"),
                format!("({}, {}) outside {width}x{height} image", p.x, p.y),
            ));
        }
    }
    if record.exemplars.is_empty() || record.exemplars.len() > 3 {
        return Err(Error::validation(
            id,
            "exemplars",
            format!("expected 1 to 3 boxes, found {}", record.exemplars.len()),
        ));
    }
    if record.dots.len() < record.exemplars.len() {
        return Err(Error::validation(
            id,
            "dots",
            format!(
                "{} dots but {} exemplars",
                record.dots.len(),
                record.exemplars.len()
            ),
        ));
    }
    let mut warnings = Vec::new();
    for (i, b) in record.exemplars.iter().enumerate() {
        if !b.is_ordered() {
            return Err(Error::validation(
                id,
                format!("exemplars[{i}]"),
                format!("box {b} must satisfy x1 < x2 and y1 < y2"),
            ));
        }
        if !b.within(w, h) {
            return Err(Error::validation(
                id,
                format!("exemplars[{i}]"),
                format!("box {b} outside {width}x{height} image"),
            ));
        }
        if !record.dots.iter().any(|p| b.contains(p)) {
            warnings.push(format!("image `{id}`: exemplar {i} {b} contains no dot"));
        }
    }
    Ok(warnings)
}

fn build_splits(
    splits_file: SplitsFile,
    records: &BTreeMap<String, ImageRecord>,
) -> Result<Vec<DatasetSplit>> {
    let mut seen: BTreeMap<String, SplitName> = BTreeMap::new();
    let mut splits = Vec::with_capacity(3);
    for (name, ids) in [
        (SplitName::Train, splits_file.train),
        (SplitName::Val, splits_file.val),
        (SplitName::Test, splits_file.test),
    ] {
        let mut categories = BTreeSet::new();
        for id in &ids {
            let record = records.get(id).ok_or_else(|| {
                Error::Integrity(format!("split `{name}` references unknown image `{id}`"))
            })?;
            if let Some(prev) = seen.insert(id.clone(), name) {
                return Err(Error::Integrity(format!(
                    "image `{id}` appears in both `{prev}` and `{name}`"
                )));
            }
            categories.insert(record.annotation.category.clone());
        }
        splits.push(DatasetSplit {
            name,
            image_ids: ids,
            categories,
        });
    }
    check_disjoint(&splits)?;
    Ok(splits)
}

/// Fails when two splits share an object category.
pub fn check_disjoint(splits: &[DatasetSplit]) -> Result<()> {
    for (i, a) in splits.iter().enumerate() {
        for b in &splits[i + 1..] {
            let shared: Vec<&str> = a
                .categories
                .intersection(&b.categories)
                .map(String::as_str)
                .collect();
            if !shared.is_empty() {
                return Err(Error::Integrity(format!(
                    "splits `{}` and `{}` share categories: {}",
                    a.name,
                    b.name,
                    shared.join(", ")
                )));
            }
        }
    }
    Ok(())
}

/// Loads a dataset root. Pixels are not decoded; image headers are read to
/// validate annotations against the image size.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let ann_path = root.join("annotations.json");
    let splits_path = root.join("splits.json");
    let images_dir = root.join("images");
    if !ann_path.is_file() {
        return Err(Error::load(&ann_path, "file not found"));
    }
    if !splits_path.is_file() {
        return Err(Error::load(&splits_path, "file not found"));
    }
    if !images_dir.is_dir() {
        return Err(Error::load(&images_dir, "directory not found"));
    }
    let annotations: BTreeMap<String, AnnotationRecord> = read_json(&ann_path)?;
    let splits_file: SplitsFile = read_json(&splits_path)?;

    let mut records = BTreeMap::new();
    let mut warnings = Vec::new();
    for (id, annotation) in annotations {
        let path = find_image_file(&images_dir, &id)
            .ok_or_else(|| Error::load(images_dir.join(format!("{id}.png")), "image file not found"))?;
        let (width, height) = image::image_dimensions(&path).map_err(|e| Error::load(&path, e))?;
        warnings.extend(validate_record(&id, &annotation, width, height)?);
        records.insert(
            id.clone(),
            ImageRecord {
                id,
                path,
                width,
                height,
                annotation,
            },
        );
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let splits = build_splits(splits_file, &records)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
        splits,
        warnings,
    })
}

/// Writes images and annotation files in the canonical layout. Images are
/// stored as PNG.
pub fn write_dataset(
    root: impl AsRef<Path>,
    images: &[AnnotatedImage],
    splits: &[(SplitName, Vec<String>)],
) -> Result<()> {
    let root = root.as_ref();
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut annotations = BTreeMap::new();
    for img in images {
        img.pixels.save(images_dir.join(format!("{}.png", img.id)))?;
        annotations.insert(
            img.id.clone(),
            AnnotationRecord {
                dots: img.dots.clone(),
                exemplars: img.exemplars.clone(),
                category: img.category.clone(),
            },
        );
    }
    write_annotation_files(root, &annotations, splits)
}

pub fn write_annotation_files(
    root: &Path,
    annotations: &BTreeMap<String, AnnotationRecord>,
    splits: &[(SplitName, Vec<String>)],
) -> Result<()> {
    let mut splits_file = SplitsFile::default();
    for (name, ids) in splits {
        match name {
            SplitName::Train => splits_file.train = ids.clone(),
            SplitName::Val => splits_file.val = ids.clone(),
            SplitName::Test => splits_file.test = ids.clone(),
        }
    }
    fs::write(
        root.join("annotations.json"),
        serde_json::to_string_pretty(annotations)?,
    )?;
    fs::write(
        root.join("splits.json"),
        serde_json::to_string_pretty(&splits_file)?,
    )?;
    Ok(())
}

/// Width for an aspect-preserving resize to `target_height`, rounded to the
/// nearest multiple of 8 (minimum 8).
pub fn model_width(height: u32, width: u32, target_height: u32) -> u32 {
    let raw = width as f64 * target_height as f64 / height as f64;
    (((raw / 8.0).round() as u32) * 8).max(8)
}

/// Resizes to a fixed height, width rounded to a multiple of 8. Dots and boxes
/// are scaled with the same per-axis factors as the pixels.
pub fn resize_for_model(img: &AnnotatedImage, target_height: u32) -> Result<AnnotatedImage> {
    if target_height < MIN_TARGET_HEIGHT {
        return Err(Error::Argument(format!(
            "target height {target_height} below minimum {MIN_TARGET_HEIGHT}"
        )));
    }
    let (w, h) = (img.width(), img.height());
    let new_w = model_width(h, w, target_height);
    let new_h = target_height;
    if (new_w, new_h) == (w, h) {
        return Ok(img.clone());
    }
    let sx = new_w as f64 / w as f64;
    let sy = new_h as f64 / h as f64;
    let mut exemplars = Vec::with_capacity(img.exemplars.len());
    for (index, b) in img.exemplars.iter().enumerate() {
        let s = b.scaled(sx, sy);
        if s.width() < 1.0 || s.height() < 1.0 {
            return Err(Error::DegenerateExemplar {
                index,
                bbox: s.to_string(),
            });
        }
        exemplars.push(s);
    }
    Ok(AnnotatedImage {
        id: img.id.clone(),
        pixels: image::imageops::resize(&img.pixels, new_w, new_h, FilterType::Triangle),
        dots: img
            .dots
            .iter()
            .map(|p| Point::new(p.x * sx, p.y * sy))
            .collect(),
        exemplars,
        category: img.category.clone(),
    })
}
