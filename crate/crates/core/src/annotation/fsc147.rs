//! Best-effort import of the public FSC-147 annotation files into the
//! canonical layout.
//!
//! Expects `annotation_FSC147_384.json` (points and 4-corner exemplar boxes
//! keyed by image file name), `Train_Test_Val_FSC_147.json` and
//! `ImageClasses_FSC147.txt`. Image ids are file stems (`"2.jpg"` becomes `"2"`).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{AnnotationRecord, BBox, Point, SplitName};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct RawRecord {
    points: Vec<[f64; 2]>,
    box_examples_coordinates: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Deserialize)]
struct RawSplits {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn corners_to_box(corners: &[[f64; 2]]) -> Option<BBox> {
    if corners.is_empty() {
        return None;
    }
    let xs = corners.iter().map(|c| c[0]);
    let ys = corners.iter().map(|c| c[1]);
    let b = BBox::new(
        xs.clone().fold(f64::INFINITY, f64::min),
        ys.clone().fold(f64::INFINITY, f64::min),
        xs.fold(f64::NEG_INFINITY, f64::max),
        ys.fold(f64::NEG_INFINITY, f64::max),
    );
    b.is_ordered().then_some(b)
}

pub struct Fsc147Import {
    pub annotations: BTreeMap<String, AnnotationRecord>,
    pub splits: Vec<(SplitName, Vec<String>)>,
}

/// Parses the three FSC-147 metadata files. Image size clamping is left to
/// [`clamp_to_image`] since the annotation file does not carry original sizes
/// reliably.
pub fn import(annotations: &Path, splits: &Path, classes: &Path) -> Result<Fsc147Import> {
    let text = fs::read_to_string(annotations).map_err(|e| Error::load(annotations, e))?;
    let raw: BTreeMap<String, RawRecord> =
        serde_json::from_str(&text).map_err(|e| Error::load(annotations, e))?;
    let text = fs::read_to_string(splits).map_err(|e| Error::load(splits, e))?;
    let raw_splits: RawSplits = serde_json::from_str(&text).map_err(|e| Error::load(splits, e))?;
    let text = fs::read_to_string(classes).map_err(|e| Error::load(classes, e))?;
    let class_of: BTreeMap<String, String> = text
        .lines()
        .filter_map(|line| {
            let (name, class) = line.split_once('\t')?;
            Some((stem(name.trim()), class.trim().to_string()))
        })
        .collect();

    let mut out = BTreeMap::new();
    for (name, record) in raw {
        let id = stem(&name);
        let category = class_of
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::validation(&id, "category", "missing from class list"))?;
        let exemplars: Vec<BBox> = record
            .box_examples_coordinates
            .iter()
            .filter_map(|c| corners_to_box(c))
            .take(3)
            .collect();
        out.insert(
            id,
            AnnotationRecord {
                dots: record.points.into_iter().map(Point::from).collect(),
                exemplars,
                category,
            },
        );
    }
    let map = |ids: Vec<String>| ids.iter().map(|n| stem(n)).collect::<Vec<_>>();
    Ok(Fsc147Import {
        annotations: out,
        splits: vec![
            (SplitName::Train, map(raw_splits.train)),
            (SplitName::Val, map(raw_splits.val)),
            (SplitName::Test, map(raw_splits.test)),
        ],
    })
}

/// Pulls dots and boxes that touch or exceed the frame back inside it.
pub fn clamp_to_image(record: &mut AnnotationRecord, width: u32, height: u32) {
    let (w, h) = (width as f64, height as f64);
    let max_x = w - 1e-3;
    let max_y = h - 1e-3;
    for p in &mut record.dots {
        p.x = p.x.clamp(0.0, max_x);
        p.y = p.y.clamp(0.0, max_y);
    }
    for b in &mut record.exemplars {
        b.x1 = b.x1.clamp(0.0, w - 1.0);
        b.y1 = b.y1.clamp(0.0, h - 1.0);
        b.x2 = b.x2.clamp(b.x1 + 1.0, w);
        b.y2 = b.y2.clamp(b.y1 + 1.0, h);
    }
}
