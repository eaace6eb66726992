//! Frozen multi-scale image features and ROI-cropped exemplar kernels.
//!
//! Any [`Backbone`] that yields stride-8 and stride-16 feature grids can be
//! plugged in. Two are provided: a ResNet-50 trunk (stem plus the first three
//! residual stages) that loads torchvision-layout weights, and a small seeded
//! convolutional backbone for desk-scale runs without pretrained weights.

mod lite;
mod resnet;

pub use lite::LiteBackbone;
pub use resnet::ResNet50Trunk;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::annotation::BBox;
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;

/// Exemplar scale factors applied to every kernel.
pub const DEFAULT_SCALES: [f64; 3] = [0.9, 1.0, 1.1];

pub const MIN_IMAGE_SIDE: usize = 32;

/// Per-channel RGB normalization of ImageNet-pretrained backbones.
const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Backbone stage whose output feeds the matcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    /// Stride 8.
    #[serde(rename = "3")]
    Three,
    /// Stride 16.
    #[serde(rename = "4")]
    Four,
}

impl Block {
    pub const ALL: [Block; 2] = [Block::Three, Block::Four];

    pub fn stride(&self) -> usize {
        match self {
            Block::Three => 8,
            Block::Four => 16,
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Block::Three => 3,
            Block::Four => 4,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}", self.id())
    }
}

/// Frozen feature extractor. Implementations must not mutate parameters.
pub trait Backbone: Send + Sync {
    /// Identifier recorded in checkpoint fingerprints.
    fn id(&self) -> String;

    /// Feature grids at strides 8 and 16 for a normalized `(3, H, W)` image.
    fn forward(&self, image: ArrayView3<f32>) -> (Array3<f32>, Array3<f32>);

    /// Digest of all parameters.
    fn checksum(&self) -> String;
}

/// How to construct a backbone; serializable so tools can rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    Lite { seed: u64 },
    Resnet50 { weights: Option<PathBuf>, seed: u64 },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::Lite { seed: 0 }
    }
}

impl BackboneSpec {
    pub fn build(&self) -> Result<Arc<dyn Backbone>> {
        Ok(match self {
            BackboneSpec::Lite { seed } => Arc::new(LiteBackbone::new(*seed)),
            BackboneSpec::Resnet50 {
                weights: Some(path),
                ..
            } => Arc::new(ResNet50Trunk::from_safetensors(path)?),
            BackboneSpec::Resnet50 { weights: None, seed } => {
                Arc::new(ResNet50Trunk::random(*seed))
            }
        })
    }
}

impl FromStr for BackboneSpec {
    type Err = Error;

    /// `lite`, `lite:SEED`, `resnet50:PATH` or `resnet50-random:SEED`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let seed = |a: &str| -> Result<u64> {
            if a.is_empty() {
                Ok(0)
            } else {
                a.parse()
                    .map_err(|_| Error::Argument(format!("bad backbone seed `{a}`")))
            }
        };
        match kind {
            "lite" => Ok(BackboneSpec::Lite { seed: seed(arg)? }),
            "resnet50" if !arg.is_empty() => Ok(BackboneSpec::Resnet50 {
                weights: Some(PathBuf::from(arg)),
                seed: 0,
            }),
            "resnet50-random" => Ok(BackboneSpec::Resnet50 {
                weights: None,
                seed: seed(arg)?,
            }),
            _ => Err(Error::Argument(format!(
                "unknown backbone `{s}` (expected lite[:SEED], resnet50:WEIGHTS or resnet50-random[:SEED])"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureLevel {
    pub block: Block,
    pub stride: usize,
    /// `(C, h, w)`
    pub features: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub image_height: usize,
    pub image_width: usize,
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn level(&self, block: Block) -> &FeatureLevel {
        self.levels
            .iter()
            .find(|l| l.block == block)
            .expect("pyramid holds every block")
    }

    /// Copy with every feature multiplied by `alpha`.
    pub fn scaled(&self, alpha: f32) -> Self {
        let mut out = self.clone();
        for l in &mut out.levels {
            l.features.mapv_inplace(|v| v * alpha);
        }
        out
    }
}

/// `(3, H, W)` float image normalized with the backbone pixel statistics.
pub fn normalize_image(pixels: &RgbImage) -> Array3<f32> {
    let (w, h) = pixels.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in pixels.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (p[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    out
}

pub fn extract_image_features(backbone: &dyn Backbone, pixels: &RgbImage) -> Result<FeaturePyramid> {
    let (w, h) = (pixels.width() as usize, pixels.height() as usize);
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
        });
    }
    let (f3, f4) = backbone.forward(normalize_image(pixels).view());
    let levels = vec![(Block::Three, f3), (Block::Four, f4)]
        .into_iter()
        .map(|(block, features)| {
            let stride = block.stride();
            let expected = (h.div_ceil(stride), w.div_ceil(stride));
            let (_, fh, fw) = features.dim();
            if (fh, fw) != expected {
                return Err(Error::Shape(format!(
                    "{block} features {fh}x{fw}, expected {}x{}",
                    expected.0, expected.1
                )));
            }
            Ok(FeatureLevel {
                block,
                stride,
                features,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid {
        image_height: h,
        image_width: w,
        levels,
    })
}

#[derive(Debug, Clone)]
pub struct ExemplarKernel {
    pub exemplar: usize,
    pub block: Block,
    pub scale: f64,
    /// `(C, kh, kw)`
    pub kernel: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct ExemplarKernelSet {
    pub exemplars: usize,
    pub kernels: Vec<ExemplarKernel>,
}

impl ExemplarKernelSet {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn get(&self, exemplar: usize, block: Block, scale: f64) -> Option<&ExemplarKernel> {
        self.kernels
            .iter()
            .find(|k| k.exemplar == exemplar && k.block == block && k.scale == scale)
    }

    /// Kernels for one (block, scale) pair in exemplar order.
    pub fn select(&self, block: Block, scale: f64) -> impl Iterator<Item = &ExemplarKernel> {
        self.kernels
            .iter()
            .filter(move |k| k.block == block && k.scale == scale)
    }
}

/// Feature-cell range `[lo, hi)` covering `[a, b]` pixels, rounded outward,
/// clamped to `[0, n]` and at least one cell wide.
fn cell_range(a: f64, b: f64, stride: usize, n: usize) -> (usize, usize) {
    let s = stride as f64;
    let lo = ((a / s).floor().max(0.0) as usize).min(n - 1);
    let hi = ((b / s).ceil().max(0.0) as usize).min(n);
    if hi <= lo {
        (lo, lo + 1)
    } else {
        (lo, hi)
    }
}

fn scaled_len(len: usize, factor: f64) -> usize {
    ((len as f64 * factor).round() as usize).max(1)
}

/// Stride-aligned crops of every box on every pyramid level, rescaled by each
/// factor in `scales` (factor 1.0 keeps the crop untouched).
pub fn extract_exemplar_features(
    pyr: &FeaturePyramid,
    boxes: &[BBox],
    scales: &[f64],
) -> Result<ExemplarKernelSet> {
    if boxes.is_empty() || boxes.len() > 3 {
        return Err(Error::Argument(format!(
            "expected 1 to 3 exemplar boxes, got {}",
            boxes.len()
        )));
    }
    let (img_w, img_h) = (pyr.image_width as f64, pyr.image_height as f64);
    let mut kernels = Vec::with_capacity(boxes.len() * pyr.levels.len() * scales.len());
    for (i, b) in boxes.iter().enumerate() {
        if !b.is_ordered() || !b.within(img_w, img_h) {
            return Err(Error::OutOfBounds(format!(
                "exemplar {i} {b} outside {}x{} image",
                pyr.image_height, pyr.image_width
            )));
        }
        for level in &pyr.levels {
            let (_, fh, fw) = level.features.dim();
            let (r0, r1) = cell_range(b.y1, b.y2, level.stride, fh);
            let (c0, c1) = cell_range(b.x1, b.x2, level.stride, fw);
            let crop = level.features.slice(s![.., r0..r1, c0..c1]);
            for &scale in scales {
                let kernel = if scale == 1.0 {
                    crop.to_owned()
                } else {
                    bilinear_resize(crop, scaled_len(r1 - r0, scale), scaled_len(c1 - c0, scale))
                };
                kernels.push(ExemplarKernel {
                    exemplar: i,
                    block: level.block,
                    scale,
                    kernel,
                });
            }
        }
    }
    Ok(ExemplarKernelSet {
        exemplars: boxes.len(),
        kernels,
    })
}
