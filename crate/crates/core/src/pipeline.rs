//! Frozen front end: resize, backbone features, exemplar kernels and the
//! correlation stack the head consumes.

use std::sync::Arc;

use crate::annotation::{resize_for_model, AnnotatedImage, BBox, Point};
use crate::checkpoint::{Checkpoint, ModelFingerprint};
use crate::correlation::{correlate, CorrelationStack, MatcherConfig};
use crate::error::{Error, Result};
use crate::features::{extract_exemplar_features, extract_image_features, Backbone, BackboneSpec};

/// An image reduced to everything the head and the losses need.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub id: String,
    pub stack: CorrelationStack,
    /// Exemplar boxes in model (resized) pixel coordinates.
    pub boxes: Vec<BBox>,
    /// Dots in model pixel coordinates.
    pub dots: Vec<Point>,
    /// `(height, width)` before resizing.
    pub original_size: (u32, u32),
}

impl PreparedImage {
    pub fn gt_count(&self) -> usize {
        self.dots.len()
    }
}

#[derive(Clone)]
pub struct CountingPipeline {
    backbone: Arc<dyn Backbone>,
    spec: BackboneSpec,
    matcher: MatcherConfig,
    resize_height: u32,
}

impl std::fmt::Debug for CountingPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CountingPipeline")
            .field("backbone", &self.backbone.id())
            .field("matcher", &self.matcher)
            .field("resize_height", &self.resize_height)
            .finish()
    }
}

impl CountingPipeline {
    pub fn new(spec: BackboneSpec, matcher: MatcherConfig, resize_height: u32) -> Result<Self> {
        let backbone = spec.build()?;
        Self::with_backbone(backbone, spec, matcher, resize_height)
    }

    /// Uses an already constructed backbone (shared between pipelines).
    pub fn with_backbone(
        backbone: Arc<dyn Backbone>,
        spec: BackboneSpec,
        matcher: MatcherConfig,
        resize_height: u32,
    ) -> Result<Self> {
        if matcher.blocks.is_empty() || matcher.scales.is_empty() {
            return Err(Error::Config("matcher needs at least one block and one scale".into()));
        }
        if let Some(s) = matcher.scales.iter().find(|s| !s.is_finite() || **s <= 0.0) {
            return Err(Error::Config(format!("exemplar scale {s} must be positive")));
        }
        Ok(Self {
            backbone,
            spec,
            matcher,
            resize_height,
        })
    }

    /// Rebuilds the configuration a checkpoint was trained with and verifies
    /// the backbone is the same one.
    pub fn for_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let fp = &ckpt.fingerprint;
        let pipeline = Self::new(fp.backbone.clone(), fp.matcher.clone(), fp.resize_height)?;
        ckpt.ensure_compatible(&pipeline.fingerprint())?;
        Ok(pipeline)
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn matcher(&self) -> &MatcherConfig {
        &self.matcher
    }

    pub fn resize_height(&self) -> u32 {
        self.resize_height
    }

    /// Same backbone, different matcher.
    pub fn with_matcher(&self, matcher: MatcherConfig) -> Result<Self> {
        Self::with_backbone(self.backbone.clone(), self.spec.clone(), matcher, self.resize_height)
    }

    pub fn fingerprint(&self) -> ModelFingerprint {
        ModelFingerprint::new(
            self.spec.clone(),
            self.backbone.id(),
            self.matcher.clone(),
            self.resize_height,
        )
    }

    /// Resize, extract features and correlate with the image's exemplars.
    pub fn prepare(&self, image: &AnnotatedImage) -> Result<PreparedImage> {
        let resized = resize_for_model(image, self.resize_height)?;
        let pyramid = extract_image_features(self.backbone.as_ref(), &resized.pixels)?;
        let kernels = extract_exemplar_features(&pyramid, &resized.exemplars, &self.matcher.scales)?;
        let stack = correlate(&pyramid, &kernels, &self.matcher)?;
        Ok(PreparedImage {
            id: image.id.clone(),
            stack,
            boxes: resized.exemplars,
            dots: resized.dots,
            original_size: (image.height(), image.width()),
        })
    }
}
