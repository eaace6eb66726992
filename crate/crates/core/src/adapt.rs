//! Per-image test-time adaptation of the density head.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedImage, BBox};
use crate::correlation::CorrelationStack;
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::head::DensityHeadParams;
use crate::losses::{adaptation_loss_grad, AdaptationConfig};
use crate::pipeline::{CountingPipeline, PreparedImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrace {
    /// Objective before each step, plus the final value.
    pub losses: Vec<f64>,
    /// Predicted count at the same points.
    pub counts: Vec<f64>,
    /// Seconds spent in the loop.
    pub wall_time: f64,
    /// Set when a non-finite value appeared or the final loss exceeds the
    /// initial one.
    pub diverged: bool,
}

impl AdaptationTrace {
    pub fn steps_taken(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }

    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace is never empty")
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub count: f64,
    pub density: DensityMap,
    pub trace: AdaptationTrace,
}

/// Gradient descent on a private copy of `params`, minimizing the
/// adaptation objective on `boxes`. The stack is reused for every step.
pub fn adapt_stack(
    stack: &CorrelationStack,
    boxes: &[BBox],
    params: &DensityHeadParams,
    cfg: &AdaptationConfig,
) -> Result<Prediction> {
    adapt_stack_cancellable(stack, boxes, params, cfg, &AtomicBool::new(false))
}

/// [`adapt_stack`] that gives up with [`Error::Cancelled`] once `cancel` is
/// set. The flag is checked before every step.
pub fn adapt_stack_cancellable(
    stack: &CorrelationStack,
    boxes: &[BBox],
    params: &DensityHeadParams,
    cfg: &AdaptationConfig,
    cancel: &AtomicBool,
) -> Result<Prediction> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = params.clone();
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let mut counts = Vec::with_capacity(cfg.steps + 1);
    let mut density: Option<DensityMap> = None;
    let mut diverged = false;
    for step in 0..=cfg.steps {
        if cancel.load(Ordering::Relaxed) {
            return Err(Error::Cancelled);
        }
        let fwd = params.forward(stack)?;
        let count = fwd.density.count();
        let (loss, grad) = adaptation_loss_grad(&fwd.density, boxes, cfg)?;
        if !loss.total.is_finite() || !count.is_finite() {
            log::warn!("adaptation produced a non-finite value at step {step}, keeping previous state");
            diverged = true;
            break;
        }
        losses.push(loss.total);
        counts.push(count);
        if step == cfg.steps {
            density = Some(fwd.density);
            break;
        }
        let grads = params.backward(&fwd, &grad);
        params.sgd_step(&grads, cfg.learning_rate as f32);
        density = Some(fwd.density);
    }
    let Some(density) = density else {
        return Err(Error::Argument("density head produces non-finite output".into()));
    };
    if losses.last() > losses.first() {
        diverged = true;
    }
    Ok(Prediction {
        count: *counts.last().expect("at least one step recorded"),
        density,
        trace: AdaptationTrace {
            losses,
            counts,
            wall_time: start.elapsed().as_secs_f64(),
            diverged,
        },
    })
}

pub fn adapt_prepared(prepared: &PreparedImage, params: &DensityHeadParams, cfg: &AdaptationConfig) -> Result<Prediction> {
    adapt_stack(&prepared.stack, &prepared.boxes, params, cfg)
}

/// Counts `image` after adapting a copy of `params` to its exemplars. The
/// caller's parameters are never modified.
pub fn adapt_and_count(
    pipeline: &CountingPipeline,
    image: &AnnotatedImage,
    params: &DensityHeadParams,
    cfg: &AdaptationConfig,
) -> Result<Prediction> {
    adapt_prepared(&pipeline.prepare(image)?, params, cfg)
}

/// Single forward pass, no adaptation.
pub fn predict_no_adapt(pipeline: &CountingPipeline, image: &AnnotatedImage, params: &DensityHeadParams) -> Result<(f64, DensityMap)> {
    let prepared = pipeline.prepare(image)?;
    let density = params.predict(&prepared.stack)?;
    Ok((density.count(), density))
}
