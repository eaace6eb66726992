//! Supervised training of the density head with Adam on a pixel-wise MSE.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::annotation::AnnotatedImage;
use crate::checkpoint::{Checkpoint, CheckpointMeta, ModelFingerprint};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::head::{init_params, DensityHeadParams, HeadGrads};
use crate::losses::mse_loss_grad;
use crate::nn::{seeded_rng, Adam};
use crate::pipeline::{CountingPipeline, PreparedImage};
use crate::targets::generate_target;

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub resize_height: u32,
    /// Drives both head initialization and the epoch shuffles.
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_iterations: Option<usize>,
    /// Global gradient-norm ceiling; off by default.
    pub max_grad_norm: Option<f64>,
    pub schedule: LrSchedule,
    /// Linear ramp from zero over this many steps, then `schedule`.
    pub warmup_steps: usize,
    /// Multiplier on the freshly initialized last-layer weights. 1 keeps the
    /// plain fan-in init; small values keep an untrained head from starting
    /// with an enormous count.
    pub output_gain: f64,
    /// Output scale of a freshly initialized head (see
    /// [`DensityHeadParams::with_output_scale`]). A warm start keeps the
    /// scale stored with its parameters.
    pub output_scale: f64,
}

/// Learning-rate schedule over the planned number of optimizer steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero.
    Cosine,
}

impl LrSchedule {
    /// Rate for step `t` (0-based) out of `total`.
    pub fn rate(&self, base: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Argument(format!("unknown schedule `{s}` (expected constant or cosine)"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 1,
            epochs: 1500,
            patience: Some(100),
            resize_height: 384,
            seed: 0,
            checkpoint_dir: None,
            max_iterations: None,
            max_grad_norm: None,
            schedule: LrSchedule::Constant,
            warmup_steps: 0,
            output_gain: 1.0,
            output_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// Rate for optimizer step `t` (0-based) out of `total` planned.
    pub fn learning_rate_at(&self, t: usize, total: usize) -> f64 {
        if t < self.warmup_steps {
            return self.learning_rate * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let w = self.warmup_steps.min(total);
        self.schedule.rate(self.learning_rate, t - w, total - w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(n) = self.max_grad_norm.filter(|n| !(n.is_finite() && *n > 0.0)) {
            return Err(Error::Config(format!("max gradient norm must be > 0, got {n}")));
        }
        if !(self.output_gain.is_finite() && self.output_gain > 0.0) {
            return Err(Error::Config(format!("output gain must be > 0, got {}", self.output_gain)));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(Error::Config(format!("output scale must be > 0, got {}", self.output_scale)));
        }
        Ok(())
    }
}

/// A prepared image with its target on the model grid.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub prepared: PreparedImage,
    pub target: DensityMap,
}

/// Prepares images for training, skipping (with a warning) any that fail
/// the resize or exemplar checks.
pub fn prepare_examples(pipeline: &CountingPipeline, images: &[AnnotatedImage]) -> (Vec<TrainExample>, Vec<String>) {
    let mut examples = Vec::with_capacity(images.len());
    let mut warnings = Vec::new();
    for img in images {
        let prepared = pipeline.prepare(img).and_then(|p| {
            let target = generate_target(&p.dots, p.stack.image_height, p.stack.image_width)?;
            Ok(TrainExample { prepared: p, target })
        });
        match prepared {
            Ok(ex) => examples.push(ex),
            Err(e) => {
                let msg = format!("skipping `{}`: {e}", img.id);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    (examples, warnings)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_mae: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub params: DensityHeadParams,
    /// Parameters with the lowest validation MAE, if validation ran.
    pub best: Option<(usize, f64, DensityHeadParams)>,
    pub log: Vec<EpochRecord>,
    pub iterations: usize,
}

/// Mean absolute count error of the unadapted head.
pub fn count_mae(params: &DensityHeadParams, examples: &[TrainExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let pred = params.predict(&ex.prepared.stack)?.count();
        total += (pred - ex.prepared.gt_count() as f64).abs();
    }
    Ok(total / examples.len() as f64)
}

struct Sinks {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Sinks {
    fn open(dir: &PathBuf) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.clone(),
            log: BufWriter::new(File::create(dir.join(TRAIN_LOG))?),
        })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, r)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        Ok(())
    }
}

/// Trains from `init` (or a fresh seeded head) on prepared examples.
pub fn train_examples(
    fingerprint: &ModelFingerprint,
    train: &[TrainExample],
    val: &[TrainExample],
    cfg: &TrainConfig,
    init: Option<DensityHeadParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split has no usable images".into()));
    }
    let mut params = match init {
        Some(p) => p,
        None => {
            let mut p = init_params(cfg.seed, fingerprint.matcher.channels());
            if cfg.output_gain != 1.0 {
                let last = p.tensors_mut().len() - 2;
                p.tensors_mut()[last].iter_mut().for_each(|w| *w *= cfg.output_gain as f32);
            }
            p.with_output_scale(cfg.output_scale as f32)?
        }
    };
    let planned = cfg
        .max_iterations
        .unwrap_or(usize::MAX)
        .min(cfg.epochs.saturating_mul(train.len().div_ceil(cfg.batch_size)));
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate as f32, &sizes);
    let mut rng = seeded_rng(cfg.seed);
    let mut sinks = cfg.checkpoint_dir.as_ref().map(Sinks::open).transpose()?;
    let save = |sinks: &Option<Sinks>, name: &str, params: &DensityHeadParams, meta: CheckpointMeta| -> Result<()> {
        if let Some(s) = sinks {
            Checkpoint::new(params.clone(), fingerprint.clone(), meta)?.save(s.dir.join(name))?;
        }
        Ok(())
    };

    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, DensityHeadParams)> = None;
    let mut iterations = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| iterations >= m) {
                break;
            }
            let mut acc: Option<HeadGrads> = None;
            for &i in batch {
                let ex = &train[i];
                let fwd = params.forward(&ex.prepared.stack)?;
                let (loss, grad) = mse_loss_grad(&fwd.density, &ex.target)?;
                if !loss.is_finite() {
                    return Err(Error::Argument(format!(
                        "training diverged at epoch {epoch} on `{}`",
                        ex.prepared.id
                    )));
                }
                loss_sum += loss;
                seen += 1;
                let g = params.backward(&fwd, &grad);
                match acc.as_mut() {
                    Some(a) => a.accumulate(&g),
                    None => acc = Some(g),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            // The error is measured on the network's own output scale, which
            // multiplies the loss by the squared scale. Without this a large
            // scale would shrink every gradient below Adam's epsilon.
            let k = params.output_scale();
            let factor = k * k / batch.len() as f32;
            if factor != 1.0 {
                grads.scale(factor);
            }
            if let Some(max) = cfg.max_grad_norm {
                let norm = grads.l2_norm();
                if norm > max {
                    grads.scale((max / norm) as f32);
                }
            }
            adam.learning_rate = cfg.learning_rate_at(iterations, planned) as f32;
            adam.step(params.tensors_mut(), grads.tensors());
            iterations += 1;
        }
        if seen == 0 {
            break;
        }
        let val_mae = if val.is_empty() { None } else { Some(count_mae(&params, val)?) };
        let record = EpochRecord {
            epoch,
            iterations,
            mean_loss: loss_sum / seen as f64,
            val_mae,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.3e}{}",
            record.mean_loss,
            val_mae.map(|m| format!(", val MAE {m:.3}")).unwrap_or_default()
        );
        let meta = CheckpointMeta {
            epoch: Some(epoch),
            iteration: Some(iterations),
            train_loss: Some(record.mean_loss),
            val_mae,
        };
        if let Some(s) = sinks.as_mut() {
            s.record(&record)?;
        }
        save(&sinks, LAST_CHECKPOINT, &params, meta.clone())?;
        log.push(record);
        if let Some(mae) = val_mae {
            if best.as_ref().is_none_or(|(_, b, _)| mae < *b) {
                best = Some((epoch, mae, params.clone()));
                save(&sinks, BEST_CHECKPOINT, &params, meta)?;
            } else if let (Some(p), Some((best_epoch, _, _))) = (cfg.patience, best.as_ref()) {
                if epoch - best_epoch >= p {
                    log::info!("no validation improvement for {p} epochs, stopping");
                    break 'epochs;
                }
            }
        }
        if cfg.max_iterations.is_some_and(|m| iterations >= m) {
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        best,
        log,
        iterations,
    })
}

/// Prepares `train_images` and `val_images` with `pipeline` and trains.
pub fn train(
    pipeline: &CountingPipeline,
    train_images: &[AnnotatedImage],
    val_images: &[AnnotatedImage],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_images.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if pipeline.resize_height() != cfg.resize_height {
        return Err(Error::Config(format!(
            "pipeline resizes to {}, training config says {}",
            pipeline.resize_height(),
            cfg.resize_height
        )));
    }
    let (train, _) = prepare_examples(pipeline, train_images);
    let (val, _) = prepare_examples(pipeline, val_images);
    train_examples(&pipeline.fingerprint(), &train, &val, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_runs_from_base_to_zero() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(1e-3, 0, 100), 1e-3);
        assert!((s.rate(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(s.rate(1e-3, 100, 100).abs() < 1e-15);
        assert!(s.rate(1e-3, 500, 100).abs() < 1e-15);
        let rates: Vec<f64> = (0..=100).map(|t| s.rate(1.0, t, 100)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(LrSchedule::Constant.rate(2e-5, 77, 100), 2e-5);
    }

    #[test]
    fn warmup_ramps_linearly_then_hands_over() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        let r: Vec<f64> = (0..6).map(|t| cfg.learning_rate_at(t, 104)).collect();
        assert_eq!(&r[..4], &[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(r[4], 1.0);
        assert!(r[5] < 1.0);
        let plain = TrainConfig::default();
        assert_eq!(plain.learning_rate_at(0, 10), plain.learning_rate);
    }

    #[test]
    fn schedule_names_parse() {
        assert_eq!("cosine".parse::<LrSchedule>().unwrap(), LrSchedule::Cosine);
        assert_eq!("constant".parse::<LrSchedule>().unwrap(), LrSchedule::Constant);
        assert!("linear".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { output_gain: -1.0, ..TrainConfig::default() },
            TrainConfig { output_scale: 0.0, ..TrainConfig::default() },
            TrainConfig { max_grad_norm: Some(f64::NAN), ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        TrainConfig::default().validate().unwrap();
    }
}
