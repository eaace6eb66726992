//! Count metrics, constant baselines, split evaluation and ablations.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_prepared, Prediction};
use crate::annotation::AnnotatedImage;
use crate::correlation::MatcherConfig;
use crate::error::{Error, Result};
use crate::features::{Block, DEFAULT_SCALES};
use crate::head::DensityHeadParams;
use crate::losses::AdaptationConfig;
use crate::pipeline::{CountingPipeline, PreparedImage};

fn check_lengths(gt: &[f64], pred: &[f64]) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::Argument("metrics need at least one value".into()));
    }
    if gt.len() != pred.len() {
        return Err(Error::Argument(format!(
            "{} ground-truth counts but {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(gt, pred)?;
    Ok(gt.iter().zip(pred).map(|(g, p)| (g - p).abs()).sum::<f64>() / gt.len() as f64)
}

/// Root mean squared error.
pub fn rmse(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_lengths(gt, pred)?;
    let mse = gt.iter().zip(pred).map(|(g, p)| (g - p).powi(2)).sum::<f64>() / gt.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    Mean,
    Median,
}

/// Predicts the same count for every image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantPredictor {
    pub mode: BaselineMode,
    pub value: f64,
}

impl ConstantPredictor {
    pub fn predict(&self) -> f64 {
        self.value
    }
}

/// Mean or median of the training counts.
pub fn baseline_predict(train_counts: &[f64], mode: BaselineMode) -> Result<ConstantPredictor> {
    if train_counts.is_empty() {
        return Err(Error::Argument("baseline needs a non-empty training split".into()));
    }
    let value = match mode {
        BaselineMode::Mean => train_counts.iter().sum::<f64>() / train_counts.len() as f64,
        BaselineMode::Median => {
            let mut v = train_counts.to_vec();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            }
        }
    };
    Ok(ConstantPredictor { mode, value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub id: String,
    pub gt_count: f64,
    pub pred_count: f64,
    pub abs_err: f64,
    /// Exemplars actually used.
    pub exemplars: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub diverged: bool,
}

/// Settings that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub adapt: bool,
    pub n_exemplars: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub matcher: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub config: EvalSettings,
    pub per_image: Vec<ImageResult>,
    /// Images that had fewer exemplars than requested.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exemplar_shortfall: Vec<String>,
    pub wall_time: f64,
}

impl EvalReport {
    pub fn from_results(split: &str, config: EvalSettings, per_image: Vec<ImageResult>, wall_time: f64) -> Result<Self> {
        let gt: Vec<f64> = per_image.iter().map(|r| r.gt_count).collect();
        let pred: Vec<f64> = per_image.iter().map(|r| r.pred_count).collect();
        let exemplar_shortfall = per_image
            .iter()
            .filter(|r| r.exemplars < config.n_exemplars)
            .map(|r| r.id.clone())
            .collect();
        Ok(Self {
            split: split.to_string(),
            n: per_image.len(),
            mae: mae(&gt, &pred)?,
            rmse: rmse(&gt, &pred)?,
            config,
            per_image,
            exemplar_shortfall,
            wall_time,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `id,gt_count,pred_count,abs_err` rows with a header.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "id,gt_count,pred_count,abs_err")?;
        for r in &self.per_image {
            writeln!(out, "{},{},{},{}", r.id, r.gt_count, r.pred_count, r.abs_err)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!("{}: n={} MAE={:.4} RMSE={:.4}", self.split, self.n, self.mae, self.rmse)
    }
}

/// Evaluation options.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub adapt: bool,
    pub n_exemplars: usize,
    pub adaptation: AdaptationConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            adapt: true,
            n_exemplars: 3,
            adaptation: AdaptationConfig::default(),
        }
    }
}

impl EvalOptions {
    fn settings(&self, matcher: &MatcherConfig) -> EvalSettings {
        EvalSettings {
            adapt: self.adapt,
            n_exemplars: self.n_exemplars,
            lambda1: self.adaptation.lambda1,
            lambda2: self.adaptation.lambda2,
            steps: if self.adapt { self.adaptation.steps } else { 0 },
            learning_rate: self.adaptation.learning_rate,
            matcher: matcher.channel_labels(),
            checkpoint: None,
        }
    }
}

/// Prediction for one prepared image, with or without adaptation.
pub fn predict_prepared(prepared: &PreparedImage, params: &DensityHeadParams, opts: &EvalOptions) -> Result<Prediction> {
    let cfg = if opts.adapt {
        opts.adaptation
    } else {
        opts.adaptation.with_steps(0)
    };
    adapt_prepared(prepared, params, &cfg)
}

fn result_for(prepared: &PreparedImage, pred: &Prediction, opts: &EvalOptions) -> ImageResult {
    let gt = prepared.gt_count() as f64;
    ImageResult {
        id: prepared.id.clone(),
        gt_count: gt,
        pred_count: pred.count,
        abs_err: (pred.count - gt).abs(),
        exemplars: prepared.boxes.len(),
        initial_loss: opts.adapt.then(|| pred.trace.initial_loss()),
        final_loss: opts.adapt.then(|| pred.trace.final_loss()),
        diverged: pred.trace.diverged,
    }
}

/// Evaluates every image with its first `n_exemplars` boxes. Each image
/// starts from the same `params`.
pub fn evaluate_split(
    pipeline: &CountingPipeline,
    params: &DensityHeadParams,
    split: &str,
    images: &[AnnotatedImage],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if !(1..=3).contains(&opts.n_exemplars) {
        return Err(Error::Argument(format!(
            "number of exemplars must be 1 to 3, got {}",
            opts.n_exemplars
        )));
    }
    let start = std::time::Instant::now();
    let mut results = Vec::with_capacity(images.len());
    for img in images {
        let img = img.with_first_exemplars(opts.n_exemplars);
        let prepared = pipeline.prepare(&img)?;
        let pred = predict_prepared(&prepared, params, opts)?;
        log::debug!("{}: gt {} pred {:.3}", img.id, img.count(), pred.count);
        results.push(result_for(&prepared, &pred, opts));
    }
    EvalReport::from_results(split, opts.settings(pipeline.matcher()), results, start.elapsed().as_secs_f64())
}

/// One column of the component ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub matcher: MatcherConfig,
    pub adapt: bool,
}

/// The four columns: plain, + multi-scale image features, + multi-scale
/// exemplars, + adaptation.
pub fn component_ablation_variants() -> Vec<AblationVariant> {
    let single_block = vec![Block::Three];
    let both = Block::ALL.to_vec();
    let one_scale = vec![1.0];
    let all_scales = DEFAULT_SCALES.to_vec();
    vec![
        AblationVariant {
            name: "base".into(),
            matcher: MatcherConfig {
                blocks: single_block,
                scales: one_scale.clone(),
            },
            adapt: false,
        },
        AblationVariant {
            name: "multi-scale-image".into(),
            matcher: MatcherConfig {
                blocks: both.clone(),
                scales: one_scale,
            },
            adapt: false,
        },
        AblationVariant {
            name: "multi-scale-exemplar".into(),
            matcher: MatcherConfig {
                blocks: both.clone(),
                scales: all_scales.clone(),
            },
            adapt: false,
        },
        AblationVariant {
            name: "test-time-adaptation".into(),
            matcher: MatcherConfig {
                blocks: both,
                scales: all_scales,
            },
            adapt: true,
        },
    ]
}

/// Reports for 1, 2 and 3 exemplars.
pub fn exemplar_ablation(
    pipeline: &CountingPipeline,
    params: &DensityHeadParams,
    split: &str,
    images: &[AnnotatedImage],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    (1..=3)
        .map(|n| {
            let opts = EvalOptions {
                n_exemplars: n,
                ..opts.clone()
            };
            evaluate_split(pipeline, params, split, images, &opts)
        })
        .collect()
}
