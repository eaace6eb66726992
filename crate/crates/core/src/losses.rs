//! Training loss and the exemplar-driven adaptation losses.
//!
//! Every loss comes with a `*_grad` twin returning `d loss / d density` on
//! the full map, which the head's backward pass consumes.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::annotation::BBox;
use crate::density::DensityMap;
use crate::error::{Error, Result};

/// Hyperparameters of per-image test-time adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Weight of the min-count term.
    pub lambda1: f64,
    /// Weight of the perturbation term.
    pub lambda2: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-9,
            lambda2: 1e-4,
            steps: 100,
            learning_rate: 1e-7,
        }
    }
}

impl AdaptationConfig {
    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("learning_rate", self.learning_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Pixel rows and columns covered by a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropWindow {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl CropWindow {
    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.cols.len()
    }
}

fn rounded_range(lo: f64, hi: f64, extent: usize) -> Range<usize> {
    let start = (lo.round() as usize).min(extent - 1);
    let end = (hi.round() as usize).min(extent);
    start..end.max(start + 1)
}

/// Rows `round(y1)..round(y2)` and columns `round(x1)..round(x2)`, at least
/// one pixel each way.
pub fn crop_window(height: usize, width: usize, b: &BBox) -> Result<CropWindow> {
    let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= width as f64 && b.y2 <= height as f64;
    if height == 0 || width == 0 || !b.is_ordered() || !inside {
        return Err(Error::OutOfBounds(format!(
            "box {b} does not fit a {height}x{width} density map"
        )));
    }
    Ok(CropWindow {
        rows: rounded_range(b.y1, b.y2, height),
        cols: rounded_range(b.x1, b.x2, width),
    })
}

pub fn crop(d: &DensityMap, b: &BBox) -> Result<Array2<f64>> {
    let w = crop_window(d.height(), d.width(), b)?;
    Ok(d.values().slice(s![w.rows, w.cols]).to_owned())
}

fn windows(d: ArrayView2<f64>, boxes: &[BBox]) -> Result<Vec<CropWindow>> {
    let (h, w) = d.dim();
    boxes.iter().map(|b| crop_window(h, w, b)).collect()
}

fn check_same_shape(pred: &DensityMap, target: &DensityMap) -> Result<()> {
    if pred.values().dim() != target.values().dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, target is {:?}",
            pred.values().dim(),
            target.values().dim()
        )));
    }
    Ok(())
}

/// Mean over pixels of the squared difference.
pub fn mse_loss(pred: &DensityMap, target: &DensityMap) -> Result<f64> {
    Ok(mse_loss_grad(pred, target)?.0)
}

pub fn mse_loss_grad(pred: &DensityMap, target: &DensityMap) -> Result<(f64, Array2<f64>)> {
    check_same_shape(pred, target)?;
    let diff = pred.values() - target.values();
    let n = diff.len() as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.mapv(|v| 2.0 * v / n)))
}

/// `sum_b max(0, 1 - sum(crop(pred, b)))`.
pub fn min_count_loss(pred: &DensityMap, boxes: &[BBox]) -> Result<f64> {
    Ok(min_count_loss_grad(pred, boxes)?.0)
}

/// The hinge subgradient is taken as zero exactly at a crop sum of 1.
pub fn min_count_loss_grad(pred: &DensityMap, boxes: &[BBox]) -> Result<(f64, Array2<f64>)> {
    let d = pred.values().view();
    let mut grad = Array2::zeros(d.dim());
    let mut loss = 0.0;
    for w in windows(d, boxes)? {
        let mass = d.slice(s![w.rows.clone(), w.cols.clone()]).sum();
        if mass < 1.0 {
            loss += 1.0 - mass;
            grad.slice_mut(s![w.rows, w.cols]).mapv_inplace(|g| g - 1.0);
        }
    }
    Ok((loss, grad))
}

/// Peak-normalized Gaussian window with `sigma = size / 4` on each axis.
pub fn perturbation_target(h: usize, w: usize) -> Result<Array2<f64>> {
    if h == 0 || w == 0 {
        return Err(Error::Argument(format!("perturbation window {h}x{w} is empty")));
    }
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sr, sc) = (h as f64 / 4.0, w as f64 / 4.0);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| {
        let dr = r as f64 - cr;
        let dc = c as f64 - cc;
        (-(dr * dr / (2.0 * sr * sr) + dc * dc / (2.0 * sc * sc))).exp()
    }))
}

/// `sum_b ||crop(pred, b) - G||^2`, summed (not averaged) over each crop.
pub fn perturbation_loss(pred: &DensityMap, boxes: &[BBox]) -> Result<f64> {
    Ok(perturbation_loss_grad(pred, boxes)?.0)
}

pub fn perturbation_loss_grad(pred: &DensityMap, boxes: &[BBox]) -> Result<(f64, Array2<f64>)> {
    let d = pred.values().view();
    let mut grad = Array2::zeros(d.dim());
    let mut loss = 0.0;
    for w in windows(d, boxes)? {
        let g = perturbation_target(w.height(), w.width())?;
        let diff = &d.slice(s![w.rows.clone(), w.cols.clone()]) - &g;
        loss += diff.iter().map(|v| v * v).sum::<f64>();
        let mut dst = grad.slice_mut(s![w.rows, w.cols]);
        dst.scaled_add(2.0, &diff);
    }
    Ok((loss, grad))
}

/// Component values of the adaptation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationLoss {
    pub min_count: f64,
    pub perturbation: f64,
    pub total: f64,
}

/// `lambda1 * min_count + lambda2 * perturbation`.
pub fn adaptation_loss(pred: &DensityMap, boxes: &[BBox], cfg: &AdaptationConfig) -> Result<f64> {
    Ok(adaptation_loss_grad(pred, boxes, cfg)?.0.total)
}

pub fn adaptation_loss_grad(
    pred: &DensityMap,
    boxes: &[BBox],
    cfg: &AdaptationConfig,
) -> Result<(AdaptationLoss, Array2<f64>)> {
    let (min_count, g1) = min_count_loss_grad(pred, boxes)?;
    let (perturbation, g2) = perturbation_loss_grad(pred, boxes)?;
    let total = cfg.lambda1 * min_count + cfg.lambda2 * perturbation;
    let grad = g1 * cfg.lambda1 + g2 * cfg.lambda2;
    Ok((
        AdaptationLoss {
            min_count,
            perturbation,
            total,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: Array2<f64>) -> DensityMap {
        DensityMap::new(values).unwrap()
    }

    /// Map whose three unit boxes along the top row hold the given masses.
    fn map_with_crop_sums(sums: &[f64]) -> (DensityMap, Vec<BBox>) {
        let mut v = Array2::zeros((4, 4 * sums.len()));
        let mut boxes = Vec::new();
        for (i, s) in sums.iter().enumerate() {
            // Spread the mass over a 2x2 crop.
            v.slice_mut(s![0..2, 4 * i..4 * i + 2]).fill(s / 4.0);
            boxes.push(BBox::new(4.0 * i as f64, 0.0, 4.0 * i as f64 + 2.0, 2.0));
        }
        (map(v), boxes)
    }

    #[test]
    fn crop_examples() {
        let d = map(Array2::from_shape_fn((8, 10), |(r, c)| (r * 10 + c) as f64));
        assert_eq!(crop(&d, &BBox::new(0.0, 0.0, 10.0, 8.0)).unwrap(), d.values());
        let one = crop(&d, &BBox::new(3.0, 5.0, 4.0, 6.0)).unwrap();
        assert_eq!(one.dim(), (1, 1));
        assert_eq!(one[[0, 0]], d.values()[[5, 3]]);
        assert!(matches!(crop(&d, &BBox::new(5.0, 5.0, 11.0, 7.0)), Err(Error::OutOfBounds(_))));
        // Sub-pixel boxes still cover one pixel.
        assert_eq!(crop(&d, &BBox::new(9.8, 7.8, 10.0, 8.0)).unwrap().dim(), (1, 1));
    }

    #[test]
    fn mse_examples() {
        let p = map(ndarray::array![[1.0, 0.0], [0.0, 0.0]]);
        let z = DensityMap::zeros(2, 2);
        assert_eq!(mse_loss(&p, &p).unwrap(), 0.0);
        assert_eq!(mse_loss(&p, &z).unwrap(), 0.25);
        assert_eq!(mse_loss(&z, &p).unwrap(), 0.25);
        assert!(matches!(mse_loss(&p, &DensityMap::zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn min_count_examples() {
        let (d, b) = map_with_crop_sums(&[1.2, 3.0]);
        assert_eq!(min_count_loss(&d, &b).unwrap(), 0.0);
        let (d, b) = map_with_crop_sums(&[0.4]);
        assert!((min_count_loss(&d, &b).unwrap() - 0.6).abs() < 1e-12);
        let (d, b) = map_with_crop_sums(&[0.0, 0.5, 2.0]);
        assert_eq!(min_count_loss(&d, &b).unwrap(), 1.5);
        assert_eq!(min_count_loss(&d, &[]).unwrap(), 0.0);
    }

    #[test]
    fn hinge_boundary_has_zero_gradient() {
        let (d, b) = map_with_crop_sums(&[1.0]);
        let (loss, grad) = min_count_loss_grad(&d, &b).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn perturbation_target_examples() {
        assert_eq!(perturbation_target(1, 1).unwrap(), ndarray::array![[1.0]]);
        let g = perturbation_target(5, 5).unwrap();
        assert_eq!(g[[2, 2]], 1.0);
        // (0 - 2)^2 / (2 * 1.25^2) on both axes.
        assert!((g[[0, 0]] - (-2.56f64).exp()).abs() < 1e-15);
        let flipped = g.slice(s![..;-1, ..;-1]).to_owned();
        assert_eq!(g, flipped);
        assert!(perturbation_target(0, 3).is_err());
    }

    #[test]
    fn perturbation_examples() {
        let z = DensityMap::zeros(6, 6);
        assert_eq!(perturbation_loss(&z, &[BBox::new(2.0, 2.0, 3.0, 3.0)]).unwrap(), 1.0);
        let g = perturbation_target(5, 5).unwrap();
        let expected: f64 = g.iter().map(|v| v * v).sum();
        let got = perturbation_loss(&z, &[BBox::new(0.0, 0.0, 5.0, 5.0)]).unwrap();
        assert!((got - expected).abs() < 1e-12);
        let mut v = Array2::zeros((6, 6));
        v.slice_mut(s![1..6, 0..5]).assign(&g);
        assert_eq!(perturbation_loss(&map(v), &[BBox::new(0.0, 1.0, 5.0, 6.0)]).unwrap(), 0.0);
    }

    #[test]
    fn adaptation_examples() {
        // Min-count 1.5 from crop sums {0, 0.5, 2}; perturbation computed directly.
        let (d, b) = map_with_crop_sums(&[0.0, 0.5, 2.0]);
        let p = perturbation_loss(&d, &b).unwrap();
        let cfg = AdaptationConfig::default();
        assert_eq!(adaptation_loss(&d, &b, &cfg).unwrap(), 1.5 * 1e-9 + p * 1e-4);
        let off = AdaptationConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..cfg
        };
        assert_eq!(adaptation_loss(&d, &b, &off).unwrap(), 0.0);
        assert_eq!(adaptation_loss(&d, &[], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn default_config() {
        let c = AdaptationConfig::default();
        assert_eq!((c.lambda1, c.lambda2, c.steps, c.learning_rate), (1e-9, 1e-4, 100, 1e-7));
        assert!(c.validate().is_ok());
        assert!(AdaptationConfig { lambda1: -1.0, ..c }.validate().is_err());
    }

    fn central_difference(f: impl Fn(&DensityMap) -> f64, d: &DensityMap, r: usize, c: usize, eps: f64) -> f64 {
        let mut plus = d.values().clone();
        plus[[r, c]] += eps;
        let mut minus = d.values().clone();
        minus[[r, c]] -= eps;
        (f(&map(plus)) - f(&map(minus))) / (2.0 * eps)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps = 1e-6;
        for _ in 0..20 {
            // Values kept away from zero so the perturbed maps stay valid.
            let d = map(Array2::from_shape_fn((8, 8), |_| rng.random_range(0.01..0.2)));
            let t = map(Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..0.2)));
            let boxes = [BBox::new(0.0, 0.0, 3.0, 4.0), BBox::new(2.0, 3.0, 7.0, 8.0)];
            let (_, g_mse) = mse_loss_grad(&d, &t).unwrap();
            let (_, g_min) = min_count_loss_grad(&d, &boxes).unwrap();
            let (_, g_pert) = perturbation_loss_grad(&d, &boxes).unwrap();
            for r in 0..8 {
                for c in 0..8 {
                    let checks = [
                        (g_mse[[r, c]], central_difference(|p| mse_loss(p, &t).unwrap(), &d, r, c, eps)),
                        (g_min[[r, c]], central_difference(|p| min_count_loss(p, &boxes).unwrap(), &d, r, c, eps)),
                        (g_pert[[r, c]], central_difference(|p| perturbation_loss(p, &boxes).unwrap(), &d, r, c, eps)),
                    ];
                    for (analytic, fd) in checks {
                        let scale = analytic.abs().max(fd.abs()).max(1e-8);
                        assert!((analytic - fd).abs() / scale <= 1e-4, "({r},{c}): {analytic} vs {fd}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn min_count_is_monotone(
            seed in any::<u64>(),
            r in 0usize..8,
            c in 0usize..8,
            bump in 0.0f64..2.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..0.1));
            let boxes = [BBox::new(1.0, 1.0, 5.0, 6.0), BBox::new(3.0, 0.0, 8.0, 3.0)];
            let before = min_count_loss(&map(v.clone()), &boxes).unwrap();
            let mut up = v;
            up[[r, c]] += bump;
            prop_assert!(min_count_loss(&map(up), &boxes).unwrap() <= before);
        }

        #[test]
        fn losses_non_negative(seed in any::<u64>(), x in 0.0f64..6.0, y in 0.0f64..6.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = map(Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..3.0)));
            let boxes = [BBox::new(x, y, x + 2.0, y + 2.0)];
            for v in [
                min_count_loss(&d, &boxes).unwrap(),
                perturbation_loss(&d, &boxes).unwrap(),
                mse_loss(&d, &DensityMap::zeros(8, 8)).unwrap(),
            ] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }

        #[test]
        fn adaptation_loss_is_linear_in_weights(
            seed in any::<u64>(),
            l1 in 0.0f64..10.0,
            l2 in 0.0f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = map(Array2::from_shape_fn((8, 8), |_| rng.random_range(0.0..0.1)));
            let boxes = [BBox::new(0.0, 0.0, 4.0, 4.0)];
            let cfg = AdaptationConfig { lambda1: l1, lambda2: l2, ..Default::default() };
            let m = min_count_loss(&d, &boxes).unwrap();
            let p = perturbation_loss(&d, &boxes).unwrap();
            prop_assert_eq!(adaptation_loss(&d, &boxes, &cfg).unwrap(), l1 * m + l2 * p);
        }
    }
}
