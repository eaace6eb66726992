//! Ground-truth density maps from dot annotations.
//!
//! Each dot is replaced by a Gaussian whose window is the image's mean
//! nearest-neighbour dot distance and whose sigma is a quarter of the window.
//! Kernels truncated by the frame are renormalized, so the map always sums to
//! the number of dots.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::annotation::Point;
use crate::density::DensityMap;
use crate::error::{Error, Result};

/// Window used when an image has a single dot.
pub const SINGLE_DOT_WINDOW: f64 = 15.0;
pub const MIN_WINDOW: usize = 3;
pub const MAX_WINDOW: usize = 129;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    /// Odd kernel side length in pixels.
    pub window: usize,
    pub sigma: f64,
}

impl GaussianSpec {
    /// Spec for a (real-valued) window size: rounded, forced odd, clamped.
    pub fn from_window(window: f64) -> Self {
        let mut w = window.round().max(0.0) as usize;
        if w % 2 == 0 {
            w += 1;
        }
        let w = w.clamp(MIN_WINDOW, MAX_WINDOW);
        Self {
            window: w,
            sigma: w as f64 / 4.0,
        }
    }

    /// Unnormalized `window x window` kernel values.
    fn kernel(&self) -> Array2<f64> {
        let c = (self.window / 2) as f64;
        let denom = 2.0 * self.sigma * self.sigma;
        Array2::from_shape_fn((self.window, self.window), |(r, col)| {
            let dr = r as f64 - c;
            let dc = col as f64 - c;
            (-(dr * dr + dc * dc) / denom).exp()
        })
    }
}

/// Mean over dots of the distance to the nearest other dot.
pub fn mean_nn_distance(dots: &[Point]) -> Result<f64> {
    match dots.len() {
        0 => Err(Error::EmptyAnnotation),
        1 => Ok(SINGLE_DOT_WINDOW),
        n => {
            let total: f64 = dots
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    dots.iter()
                        .enumerate()
                        .filter(|(j, _)| *j != i)
                        .map(|(_, q)| p.distance(q))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum();
            Ok(total / n as f64)
        }
    }
}

pub fn make_gaussian_spec(dots: &[Point]) -> Result<GaussianSpec> {
    Ok(GaussianSpec::from_window(mean_nn_distance(dots)?))
}

/// Target density map on an `height x width` frame.
pub fn generate_target(dots: &[Point], height: usize, width: usize) -> Result<DensityMap> {
    let mut out = Array2::<f64>::zeros((height, width));
    if dots.is_empty() {
        return Ok(DensityMap::from_raw(out));
    }
    let spec = make_gaussian_spec(dots)?;
    let kernel = spec.kernel();
    let half = (spec.window / 2) as isize;
    for p in dots {
        if !(p.x >= 0.0 && p.x < width as f64 && p.y >= 0.0 && p.y < height as f64) {
            return Err(Error::OutOfBounds(format!(
                "dot ({}, {}) outside {height}x{width} frame",
                p.x, p.y
            )));
        }
        let cx = (p.x.round() as isize).min(width as isize - 1);
        let cy = (p.y.round() as isize).min(height as isize - 1);
        let r0 = (cy - half).max(0);
        let r1 = (cy + half + 1).min(height as isize);
        let c0 = (cx - half).max(0);
        let c1 = (cx + half + 1).min(width as isize);
        let kr0 = (r0 - (cy - half)) as usize;
        let kc0 = (c0 - (cx - half)) as usize;
        let (nr, nc) = ((r1 - r0) as usize, (c1 - c0) as usize);
        let patch = kernel.slice(ndarray::s![kr0..kr0 + nr, kc0..kc0 + nc]);
        let mass = patch.sum();
        let mut dst = out.slice_mut(ndarray::s![r0..r1, c0..c1]);
        dst.scaled_add(1.0 / mass, &patch);
    }
    Ok(DensityMap::from_raw(out))
}

/// Sidecar metadata of a cached target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachedTargetMeta {
    pub window: usize,
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
}

/// Writes `<id>.f32` (row-major little-endian f32) and `<id>.json`.
pub fn write_target_cache(
    dir: &Path,
    id: &str,
    target: &DensityMap,
    spec: &GaussianSpec,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = target
        .values()
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect();
    fs::write(dir.join(format!("{id}.f32")), bytes)?;
    let meta = CachedTargetMeta {
        window: spec.window,
        sigma: spec.sigma,
        height: target.height(),
        width: target.width(),
    };
    fs::write(
        dir.join(format!("{id}.json")),
        serde_json::to_string(&meta)?,
    )?;
    Ok(())
}

pub fn read_target_cache(dir: &Path, id: &str) -> Result<(DensityMap, CachedTargetMeta)> {
    let meta_path = dir.join(format!("{id}.json"));
    let data_path = dir.join(format!("{id}.f32"));
    let meta: CachedTargetMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::load(&meta_path, e))?,
    )?;
    let bytes = fs::read(&data_path).map_err(|e| Error::load(&data_path, e))?;
    if bytes.len() != meta.height * meta.width * 4 {
        return Err(Error::load(
            &data_path,
            format!("expected {} bytes", meta.height * meta.width * 4),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let grid = Array2::from_shape_vec((meta.height, meta.width), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((DensityMap::new(grid)?, meta))
}
