//! Density maps rendered as 8-bit color images.

use std::io::Cursor;

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, RgbImage};

use crate::density::DensityMap;
use crate::error::Result;

/// Control points of a dark-to-bright colormap, evenly spaced on [0, 1].
const STOPS: [[u8; 3]; 6] = [
    [0, 0, 4],
    [66, 10, 104],
    [147, 38, 103],
    [221, 81, 58],
    [252, 165, 10],
    [252, 255, 164],
];

/// Color for `t` in [0, 1] (clamped).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (STOPS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// Scales the map by its maximum so the peak is the brightest color.
pub fn render_heatmap(d: &DensityMap) -> RgbImage {
    let max = d.values().iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (h, w) = (d.height() as u32, d.width() as u32);
    RgbImage::from_fn(w, h, |x, y| Rgb(colormap(d.values()[[y as usize, x as usize]] * scale)))
}

/// PNG of the rendered map, stretched to `width` x `height` (usually the
/// original image size) when that differs from the map grid.
pub fn heatmap_png(d: &DensityMap, width: u32, height: u32) -> Result<Vec<u8>> {
    let mut img = render_heatmap(d);
    if img.dimensions() != (width, height) {
        img = imageops::resize(&img, width, height, FilterType::Triangle);
    }
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}
