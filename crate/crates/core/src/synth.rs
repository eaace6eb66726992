//! Synthetic counting scenes: repeated blobs of one shape on a textured
//! background, with exact dot annotations and three exemplar boxes.
//!
//! Each split draws from its own shapes so categories never overlap.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::annotation::{AnnotatedImage, BBox, Point, SplitName};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const SYNTH_HEIGHT: u32 = 192;
pub const SYNTH_WIDTH: u32 = 256;
pub const MIN_OBJECTS: usize = 7;
pub const MAX_OBJECTS: usize = 60;
/// Smallest object radius in pixels.
pub const MIN_RADIUS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Ring,
    Diamond,
    Triangle,
    Cross,
}

impl Shape {
    pub fn name(&self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Ring => "ring",
            Shape::Diamond => "diamond",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Shapes available to a split.
    pub fn for_split(split: SplitName) -> &'static [Shape] {
        match split {
            SplitName::Train => &[Shape::Disc, Shape::Square, Shape::Ring, Shape::Diamond],
            SplitName::Val => &[Shape::Triangle],
            SplitName::Test => &[Shape::Cross],
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// radius `r`.
    fn covers(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Triangle => dy <= 0.6 * r && dy >= -r + 2.0 * dx.abs(),
            Shape::Cross => {
                (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r)
            }
        }
    }
}

/// Number of images per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteSize {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SuiteSize {
    pub fn train_only(n: usize) -> Self {
        Self {
            train: n,
            val: 0,
            test: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub images: Vec<AnnotatedImage>,
    pub splits: Vec<(SplitName, Vec<String>)>,
}

impl SyntheticSuite {
    pub fn split_images(&self, name: SplitName) -> Vec<&AnnotatedImage> {
        let ids = self
            .splits
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, ids)| ids.as_slice())
            .unwrap_or_default();
        ids.iter()
            .filter_map(|id| self.images.iter().find(|img| &img.id == id))
            .collect()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Smooth background: base color modulated by a few random plane waves plus
/// mild per-pixel noise.
fn background(rng: &mut ChaCha8Rng, w: u32, h: u32) -> (Vec<[f64; 3]>, [f64; 3]) {
    let base = random_color(rng);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut pixels = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let noise = rng.random_range(-0.03..0.03);
            pixels.push(base.map(|c| c + t + noise));
        }
    }
    (pixels, base)
}

/// Foreground color whose luminance differs clearly from the background.
fn contrasting_color(rng: &mut ChaCha8Rng, bg: [f64; 3]) -> [f64; 3] {
    loop {
        let c = random_color(rng);
        if (luma(c) - luma(bg)).abs() >= 0.3 {
            return c;
        }
    }
}

/// Grid with at least `n` cells and roughly square cells.
fn grid_for(n: usize, w: f64, h: f64) -> (usize, usize) {
    let cols = ((n as f64 * w / h).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols);
    (rows, cols)
}

/// One scene with `n` objects of `shape`.
pub fn render_scene(rng: &mut ChaCha8Rng, id: String, shape: Shape, n: usize) -> AnnotatedImage {
    let (w, h) = (SYNTH_WIDTH, SYNTH_HEIGHT);
    let (rows, cols) = grid_for(n, w as f64, h as f64);
    let (cell_w, cell_h) = (w as f64 / cols as f64, h as f64 / rows as f64);
    let half = cell_w.min(cell_h) / 2.0;
    // Objects span at least two stride-8 feature cells; the upper bound
    // leaves a margin of two pixels plus the box padding inside each cell.
    let r = rng.random_range(MIN_RADIUS..(half - 3.0).clamp(MIN_RADIUS + 0.5, 14.0));
    let jitter = (half - r - 3.0).max(0.0);

    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells.sort_unstable();
    let dots: Vec<Point> = cells
        .iter()
        .map(|&c| {
            let (row, col) = (c / cols, c % cols);
            let cx = (col as f64 + 0.5) * cell_w + rng.random_range(-jitter..=jitter);
            let cy = (row as f64 + 0.5) * cell_h + rng.random_range(-jitter..=jitter);
            Point::new(cx, cy)
        })
        .collect();

    let (mut canvas, bg) = background(rng, w, h);
    let fg = contrasting_color(rng, bg);
    // 2x2 supersampling for smooth edges.
    let offsets = [0.25, 0.75];
    for p in &dots {
        let x_lo = (p.x - r - 1.0).floor().max(0.0) as u32;
        let x_hi = ((p.x + r + 1.0).ceil() as u32).min(w);
        let y_lo = (p.y - r - 1.0).floor().max(0.0) as u32;
        let y_hi = ((p.y + r + 1.0).ceil() as u32).min(h);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let mut cover = 0.0;
                for oy in offsets {
                    for ox in offsets {
                        if shape.covers(x as f64 + ox - p.x, y as f64 + oy - p.y, r) {
                            cover += 0.25;
                        }
                    }
                }
                if cover > 0.0 {
                    let px = &mut canvas[(y * w + x) as usize];
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - cover) + fg[c] * cover;
                    }
                }
            }
        }
    }
    let mut pixels = RgbImage::new(w, h);
    for (i, px) in canvas.iter().enumerate() {
        let rgb = px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        pixels.put_pixel(i as u32 % w, i as u32 / w, Rgb(rgb));
    }

    let mut picks: Vec<usize> = (0..dots.len()).collect();
    picks.shuffle(rng);
    let pad = r + 1.0;
    let exemplars = picks[..3]
        .iter()
        .map(|&i| {
            let p = dots[i];
            BBox::new(
                (p.x - pad).max(0.0),
                (p.y - pad).max(0.0),
                (p.x + pad).min(w as f64),
                (p.y + pad).min(h as f64),
            )
        })
        .collect();

    AnnotatedImage {
        id,
        pixels,
        dots,
        exemplars,
        category: shape.name().to_string(),
    }
}

/// Deterministic suite with ids `synth-<split>-<index>`.
pub fn make_synthetic_suite(seed: u64, size: SuiteSize) -> Result<SyntheticSuite> {
    if size.train + size.val + size.test == 0 {
        return Err(Error::Argument("synthetic suite needs at least one image".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut images = Vec::new();
    let mut splits = Vec::new();
    for (name, n) in [
        (SplitName::Train, size.train),
        (SplitName::Val, size.val),
        (SplitName::Test, size.test),
    ] {
        let shapes = Shape::for_split(name);
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let shape = shapes[i % shapes.len()];
            let count = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
            let id = format!("synth-{name}-{i:03}");
            images.push(render_scene(&mut rng, id.clone(), shape, count));
            ids.push(id);
        }
        splits.push((name, ids));
    }
    Ok(SyntheticSuite { images, splits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{load_dataset, write_dataset};

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_suite(1, SuiteSize::train_only(3)).unwrap();
        let b = make_synthetic_suite(1, SuiteSize::train_only(3)).unwrap();
        let c = make_synthetic_suite(2, SuiteSize::train_only(3)).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.pixels.as_raw(), y.pixels.as_raw());
            assert_eq!(x.dots, y.dots);
        }
        assert_ne!(a.images[0].pixels.as_raw(), c.images[0].pixels.as_raw());
    }

    #[test]
    fn generator_contract() {
        let suite = make_synthetic_suite(
            9,
            SuiteSize {
                train: 12,
                val: 4,
                test: 4,
            },
        )
        .unwrap();
        assert_eq!(suite.images.len(), 20);
        for img in &suite.images {
            assert!((MIN_OBJECTS..=MAX_OBJECTS).contains(&img.count()), "{}", img.count());
            assert_eq!(img.exemplars.len(), 3);
            for b in &img.exemplars {
                let inside = img.dots.iter().filter(|p| b.contains(p)).count();
                assert_eq!(inside, 1, "{} box {b}", img.id);
                assert!(b.within(img.width() as f64, img.height() as f64));
                assert!(b.width() >= 2.0 * (MIN_RADIUS + 1.0) - 1e-9, "{} box {b}", img.id);
            }
        }
        assert!(suite.split_images(SplitName::Val).iter().all(|i| i.category == "triangle"));
        assert!(suite.split_images(SplitName::Test).iter().all(|i| i.category == "cross"));
    }

    #[test]
    fn extreme_counts_fit() {
        let mut rng = seeded_rng(4);
        for n in [MIN_OBJECTS, MAX_OBJECTS] {
            let img = render_scene(&mut rng, "x".into(), Shape::Ring, n);
            assert_eq!(img.count(), n);
            for b in &img.exemplars {
                assert_eq!(img.dots.iter().filter(|p| b.contains(p)).count(), 1);
            }
        }
    }

    #[test]
    fn written_suite_loads_without_warnings() {
        let dir = tempfile::tempdir().unwrap();
        let suite = make_synthetic_suite(
            3,
            SuiteSize {
                train: 4,
                val: 1,
                test: 1,
            },
        )
        .unwrap();
        write_dataset(dir.path(), &suite.images, &suite.splits).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 6);
        assert!(ds.warnings.is_empty(), "{:?}", ds.warnings);
    }
}
