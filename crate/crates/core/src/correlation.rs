//! Exemplar-to-image correlation.
//!
//! Each (block, scale) pair yields one response map: every exemplar kernel
//! is slid over the block's feature grid with size-preserving zero padding,
//! divided by its element count, and the exemplars' maps are averaged. Maps
//! are brought to the stride-8 grid and stacked block-major, scale-minor.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Block, ExemplarKernelSet, FeaturePyramid, DEFAULT_SCALES};
use crate::nn::bilinear_resize;

/// Which pyramid levels and exemplar scales feed the stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub blocks: Vec<Block>,
    pub scales: Vec<f64>,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            blocks: Block::ALL.to_vec(),
            scales: DEFAULT_SCALES.to_vec(),
        }
    }
}

impl MatcherConfig {
    pub fn channels(&self) -> usize {
        self.blocks.len() * self.scales.len()
    }

    pub fn channel_order(&self) -> Vec<(Block, f64)> {
        self.blocks
            .iter()
            .flat_map(|&b| self.scales.iter().map(move |&s| (b, s)))
            .collect()
    }

    /// Human-readable channel labels such as `block3@0.9`.
    pub fn channel_labels(&self) -> Vec<String> {
        self.channel_order()
            .iter()
            .map(|(b, s)| format!("{b}@{s}"))
            .collect()
    }
}

/// Correlation maps on the stride-8 grid, one channel per (block, scale).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStack {
    /// `(channels, H/8, W/8)`
    pub values: Array3<f32>,
    pub image_height: usize,
    pub image_width: usize,
}

impl CorrelationStack {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// Size-preserving cross-correlation of one `(C, kh, kw)` kernel with a
/// `(C, h, w)` grid, divided by `C * kh * kw`.
pub fn cross_correlate(features: ArrayView3<f32>, kernel: ArrayView3<f32>) -> Result<Array2<f32>> {
    let (c, h, w) = features.dim();
    let (kc, kh, kw) = kernel.dim();
    if kc != c {
        return Err(Error::Shape(format!(
            "kernel has {kc} channels, features have {c}"
        )));
    }
    if kh > h || kw > w {
        return Err(Error::KernelTooLarge {
            kernel_h: kh,
            kernel_w: kw,
            grid_h: h,
            grid_w: w,
        });
    }
    let features = features.as_standard_layout();
    let kernel = kernel.as_standard_layout();
    let fm = features
        .view()
        .into_shape_with_order((c, h * w))
        .expect("contiguous");
    let km = kernel
        .view()
        .into_shape_with_order((c, kh * kw))
        .expect("contiguous");
    // products[(u, v), (y, x)] = <kernel[:, u, v], features[:, y, x]>
    let mut products = Array2::<f32>::zeros((kh * kw, h * w));
    general_mat_mul(1.0, &km.t(), &fm, 0.0, &mut products);

    let pad_t = (kh - 1) / 2;
    let pad_l = (kw - 1) / 2;
    let mut out = Array2::<f32>::zeros((h, w));
    for u in 0..kh {
        for v in 0..kw {
            let row = products.row(u * kw + v);
            let row = row.as_slice().expect("contiguous row");
            // out[i, j] += row[i + u - pad_t, j + v - pad_l]
            let i_lo = pad_t.saturating_sub(u);
            let i_hi = (h + pad_t).saturating_sub(u).min(h);
            let j_lo = pad_l.saturating_sub(v);
            let j_hi = (w + pad_l).saturating_sub(v).min(w);
            for i in i_lo..i_hi {
                let src_row = i + u - pad_t;
                let src = &row[src_row * w..(src_row + 1) * w];
                let dst = out.row_mut(i);
                let dst = dst.into_slice().expect("contiguous row");
                for j in j_lo..j_hi {
                    dst[j] += src[j + v - pad_l];
                }
            }
        }
    }
    let norm = (c * kh * kw) as f32;
    out.mapv_inplace(|x| x / norm);
    Ok(out)
}

/// Builds the correlation stack for the configured blocks and scales.
pub fn correlate(
    pyr: &FeaturePyramid,
    kernels: &ExemplarKernelSet,
    cfg: &MatcherConfig,
) -> Result<CorrelationStack> {
    let (_, h3, w3) = pyr.level(Block::Three).features.dim();
    let order = cfg.channel_order();
    let mut values = Array3::<f32>::zeros((order.len(), h3, w3));
    for (ch, &(block, scale)) in order.iter().enumerate() {
        let level = pyr.level(block);
        let mut acc: Option<Array2<f32>> = None;
        let mut n = 0usize;
        for k in kernels.select(block, scale) {
            let r = cross_correlate(level.features.view(), k.kernel.view())?;
            match acc.as_mut() {
                Some(a) => *a += &r,
                None => acc = Some(r),
            }
            n += 1;
        }
        let mut acc = acc.ok_or_else(|| {
            Error::Config(format!("no exemplar kernels for {block} at scale {scale}"))
        })?;
        acc.mapv_inplace(|v| v / n as f32);
        let map = if acc.dim() == (h3, w3) {
            acc
        } else {
            bilinear_resize(acc.view().insert_axis(Axis(0)), h3, w3).remove_axis(Axis(0))
        };
        values.index_axis_mut(Axis(0), ch).assign(&map);
    }
    Ok(CorrelationStack {
        values,
        image_height: pyr.image_height,
        image_width: pyr.image_width,
    })
}
