use ndarray::{Array3, ArrayView3};

use super::Backbone;
use crate::nn::{avg_pool2x2, checksum, kaiming_conv, relu_inplace, seeded_rng, Conv2d};

/// Output channels of the four stages.
const WIDTHS: [usize; 4] = [32, 64, 128, 256];

/// Four seeded stages of 3x3 convolution, ReLU and 2x2 average pooling.
/// Stage 3 is the stride-8 grid and stage 4 the stride-16 grid. Pooling
/// instead of strided convolution keeps the features from aliasing, which
/// matters because the weights are random. Cheap enough for CPU test suites.
#[derive(Debug, Clone)]
pub struct LiteBackbone {
    seed: u64,
    stages: Vec<Conv2d>,
}

impl LiteBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut in_c = 3;
        let stages = WIDTHS
            .iter()
            .map(|&w| {
                let conv = kaiming_conv(&mut rng, in_c, w, 3, 1);
                in_c = w;
                conv
            })
            .collect();
        Self { seed, stages }
    }
}

/// Per-channel zero mean and unit variance over the spatial grid.
fn standardize(x: &Array3<f32>) -> Array3<f32> {
    let mut out = x.clone();
    for mut plane in out.outer_iter_mut() {
        let n = plane.len() as f32;
        let mean = plane.sum() / n;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
        let inv = 1.0 / (var.sqrt() + 1e-5);
        plane.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

impl Backbone for LiteBackbone {
    fn id(&self) -> String {
        format!("lite-v2:{}", self.seed)
    }

    fn forward(&self, image: ArrayView3<f32>) -> (Array3<f32>, Array3<f32>) {
        let mut x = image.to_owned();
        let mut f3 = None;
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(x.view());
            relu_inplace(&mut x);
            x = avg_pool2x2(x.view());
            if i == 2 {
                f3 = Some(standardize(&x));
            }
        }
        (f3.expect("four stages"), standardize(&x))
    }

    fn checksum(&self) -> String {
        checksum(self.stages.iter().flat_map(|c| {
            [
                c.weight.as_slice().expect("contiguous"),
                c.bias.as_slice().expect("contiguous"),
            ]
        }))
    }
}
