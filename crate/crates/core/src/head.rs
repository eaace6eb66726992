//! Density decoder: the only trainable part of the model.
//!
//! Layer sequence on the stride-8 correlation stack:
//! `conv7x7 -> 196`, up x2, `conv5x5 -> 128`, up x2, `conv3x3 -> 64`, up x2,
//! `conv1x1 -> 32`, `conv1x1 -> 1`, each followed by ReLU (the last one clamps
//! the density to be non-negative), then a bilinear resize to the exact image
//! size and a division by the fixed output scale (1 unless configured).

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::correlation::CorrelationStack;
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::nn::{bilinear_resize, bilinear_resize_backward, checksum, kaiming_conv, seeded_rng, Conv2d};

pub const HEAD_VERSION: u32 = 1;

/// `(kernel, out_channels)` of each convolution.
pub const LAYER_SPEC: [(usize, usize); 5] = [(7, 196), (5, 128), (3, 64), (1, 32), (1, 1)];

/// Convolutions followed by a 2x bilinear upsampling.
const UPSAMPLE_AFTER: [bool; 5] = [true, true, true, false, false];

#[derive(Debug, Clone, PartialEq)]
pub struct DensityHeadParams {
    convs: Vec<Conv2d>,
    /// The network predicts `output_scale` times the density. Per-pixel
    /// densities are around 1e-3, far below the step Adam takes on every
    /// weight, so a scale near the inverse keeps the last layer in a range
    /// the optimizer can move through without overshooting to zero.
    output_scale: f32,
}

/// Gradients with the same layout as [`DensityHeadParams`].
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub layers: Vec<(Array4<f32>, Array1<f32>)>,
}

impl HeadGrads {
    pub fn tensors(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &HeadGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub density: DensityMap,
    /// Input of each convolution.
    inputs: Vec<Array3<f32>>,
    /// Post-ReLU output of each convolution.
    activations: Vec<Array3<f32>>,
}

impl DensityHeadParams {
    /// Fan-in scaled normal weights and zero biases, deterministic in `seed`.
    pub fn init(seed: u64, in_channels: usize) -> Self {
        let mut rng = seeded_rng(seed);
        let mut c = in_channels;
        let convs = LAYER_SPEC
            .iter()
            .map(|&(k, out)| {
                let conv = kaiming_conv(&mut rng, c, out, k, 1);
                c = out;
                conv
            })
            .collect();
        Self { convs, output_scale: 1.0 }
    }

    /// All weights and biases zero.
    pub fn zeros(in_channels: usize) -> Self {
        let mut c = in_channels;
        let convs = LAYER_SPEC
            .iter()
            .map(|&(k, out)| {
                let conv = Conv2d::zeros(c, out, k);
                c = out;
                conv
            })
            .collect();
        Self { convs, output_scale: 1.0 }
    }

    /// Rebuilds from flat tensors in [`DensityHeadParams::tensors`] order.
    pub fn from_tensors(in_channels: usize, tensors: Vec<Vec<f32>>) -> Result<Self> {
        let mut params = Self::zeros(in_channels);
        if tensors.len() != 2 * params.convs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                2 * params.convs.len(),
                tensors.len()
            )));
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(&tensors) {
            if dst.len() != src.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(params)
    }

    /// Sets the fixed divisor applied to the network output.
    pub fn with_output_scale(mut self, scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("output scale must be > 0, got {scale}")));
        }
        self.output_scale = scale;
        Ok(self)
    }

    pub fn output_scale(&self) -> f32 {
        self.output_scale
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn layers(&self) -> &[Conv2d] {
        &self.convs
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(Conv2d::parameter_count).sum()
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.shape().to_vec(), c.bias.shape().to_vec()])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.as_slice().unwrap(), c.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.convs
            .iter_mut()
            .flat_map(|c| {
                let Conv2d { weight, bias, .. } = c;
                [weight.as_slice_mut().unwrap(), bias.as_slice_mut().unwrap()]
            })
            .collect()
    }

    pub fn checksum(&self) -> String {
        checksum(self.tensors())
    }

    /// Plain gradient step `p -= lr * g`.
    pub fn sgd_step(&mut self, grads: &HeadGrads, learning_rate: f32) {
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g) {
                *pv -= learning_rate * gv;
            }
        }
    }

    fn check_input(&self, stack: &CorrelationStack) -> Result<()> {
        if stack.channels() != self.in_channels() {
            return Err(Error::Config(format!(
                "correlation stack has {} channels, density head expects {}",
                stack.channels(),
                self.in_channels()
            )));
        }
        Ok(())
    }

    /// Density map at the stack's image size.
    pub fn predict(&self, stack: &CorrelationStack) -> Result<DensityMap> {
        Ok(self.forward(stack)?.density)
    }

    /// Forward pass retaining what [`DensityHeadParams::backward`] needs.
    pub fn forward(&self, stack: &CorrelationStack) -> Result<HeadForward> {
        self.check_input(stack)?;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        let mut x = stack.values.clone();
        for (conv, &up) in self.convs.iter().zip(&UPSAMPLE_AFTER) {
            let mut a = conv.forward(x.view());
            a.mapv_inplace(|v| v.max(0.0));
            let next = if up {
                let (_, h, w) = a.dim();
                bilinear_resize(a.view(), 2 * h, 2 * w)
            } else {
                a.clone()
            };
            inputs.push(std::mem::replace(&mut x, next));
            activations.push(a);
        }
        let out = activations.last().unwrap();
        let out = bilinear_resize(out.view(), stack.image_height, stack.image_width);
        let inv = 1.0 / self.output_scale as f64;
        let grid: Array2<f64> = out.index_axis(Axis(0), 0).mapv(|v| v as f64 * inv);
        Ok(HeadForward {
            density: DensityMap::from_raw(grid),
            inputs,
            activations,
        })
    }

    /// Parameter gradients given `d loss / d density`.
    pub fn backward(&self, fwd: &HeadForward, grad_density: &Array2<f64>) -> HeadGrads {
        assert_eq!(
            grad_density.dim(),
            (fwd.density.height(), fwd.density.width()),
            "density gradient shape"
        );
        let last = fwd.activations.last().unwrap();
        let (_, lh, lw) = last.dim();
        let inv = 1.0 / self.output_scale as f64;
        let g = grad_density.mapv(|v| (v * inv) as f32).insert_axis(Axis(0));
        let mut g = bilinear_resize_backward(g.view(), lh, lw);
        let mut layers = vec![(Array4::zeros((0, 0, 0, 0)), Array1::zeros(0)); self.convs.len()];
        for i in (0..self.convs.len()).rev() {
            ndarray::Zip::from(&mut g)
                .and(&fwd.activations[i])
                .for_each(|gv, &a| {
                    if a <= 0.0 {
                        *gv = 0.0
                    }
                });
            let grads = self.convs[i].backward(fwd.inputs[i].view(), g.view(), i > 0);
            layers[i] = (grads.weight, grads.bias);
            if i > 0 {
                let gin = grads.input.expect("input gradient requested");
                g = if UPSAMPLE_AFTER[i - 1] {
                    let (_, h, w) = fwd.activations[i - 1].dim();
                    bilinear_resize_backward(gin.view(), h, w)
                } else {
                    gin
                };
            }
        }
        HeadGrads { layers }
    }
}

/// Convenience wrapper: deterministic initialization for a given channel count.
pub fn init_params(seed: u64, in_channels: usize) -> DensityHeadParams {
    DensityHeadParams::init(seed, in_channels)
}
