use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array3, Array4, ArrayView3};
use safetensors::{Dtype, SafeTensors};

use super::Backbone;
use crate::error::{Error, Result};
use crate::nn::{checksum, kaiming_conv, max_pool2d, relu_inplace, seeded_rng, Conv2d};

const BN_EPS: f32 = 1e-5;

/// `(blocks, width, stride)` of the residual stages kept from ResNet-50.
const STAGES: [(usize, usize, usize); 3] = [(3, 64, 1), (4, 128, 2), (6, 256, 2)];

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    downsample: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let mut h = self.conv1.forward(x);
        relu_inplace(&mut h);
        let mut h = self.conv2.forward(h.view());
        relu_inplace(&mut h);
        let mut h = self.conv3.forward(h.view());
        match &self.downsample {
            Some(d) => h += &d.forward(x),
            None => h += &x,
        }
        relu_inplace(&mut h);
        h
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        [&self.conv1, &self.conv2, &self.conv3]
            .into_iter()
            .chain(self.downsample.as_ref())
    }
}

/// ResNet-50 stem plus `layer1`..`layer3` with batch norm folded into the
/// convolutions. `layer2` gives the stride-8 grid (512 channels) and `layer3`
/// the stride-16 grid (1024 channels).
#[derive(Debug, Clone)]
pub struct ResNet50Trunk {
    stem: Conv2d,
    stages: Vec<Vec<Bottleneck>>,
    id: String,
}

struct TensorSource<'a> {
    tensors: SafeTensors<'a>,
}

impl TensorSource<'_> {
    fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .tensors
            .tensor(name)
            .map_err(|e| Error::Checkpoint(format!("backbone tensor `{name}`: {e}")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "backbone tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        if t.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!(
                "backbone tensor `{name}` has dtype {:?}, expected F32",
                t.dtype()
            )));
        }
        Ok(t
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Conv weight `name.weight` folded with batch norm `bn`.
    fn conv_bn(&self, conv: &str, bn: &str, shape: [usize; 4], stride: usize) -> Result<Conv2d> {
        let [o, i, k, _] = shape;
        let w = self.get(&format!("{conv}.weight"), &shape)?;
        let gamma = self.get(&format!("{bn}.weight"), &[o])?;
        let beta = self.get(&format!("{bn}.bias"), &[o])?;
        let mean = self.get(&format!("{bn}.running_mean"), &[o])?;
        let var = self.get(&format!("{bn}.running_var"), &[o])?;
        let mut weight = Array4::from_shape_vec((o, i, k, k), w).expect("shape checked");
        let mut bias = Array1::zeros(o);
        for oc in 0..o {
            let scale = gamma[oc] / (var[oc] + BN_EPS).sqrt();
            weight
                .index_axis_mut(ndarray::Axis(0), oc)
                .mapv_inplace(|v| v * scale);
            bias[oc] = beta[oc] - mean[oc] * scale;
        }
        Ok(Conv2d::new(weight, bias, stride, k / 2))
    }
}

impl ResNet50Trunk {
    /// Loads torchvision-named weights (`conv1.weight`, `bn1.*`,
    /// `layer{1,2,3}.{i}.*`) from a safetensors file.
    pub fn from_safetensors(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
        let source = TensorSource {
            tensors: SafeTensors::deserialize(&bytes).map_err(|e| Error::load(path, e))?,
        };
        let stem = source.conv_bn("conv1", "bn1", [64, 3, 7, 7], 2)?;
        let mut stages = Vec::new();
        let mut in_c = 64;
        for (li, &(blocks, width, stride)) in STAGES.iter().enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let p = format!("layer{}.{b}", li + 1);
                let s = if b == 0 { stride } else { 1 };
                let downsample = if b == 0 {
                    Some(source.conv_bn(
                        &format!("{p}.downsample.0"),
                        &format!("{p}.downsample.1"),
                        [width * 4, in_c, 1, 1],
                        s,
                    )?)
                } else {
                    None
                };
                stage.push(Bottleneck {
                    conv1: source.conv_bn(&format!("{p}.conv1"), &format!("{p}.bn1"), [width, in_c, 1, 1], 1)?,
                    conv2: source.conv_bn(&format!("{p}.conv2"), &format!("{p}.bn2"), [width, width, 3, 3], s)?,
                    conv3: source.conv_bn(&format!("{p}.conv3"), &format!("{p}.bn3"), [width * 4, width, 1, 1], 1)?,
                    downsample,
                });
                in_c = width * 4;
            }
            stages.push(stage);
        }
        let mut trunk = Self {
            stem,
            stages,
            id: String::new(),
        };
        trunk.id = format!("resnet50:{}", &trunk.checksum()[..16]);
        Ok(trunk)
    }

    /// Seeded random weights with identity batch norm. The last convolution
    /// of each residual branch is damped so activations stay bounded.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let stem = kaiming_conv(&mut rng, 3, 64, 7, 2);
        let mut stages = Vec::new();
        let mut in_c = 64;
        for &(blocks, width, stride) in &STAGES {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                let mut conv3 = kaiming_conv(&mut rng, width, width * 4, 1, 1);
                conv3.weight.mapv_inplace(|v| v * 0.2);
                stage.push(Bottleneck {
                    conv1: kaiming_conv(&mut rng, in_c, width, 1, 1),
                    conv2: kaiming_conv(&mut rng, width, width, 3, s),
                    conv3,
                    downsample: (b == 0).then(|| kaiming_conv(&mut rng, in_c, width * 4, 1, s)),
                });
                in_c = width * 4;
            }
            stages.push(stage);
        }
        Self {
            stem,
            stages,
            id: format!("resnet50-random:{seed}"),
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.stem).chain(self.stages.iter().flatten().flat_map(|b| b.convs()))
    }

    /// Named tensors in torchvision layout with identity batch norm, for
    /// exporting the folded weights.
    pub fn export_tensors(&self) -> HashMap<String, (Vec<usize>, Vec<f32>)> {
        let mut out = HashMap::new();
        let mut put = |conv: &str, bn: &str, c: &Conv2d| {
            let o = c.out_channels();
            out.insert(
                format!("{conv}.weight"),
                (c.weight.shape().to_vec(), c.weight.iter().copied().collect()),
            );
            out.insert(format!("{bn}.weight"), (vec![o], vec![1.0; o]));
            out.insert(format!("{bn}.bias"), (vec![o], c.bias.to_vec()));
            out.insert(format!("{bn}.running_mean"), (vec![o], vec![0.0; o]));
            out.insert(format!("{bn}.running_var"), (vec![o], vec![1.0 - BN_EPS; o]));
        };
        put("conv1", "bn1", &self.stem);
        for (li, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                let p = format!("layer{}.{b}", li + 1);
                put(&format!("{p}.conv1"), &format!("{p}.bn1"), &block.conv1);
                put(&format!("{p}.conv2"), &format!("{p}.bn2"), &block.conv2);
                put(&format!("{p}.conv3"), &format!("{p}.bn3"), &block.conv3);
                if let Some(d) = &block.downsample {
                    put(&format!("{p}.downsample.0"), &format!("{p}.downsample.1"), d);
                }
            }
        }
        out
    }
}

impl Backbone for ResNet50Trunk {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn forward(&self, image: ArrayView3<f32>) -> (Array3<f32>, Array3<f32>) {
        let mut x = self.stem.forward(image);
        relu_inplace(&mut x);
        let mut x = max_pool2d(x.view(), 3, 2, 1);
        let mut outputs = Vec::with_capacity(2);
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(x.view());
            }
            if i >= 1 {
                outputs.push(x.clone());
            }
        }
        let f4 = outputs.pop().expect("layer3 output");
        let f3 = outputs.pop().expect("layer2 output");
        (f3, f4)
    }

    fn checksum(&self) -> String {
        let tensors: Vec<&[f32]> = self
            .convs()
            .flat_map(|c| {
                [
                    c.weight.as_slice().expect("contiguous"),
                    c.bias.as_slice().expect("contiguous"),
                ]
            })
            .collect();
        checksum(tensors)
    }
}
