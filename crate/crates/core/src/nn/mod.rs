//! Minimal single-image CPU tensor kernels: convolution, pooling, bilinear
//! resampling and the Adam update, with the backward passes the density head
//! needs.

mod conv;
mod resize;

pub use conv::{avg_pool2x2, max_pool2d, Conv2d, ConvGrads};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use ndarray::{Array1, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Fan-in scaled normal weights (`std = sqrt(2 / fan_in)`), zero bias.
pub fn kaiming_conv(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize) -> Conv2d {
    let std = (2.0 / (in_c * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let weight = Array4::from_shape_simple_fn((out_c, in_c, k, k), || normal.sample(rng) as f32);
    Conv2d::new(weight, Array1::zeros(out_c), stride, k / 2)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hex SHA-256 over the little-endian bytes of a sequence of tensors.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a [f32]>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        hasher.update((t.len() as u64).to_le_bytes());
        for v in t {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Adam over a fixed list of flat parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32, sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f32, -2.0];
        let g = vec![0.5f32, -3.0];
        let mut adam = Adam::new(0.1, &[2]);
        adam.step(vec![&mut p], vec![&g]);
        assert!((p[0] - 0.9).abs() < 1e-5);
        assert!((p[1] + 1.9).abs() < 1e-5);
    }

    #[test]
    fn checksum_is_sensitive() {
        let a = [1.0f32, 2.0];
        let b = [1.0f32, 2.000001];
        assert_ne!(checksum([&a[..]]), checksum([&b[..]]));
        assert_eq!(checksum([&a[..]]), checksum([&a[..]]));
    }
}
