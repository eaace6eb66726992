use ndarray::{Array3, ArrayView3};

/// Source taps for one output index: `(i0, i1, w0, w1)`.
type Tap = (usize, usize, f32, f32);

/// Half-pixel-centred linear interpolation taps (`align_corners = false`).
fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = (src - i0 as f64) as f32;
            if i0 == i1 {
                (i0, i1, 1.0, 0.0)
            } else {
                (i0, i1, 1.0 - l1, l1)
            }
        })
        .collect()
}

/// Bilinear resize of every channel to `out_h x out_w`.
pub fn bilinear_resize(x: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    assert!(h > 0 && w > 0 && out_h > 0 && out_w > 0, "empty resize");
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut tmp = Array3::<f32>::zeros((c, h, out_w));
    for ch in 0..c {
        for y in 0..h {
            for (ox, &(x0, x1, w0, w1)) in tx.iter().enumerate() {
                tmp[[ch, y, ox]] = w0 * x[[ch, y, x0]] + w1 * x[[ch, y, x1]];
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..out_w {
                out[[ch, oy, ox]] = w0 * tmp[[ch, y0, ox]] + w1 * tmp[[ch, y1, ox]];
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: maps an output gradient back to the input grid.
pub fn bilinear_resize_backward(grad: ArrayView3<f32>, in_h: usize, in_w: usize) -> Array3<f32> {
    let (c, out_h, out_w) = grad.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return grad.to_owned();
    }
    let tx = taps(in_w, out_w);
    let ty = taps(in_h, out_h);
    let mut tmp = Array3::<f32>::zeros((c, in_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..out_w {
                let g = grad[[ch, oy, ox]];
                tmp[[ch, y0, ox]] += w0 * g;
                tmp[[ch, y1, ox]] += w1 * g;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, in_h, in_w));
    for ch in 0..c {
        for y in 0..in_h {
            for (ox, &(x0, x1, w0, w1)) in tx.iter().enumerate() {
                let g = tmp[[ch, y, ox]];
                out[[ch, y, x0]] += w0 * g;
                out[[ch, y, x1]] += w1 * g;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn upsample_matches_half_pixel_convention() {
        // 1-D row [0, 1] upsampled x2 -> [0, 0.25, 0.75, 1]
        let x = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(x.view(), 1, 4);
        let got: Vec<f32> = y.iter().copied().collect();
        assert_eq!(got, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn constant_is_preserved() {
        let x = Array3::from_elem((2, 3, 5), 1.5f32);
        let y = bilinear_resize(x.view(), 7, 4);
        assert!(y.iter().all(|v| (v - 1.5).abs() < 1e-6));
    }

    #[test]
    fn backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w, oh, ow) in &[(3, 4, 6, 8), (5, 7, 3, 2), (4, 4, 9, 5)] {
            let x = Array3::from_shape_fn((2, h, w), |_| rng.random_range(-1.0f32..1.0));
            let g = Array3::from_shape_fn((2, oh, ow), |_| rng.random_range(-1.0f32..1.0));
            let lhs: f64 = bilinear_resize(x.view(), oh, ow)
                .iter()
                .zip(g.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            let rhs: f64 = bilinear_resize_backward(g.view(), h, w)
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum();
            assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        }
    }
}
