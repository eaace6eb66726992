use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewMut2, ShapeBuilder};

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

/// 2-D convolution over a single `(C, H, W)` image with square kernels,
/// symmetric zero padding and a bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub input: Option<Array3<f32>>,
}

struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per im2col band.
    fn band(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    /// Fills `col` (`rows x (band*out_w)`) for output rows `oy0..oy1`.
    fn im2col(&self, x: &[f32], oy0: usize, oy1: usize, col: &mut [f32]) {
        let n = (oy1 - oy0) * self.out_w;
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let dst = &mut col[r * n..(r + 1) * n];
                    for (band_row, oy) in (oy0..oy1).enumerate() {
                        let out_row = &mut dst[band_row * self.out_w..(band_row + 1) * self.out_w];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix >= 0 && (ix as usize) < self.in_w {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into `gx`, the adjoint of [`Geometry::im2col`].
    fn col2im(&self, col: &[f32], oy0: usize, oy1: usize, gx: &mut [f32]) {
        let n = (oy1 - oy0) * self.out_w;
        for c in 0..self.in_c {
            let plane = &mut gx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (c * self.k + ki) * self.k + kj;
                    let src = &col[r * n..(r + 1) * n];
                    for (band_row, oy) in (oy0..oy1).enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let row = &src[band_row * self.out_w..(band_row + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in row.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn band_view_mut(data: &mut [f32], plane: usize, channels: usize, offset: usize, n: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((channels, n).strides((plane, 1)), &mut data[offset..])
        .expect("band view within buffer")
}

fn band_view(data: &[f32], plane: usize, channels: usize, offset: usize, n: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((channels, n).strides((plane, 1)), &data[offset..])
        .expect("band view within buffer")
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Array1<f32>, stride: usize, padding: usize) -> Self {
        assert_eq!(weight.dim().2, weight.dim().3, "square kernels only");
        assert_eq!(weight.dim().0, bias.len());
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Zero-initialized layer with "same" padding for odd kernels.
    pub fn zeros(in_c: usize, out_c: usize, k: usize) -> Self {
        Self::new(Array4::zeros((out_c, in_c, k, k)), Array1::zeros(out_c), 1, k / 2)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &ArrayView3<f32>) -> Geometry {
        let (in_c, in_h, in_w) = x.dim();
        assert_eq!(in_c, self.in_channels(), "conv input channel mismatch");
        let (out_h, out_w) = self.output_size(in_h, in_w);
        Geometry {
            in_c,
            in_h,
            in_w,
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
            out_h,
            out_w,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        let (o, c, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, c * k * k))
            .expect("contiguous weight")
    }

    pub fn forward(&self, x: ArrayView3<f32>) -> Array3<f32> {
        let x = x.as_standard_layout();
        let g = self.geometry(&x.view());
        let o = self.out_channels();
        let plane = g.out_h * g.out_w;
        let mut out = Array3::<f32>::zeros((o, g.out_h, g.out_w));
        {
            let data = out.as_slice_mut().expect("fresh array");
            let wm = self.weight_matrix();
            if g.is_pointwise() {
                let xm = x.view().into_shape_with_order((g.in_c, plane)).expect("contiguous");
                let mut dst = band_view_mut(data, plane, o, 0, plane);
                general_mat_mul(1.0, &wm, &xm, 0.0, &mut dst);
            } else {
                let band = g.band();
                let xs = x.as_slice().expect("standard layout");
                let mut col = vec![0f32; g.rows() * band * g.out_w];
                let mut oy0 = 0;
                while oy0 < g.out_h {
                    let oy1 = (oy0 + band).min(g.out_h);
                    let n = (oy1 - oy0) * g.out_w;
                    g.im2col(xs, oy0, oy1, &mut col[..g.rows() * n]);
                    let cm = ArrayView2::from_shape((g.rows(), n), &col[..g.rows() * n]).unwrap();
                    let mut dst = band_view_mut(data, plane, o, oy0 * g.out_w, n);
                    general_mat_mul(1.0, &wm, &cm, 0.0, &mut dst);
                    oy0 = oy1;
                }
            }
        }
        for (mut ch, b) in out.outer_iter_mut().zip(self.bias.iter()) {
            ch.mapv_inplace(|v| v + b);
        }
        out
    }

    /// Gradients given the layer input `x` and the gradient w.r.t. the output.
    pub fn backward(&self, x: ArrayView3<f32>, grad_out: ArrayView3<f32>, want_input: bool) -> ConvGrads {
        let x = x.as_standard_layout();
        let grad_out = grad_out.as_standard_layout();
        let g = self.geometry(&x.view());
        let o = self.out_channels();
        assert_eq!(grad_out.dim(), (o, g.out_h, g.out_w), "conv grad shape mismatch");
        let plane = g.out_h * g.out_w;
        let gdata = grad_out.as_slice().expect("standard layout");
        let bias = Array1::from_iter(grad_out.outer_iter().map(|ch| ch.sum()));
        let wm = self.weight_matrix();
        let mut gw = Array2::<f32>::zeros((o, g.rows()));
        let mut gx = want_input.then(|| Array3::<f32>::zeros((g.in_c, g.in_h, g.in_w)));

        if g.is_pointwise() {
            let xm = x.view().into_shape_with_order((g.in_c, plane)).expect("contiguous");
            let gm = band_view(gdata, plane, o, 0, plane);
            general_mat_mul(1.0, &gm, &xm.t(), 0.0, &mut gw);
            if let Some(gx) = gx.as_mut() {
                let mut dst = gx.view_mut().into_shape_with_order((g.in_c, plane)).unwrap();
                general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut dst);
            }
        } else {
            let band = g.band();
            let xs = x.as_slice().expect("standard layout");
            let mut col = vec![0f32; g.rows() * band * g.out_w];
            let mut gcol = if want_input { vec![0f32; col.len()] } else { Vec::new() };
            let mut oy0 = 0;
            while oy0 < g.out_h {
                let oy1 = (oy0 + band).min(g.out_h);
                let n = (oy1 - oy0) * g.out_w;
                g.im2col(xs, oy0, oy1, &mut col[..g.rows() * n]);
                let cm = ArrayView2::from_shape((g.rows(), n), &col[..g.rows() * n]).unwrap();
                let gm = band_view(gdata, plane, o, oy0 * g.out_w, n);
                general_mat_mul(1.0, &gm, &cm.t(), 1.0, &mut gw);
                if let Some(gx) = gx.as_mut() {
                    let mut gc = ArrayViewMut2::from_shape((g.rows(), n), &mut gcol[..g.rows() * n]).unwrap();
                    general_mat_mul(1.0, &wm.t(), &gm, 0.0, &mut gc);
                    g.col2im(&gcol[..g.rows() * n], oy0, oy1, gx.as_slice_mut().unwrap());
                }
                oy0 = oy1;
            }
        }
        ConvGrads {
            weight: gw.into_shape_with_order(self.weight.raw_dim()).expect("same element count"),
            bias,
            input: gx,
        }
    }
}

/// 2x2 average pooling with stride 2. Odd edges keep a partial window
/// averaged over its valid cells, so the output is `ceil(h/2) x ceil(w/2)`.
pub fn avg_pool2x2(x: ArrayView3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::zeros((c, oh, ow));
    for ch in 0..c {
        let src = x.slice(s![ch, .., ..]);
        for oy in 0..oh {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let win = src.slice(s![ys.clone(), xs.clone()]);
                out[[ch, oy, ox]] = win.sum() / win.len() as f32;
            }
        }
    }
    out
}

/// 2-D max pooling with `-inf` padding.
pub fn max_pool2d(x: ArrayView3<f32>, k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Array3::from_elem((c, oh, ow), f32::NEG_INFINITY);
    for ch in 0..c {
        let src = x.slice(s![ch, .., ..]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            best = best.max(src[[iy as usize, ix as usize]]);
                        }
                    }
                }
                out[[ch, oy, ox]] = best;
            }
        }
    }
    out
}
