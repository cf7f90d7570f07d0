//! NHWC convolution kernels built on im2col + GEMM.
//!
//! Weights are stored as 2-D matrices: a convolution kernel is
//! `[k * k * c_in, c_out]`, a transposed-convolution kernel is
//! `[k * k * c_out, c_in]` (the kernel of the convolution it is the adjoint of).

use crate::tensor::{matmul, Tensor};

/// Spatial geometry of a square-kernel convolution from `(in_h, in_w)` to `(out_h, out_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(kernel >= 1 && stride >= 1);
        Self { kernel, stride, pad }
    }

    pub fn conv_out(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn transpose_out(&self, len: usize, out_pad: usize) -> usize {
        (len - 1) * self.stride + self.kernel + out_pad - 2 * self.pad
    }
}

/// Unfold `[B, H, W, C]` into `[B * Ho * Wo, k * k * C]` patches.
pub fn im2col(x: &Tensor, g: ConvGeom, out_h: usize, out_w: usize) -> Tensor {
    let [b, h, w, c] = dims4(x);
    let k = g.kernel;
    let width = k * k * c;
    let mut cols = vec![0.0; b * out_h * out_w * width];
    let xd = x.data();
    let mut row = 0;
    for bi in 0..b {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let base = row * width;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = base + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(&[b * out_h * out_w, width], cols)
}

/// Scatter-add patches back into a `[B, H, W, C]` image; adjoint of [`im2col`].
pub fn col2im(cols: &Tensor, g: ConvGeom, shape: [usize; 4], out_h: usize, out_w: usize) -> Tensor {
    let [b, h, w, c] = shape;
    let k = g.kernel;
    let width = k * k * c;
    assert_eq!(cols.shape(), &[b * out_h * out_w, width]);
    let mut img = vec![0.0; b * h * w * c];
    let cd = cols.data();
    let mut row = 0;
    for bi in 0..b {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let base = row * width;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = base + (ky * k + kx) * c;
                        for (o, v) in img[dst..dst + c].iter_mut().zip(&cd[src..src + c]) {
                            *o += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(&[b, h, w, c], img)
}

pub(crate) fn dims4(x: &Tensor) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected NHWC tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

fn add_bias_rows(out: &mut Tensor, bias: &Tensor) {
    let c = bias.len();
    for chunk in out.data_mut().chunks_mut(c) {
        for (o, b) in chunk.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
}

fn bias_grad(dy: &Tensor, channels: usize) -> Tensor {
    let mut db = vec![0.0; channels];
    for chunk in dy.data().chunks(channels) {
        for (o, v) in db.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(&[channels], db)
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, g: ConvGeom) -> Tensor {
    let [b, h, wd, c] = dims4(x);
    assert_eq!(w.shape()[0], g.kernel * g.kernel * c, "conv kernel does not match {c} input channels");
    let cout = w.shape()[1];
    let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
    let cols = im2col(x, g, oh, ow);
    let mut out = matmul(&cols, w, false, false);
    add_bias_rows(&mut out, bias);
    out.reshape(&[b, oh, ow, cout])
}

/// Gradients of [`conv2d`] w.r.t. `(x, w, bias)`; `dx` only when `need_dx`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: ConvGeom, need_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let shape = dims4(x);
    let [b, oh, ow, cout] = dims4(dy);
    let cols = im2col(x, g, oh, ow);
    let dy2 = dy.clone().reshape(&[b * oh * ow, cout]);
    let dw = matmul(&cols, &dy2, true, false);
    let dx = need_dx.then(|| col2im(&matmul(&dy2, w, false, true), g, shape, oh, ow));
    (dx, dw, bias_grad(dy, cout))
}

pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: &Tensor, g: ConvGeom, out_pad: usize) -> Tensor {
    let [b, h, wd, cin] = dims4(x);
    assert_eq!(w.shape()[1], cin, "transposed-conv kernel does not match {cin} input channels");
    let cout = w.shape()[0] / (g.kernel * g.kernel);
    let (oh, ow) = (g.transpose_out(h, out_pad), g.transpose_out(wd, out_pad));
    debug_assert_eq!(g.conv_out(oh), h);
    let xf = x.clone().reshape(&[b * h * wd, cin]);
    let cols = matmul(&xf, w, false, true);
    let mut out = col2im(&cols, g, [b, oh, ow, cout], h, wd);
    add_bias_rows(&mut out, bias);
    out
}

/// Gradients of [`conv_transpose2d`] w.r.t. `(x, w, bias)`; `dx` only when `need_dx`.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [b, h, wd, cin] = dims4(x);
    let cout = dims4(dy)[3];
    let cols = im2col(dy, g, h, wd);
    let xf = x.clone().reshape(&[b * h * wd, cin]);
    let dx = need_dx.then(|| matmul(&cols, w, false, false).reshape(&[b, h, wd, cin]));
    let dw = matmul(&cols, &xf, true, false);
    (dx, dw, bias_grad(dy, cout))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a reference.
    fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor, g: ConvGeom) -> Tensor {
        let [b, h, wd, c] = dims4(x);
        let cout = w.shape()[1];
        let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
        let k = g.kernel;
        let mut out = vec![0.0; b * oh * ow * cout];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = bias.data()[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xv = x.data()[((bi * h + iy as usize) * wd + ix as usize) * c + ci];
                                    acc += xv * w.data()[((ky * k + kx) * c + ci) * cout + co];
                                }
                            }
                        }
                        out[((bi * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
        Tensor::new(&[b, oh, ow, cout], out)
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 7919) % 23) as f64 * scale - 0.3)
    }

    #[test]
    fn conv_matches_naive_loops() {
        for &(stride, h) in &[(1, 5), (2, 6), (2, 5)] {
            let g = ConvGeom::new(3, stride, 1);
            let x = ramp(&[2, h, h, 3], 0.05);
            let w = ramp(&[27, 4], 0.03);
            let b = Tensor::new(&[4], vec![0.1, -0.2, 0.0, 0.3]);
            let fast = conv2d(&x, &w, &b, g);
            let slow = naive_conv(&x, &w, &b, g);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with zero bias, shared kernel.
        let g = ConvGeom::new(3, 2, 1);
        let x = ramp(&[1, 8, 8, 2], 0.02);
        let w = ramp(&[18, 3], 0.04);
        let zero3 = Tensor::zeros(&[3]);
        let zero2 = Tensor::zeros(&[2]);
        let cx = conv2d(&x, &w, &zero3, g);
        let y = ramp(cx.shape(), 0.07);
        let ty = conv_transpose2d(&y, &w, &zero2, g, 1);
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn output_sizes() {
        let g = ConvGeom::new(3, 2, 1);
        assert_eq!(g.conv_out(32), 16);
        assert_eq!(g.transpose_out(16, 1), 32);
        let g1 = ConvGeom::new(3, 1, 1);
        assert_eq!(g1.conv_out(32), 32);
        assert_eq!(g1.transpose_out(32, 0), 32);
    }
}
