//! Direct (im2col-free) 2-D convolution kernels over `[H, W, C]` feature maps.
//!
//! Weights are laid out `[k, k, c_in, c_out]` so the innermost loop walks a
//! contiguous output-channel row.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn conv_out(&self) -> Option<(usize, usize)> {
        let h = self.in_h + 2 * self.pad;
        let w = self.in_w + 2 * self.pad;
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }

    pub fn transpose_out(&self) -> Option<(usize, usize)> {
        let h = (self.in_h - 1) * self.stride + self.kernel;
        let w = (self.in_w - 1) * self.stride + self.kernel;
        if h <= 2 * self.pad || w <= 2 * self.pad || self.stride == 0 {
            return None;
        }
        Some((h - 2 * self.pad, w - 2 * self.pad))
    }
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.conv_out().expect("validated geometry");
    let co = g.c_out;
    let mut out = vec![0.0; oh * ow * co];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
            o.copy_from_slice(b);
            for ky in 0..g.kernel {
                let Some(iy) = tap(oy, ky, g.stride, g.pad, g.in_h) else { continue };
                for kx in 0..g.kernel {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad, g.in_w) else { continue };
                    let xrow = &x[(iy * g.in_w + ix) * g.c_in..][..g.c_in];
                    let wbase = (ky * g.kernel + kx) * g.c_in * co;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &w[wbase + ci * co..][..co];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.conv_out().expect("validated geometry");
    let co = g.c_out;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &grad_out[(oy * ow + ox) * co..][..co];
            for (acc, &v) in gb.iter_mut().zip(go) {
                *acc += v;
            }
            for ky in 0..g.kernel {
                let Some(iy) = tap(oy, ky, g.stride, g.pad, g.in_h) else { continue };
                for kx in 0..g.kernel {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad, g.in_w) else { continue };
                    let xoff = (iy * g.in_w + ix) * g.c_in;
                    let wbase = (ky * g.kernel + kx) * g.c_in * co;
                    for ci in 0..g.c_in {
                        let xv = x[xoff + ci];
                        let wrow = &w[wbase + ci * co..][..co];
                        let gwrow = &mut gw[wbase + ci * co..][..co];
                        let mut sx = 0.0;
                        for k in 0..co {
                            sx += go[k] * wrow[k];
                            gwrow[k] += go[k] * xv;
                        }
                        gx[xoff + ci] += sx;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub fn conv_transpose2d_forward(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.transpose_out().expect("validated geometry");
    let co = g.c_out;
    let mut out = vec![0.0; oh * ow * co];
    for chunk in out.chunks_mut(co) {
        chunk.copy_from_slice(b);
    }
    for iy in 0..g.in_h {
        for ix in 0..g.in_w {
            let xrow = &x[(iy * g.in_w + ix) * g.c_in..][..g.c_in];
            for ky in 0..g.kernel {
                let Some(oy) = tap(iy, ky, g.stride, g.pad, oh) else { continue };
                for kx in 0..g.kernel {
                    let Some(ox) = tap(ix, kx, g.stride, g.pad, ow) else { continue };
                    let o = &mut out[(oy * ow + ox) * co..][..co];
                    let wbase = (ky * g.kernel + kx) * g.c_in * co;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &w[wbase + ci * co..][..co];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.transpose_out().expect("validated geometry");
    let co = g.c_out;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    for go in grad_out.chunks(co) {
        for (acc, &v) in gb.iter_mut().zip(go) {
            *acc += v;
        }
    }
    for iy in 0..g.in_h {
        for ix in 0..g.in_w {
            let xoff = (iy * g.in_w + ix) * g.c_in;
            for ky in 0..g.kernel {
                let Some(oy) = tap(iy, ky, g.stride, g.pad, oh) else { continue };
                for kx in 0..g.kernel {
                    let Some(ox) = tap(ix, kx, g.stride, g.pad, ow) else { continue };
                    let go = &grad_out[(oy * ow + ox) * co..][..co];
                    let wbase = (ky * g.kernel + kx) * g.c_in * co;
                    for ci in 0..g.c_in {
                        let xv = x[xoff + ci];
                        let wrow = &w[wbase + ci * co..][..co];
                        let gwrow = &mut gw[wbase + ci * co..][..co];
                        let mut sx = 0.0;
                        for k in 0..co {
                            sx += go[k] * wrow[k];
                            gwrow[k] += go[k] * xv;
                        }
                        gx[xoff + ci] += sx;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
