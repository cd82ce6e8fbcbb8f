//! Cross-correlation kernels (no kernel flip) lowered to GEMM via im2col.

use super::gemm::{gemm, Layout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeom> {
        let [n, c, h, w] = *input else {
            return Err(Error::dim(
                "conv2d",
                format!("input must be NCHW, got {input:?}"),
            ));
        };
        let [oc, kc, kh, kw] = *kernel else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be (OC, C, k, k), got {kernel:?}"),
            ));
        };
        if kc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input axis 1 (C={c}) != kernel axis 1 (C={kc})"),
            ));
        }
        if kh != kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel axes 2 and 3 must match, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let k = kh;
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input axes 2,3 ({h}x{w}, pad {padding})"),
            ));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            oc,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.oc, self.oh, self.ow]
    }
}

/// Unfolds one image (C×H×W) into a (C·k·k)×(OH·OW) column matrix.
/// Output columns `lo..hi` whose input column `ox * stride + kj - padding`
/// lies inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let s = g.stride;
    let lo = g.padding.saturating_sub(kj).div_ceil(s);
    let hi = if g.w + g.padding > kj {
        ((g.w + g.padding - kj - 1) / s + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for ch in 0..g.c {
        let src = &image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let first = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            for (v, x) in line[lo..hi].iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                                *v = *x;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back, accumulating into the image gradient.
fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for ch in 0..g.c {
        let dst = &mut image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.padding;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, v) in dst_row[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let kl = g.patch_len();
    let in_image = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.oc * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kl * plane]
    };
    for n in 0..g.n {
        let image = &input[n * in_image..(n + 1) * in_image];
        let b: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(
            g.oc,
            kl,
            plane,
            kernel,
            Layout::row_major(kl),
            b,
            Layout::row_major(plane),
            0.0,
            &mut out[n * g.oc * plane..(n + 1) * g.oc * plane],
        );
    }
    out
}

/// Accumulates kernel and (optionally) input gradients for an incoming
/// output gradient.
pub(crate) fn backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let kl = g.patch_len();
    let in_image = g.c * g.h * g.w;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kl * plane]
    };
    let mut dcols = if g.is_pointwise() || grad_input.is_none() {
        Vec::new()
    } else {
        vec![0.0; kl * plane]
    };
    let mut grad_input = grad_input;
    let mut grad_kernel = grad_kernel;
    for n in 0..g.n {
        let dy = &grad_out[n * g.oc * plane..(n + 1) * g.oc * plane];
        if let Some(dk) = grad_kernel.as_deref_mut() {
            let image = &input[n * in_image..(n + 1) * in_image];
            let b: &[f64] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dK (OC×KL) += dY (OC×P) · colsᵀ (P×KL)
            gemm(
                g.oc,
                plane,
                kl,
                dy,
                Layout::row_major(plane),
                b,
                Layout::transposed(plane),
                1.0,
                dk,
            );
        }
        if let Some(dx) = grad_input.as_deref_mut() {
            let dx_image = &mut dx[n * in_image..(n + 1) * in_image];
            // dcols (KL×P) = Kᵀ (KL×OC) · dY (OC×P)
            if g.is_pointwise() {
                gemm(
                    kl,
                    g.oc,
                    plane,
                    kernel,
                    Layout::transposed(kl),
                    dy,
                    Layout::row_major(plane),
                    1.0,
                    dx_image,
                );
            } else {
                gemm(
                    kl,
                    g.oc,
                    plane,
                    kernel,
                    Layout::transposed(kl),
                    dy,
                    Layout::row_major(plane),
                    0.0,
                    &mut dcols,
                );
                col2im(g, &dcols, dx_image);
            }
        }
    }
}
