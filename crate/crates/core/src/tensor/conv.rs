//! im2col-based 2-D cross-correlation with zero padding.

use serde::{Deserialize, Serialize};

use super::kernels::{gemm, gemm_nt, gemm_tn};
use crate::error::{Error, Result};

/// Stride and per-axis zero padding of a convolution. Dilation is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry {
            stride,
            pad_h: padding,
            pad_w: padding,
        }
    }

    pub fn with_padding(stride: usize, pad_h: usize, pad_w: usize) -> Self {
        ConvGeometry {
            stride,
            pad_h,
            pad_w,
        }
    }

    /// Output spatial size for an `h×w` input and `kh×kw` kernel.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * self.pad_h, w + 2 * self.pad_w);
        if kh > ph || kw > pw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}

/// Shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(x: &[usize], k: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected 4-D input and kernel, got {x:?} and {k:?}"),
            ));
        }
        if x[1] != k[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", x[1], k[1]),
            ));
        }
        let (oh, ow) = geom.output_size(x[2], x[3], k[2], k[3])?;
        Ok(ConvDims {
            n: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: k[0],
            kh: k[2],
            kw: k[3],
            oh,
            ow,
            geom,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    /// Input coordinate hit by output (oy, ox) and kernel tap (ky, kx), if inside.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.geom.stride + ky).checked_sub(self.geom.pad_h)?;
        let x = (ox * self.geom.stride + kx).checked_sub(self.geom.pad_w)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Unfolds one image into a (C_in·kh·kw)×(oh·ow) column matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let positions = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row * positions + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => image[(c * self.h + y) * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let positions = self.positions();
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                image[(c * self.h + y) * self.w + x] += cols[row * positions + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (patch, positions) = (d.patch(), d.positions());
    let mut out = vec![0.0; d.n * d.c_out * positions];
    let mut cols = vec![0.0; patch * positions];
    let image_len = d.c_in * d.h * d.w;
    for (i, out_n) in out.chunks_mut(d.c_out * positions).enumerate() {
        d.im2col(&x[i * image_len..(i + 1) * image_len], &mut cols);
        gemm(k, &cols, out_n, d.c_out, patch, positions);
    }
    out
}

/// Gradients w.r.t. input and kernel; either may be skipped.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (patch, positions) = (d.patch(), d.positions());
    let image_len = d.c_in * d.h * d.w;
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gk = want_k.then(|| vec![0.0; k.len()]);
    let mut cols = vec![0.0; patch * positions];
    let mut dcols = vec![0.0; patch * positions];
    for i in 0..d.n {
        let g = &grad_out[i * d.c_out * positions..(i + 1) * d.c_out * positions];
        if let Some(gk) = gk.as_mut() {
            d.im2col(&x[i * image_len..(i + 1) * image_len], &mut cols);
            gemm_nt(g, &cols, gk, d.c_out, positions, patch);
        }
        if let Some(gx) = gx.as_mut() {
            dcols.fill(0.0);
            gemm_tn(k, g, &mut dcols, patch, d.c_out, positions);
            d.col2im(&dcols, &mut gx[i * image_len..(i + 1) * image_len]);
        }
    }
    (gx, gk)
}
