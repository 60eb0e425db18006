//! Convolution forward/backward passes lowered onto the GEMM kernels.
//!
//! Layouts: activations `(N, C, H, W)`; conv kernels `(Co, Ci, kh, kw)`;
//! transposed-conv kernels `(Ci, Co, kh, kw)`. The transposed convolution
//! is implemented as the data-gradient of the matching convolution, so the
//! adjoint pairing holds exactly by construction.

use rayon::prelude::*;

use super::gemm::{col2im, gemm_nn, gemm_nt, im2col, PatchGeom};
use super::{Scalar, Shape};
use crate::error::{Error, Result};

/// Stride/dilation/zero-padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }

    /// "Same" padding for odd kernels at stride 1: `dilation*(k-1)/2`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn out_shape(&self, x: Shape, w: Shape) -> Result<Shape> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv stride and dilation must be >= 1".into(),
            ));
        }
        let span_h = self.dilation * (w.h - 1) + 1;
        let span_w = self.dilation * (w.w - 1) + 1;
        if x.h + 2 * self.padding < span_h || x.w + 2 * self.padding < span_w {
            return Err(Error::InvalidArgument(format!(
                "conv kernel {w} (dilation {}) exceeds padded input {x}",
                self.dilation
            )));
        }
        let oh = (x.h + 2 * self.padding - span_h) / self.stride + 1;
        let ow = (x.w + 2 * self.padding - span_w) / self.stride + 1;
        Ok(Shape::new(x.n, w.n, oh, ow))
    }

    fn geom(&self, x: Shape, w: Shape, y: Shape) -> PatchGeom {
        PatchGeom {
            channels: x.c,
            h: x.h,
            w: x.w,
            kh: w.h,
            kw: w.w,
            stride: self.stride,
            dilation: self.dilation,
            pad: self.padding,
            out_h: y.h,
            out_w: y.w,
        }
    }

    fn is_pointwise(&self, w: Shape) -> bool {
        w.h == 1 && w.w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Stride and zero-padding of a transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub padding: usize,
}

impl ConvTransposeSpec {
    pub fn out_shape(&self, x: Shape, w: Shape) -> Result<Shape> {
        if !(1..=2).contains(&self.stride) {
            return Err(Error::InvalidArgument(format!(
                "conv2d_transpose stride {} must be 1 or 2",
                self.stride
            )));
        }
        let oh = (x.h - 1) * self.stride + w.h;
        let ow = (x.w - 1) * self.stride + w.w;
        if oh < 2 * self.padding + 1 || ow < 2 * self.padding + 1 {
            return Err(Error::InvalidArgument(format!(
                "conv2d_transpose padding {} swallows the whole {x} output",
                self.padding
            )));
        }
        Ok(Shape::new(x.n, w.c, oh - 2 * self.padding, ow - 2 * self.padding))
    }

    /// Geometry of the underlying convolution `y_shape -> x_shape`.
    fn geom(&self, x: Shape, w: Shape, y: Shape) -> PatchGeom {
        PatchGeom {
            channels: w.c,
            h: y.h,
            w: y.w,
            kh: w.h,
            kw: w.w,
            stride: self.stride,
            dilation: 1,
            pad: self.padding,
            out_h: x.h,
            out_w: x.w,
        }
    }
}

/// `(Co, Ci, kh, kw)` reshaped to `(Ci*kh*kw, Co)`.
fn transpose_to_cols<S: Scalar>(w: &[S], ws: Shape) -> Vec<S> {
    let rows = ws.n;
    let cols = ws.c * ws.h * ws.w;
    let mut out = vec![S::ZERO; w.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = w[r * cols + c];
        }
    }
    out
}

pub fn conv2d_forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    w: &[S],
    ws: Shape,
    bias: Option<&[S]>,
    spec: ConvSpec,
    ys: Shape,
) -> Vec<S> {
    let g = spec.geom(xs, ws, ys);
    let (mm, kk, nn) = (ws.n, g.rows(), g.cols());
    let mut y = vec![S::ZERO; ys.len()];
    let x_img = xs.c * xs.h * xs.w;
    let y_img = ys.c * ys.h * ys.w;
    let run = |xi: &[S], yi: &mut [S]| {
        if spec.is_pointwise(ws) {
            gemm_nn(mm, kk, nn, w, xi, yi, xs.n == 1);
        } else {
            let mut cols = vec![S::ZERO; kk * nn];
            im2col(xi, &g, &mut cols);
            gemm_nn(mm, kk, nn, w, &cols, yi, xs.n == 1);
        }
        if let Some(b) = bias {
            for co in 0..ys.c {
                let bc = b[co];
                for v in &mut yi[co * g.cols()..(co + 1) * g.cols()] {
                    *v = *v + bc;
                }
            }
        }
    };
    if xs.n >= 2 {
        y.par_chunks_mut(y_img)
            .zip(x.par_chunks(x_img))
            .for_each(|(yi, xi)| run(xi, yi));
    } else {
        run(x, &mut y);
    }
    y
}

pub fn conv2d_backward_data<S: Scalar>(
    dy: &[S],
    ys: Shape,
    w: &[S],
    ws: Shape,
    xs: Shape,
    spec: ConvSpec,
) -> Vec<S> {
    let g = spec.geom(xs, ws, ys);
    let wt = transpose_to_cols(w, ws);
    let (mm, kk, nn) = (g.rows(), ws.n, g.cols());
    let mut dx = vec![S::ZERO; xs.len()];
    let x_img = xs.c * xs.h * xs.w;
    let y_img = ys.c * ys.h * ys.w;
    let run = |dyi: &[S], dxi: &mut [S]| {
        if spec.is_pointwise(ws) {
            gemm_nn(mm, kk, nn, &wt, dyi, dxi, xs.n == 1);
        } else {
            let mut cols = vec![S::ZERO; mm * nn];
            gemm_nn(mm, kk, nn, &wt, dyi, &mut cols, xs.n == 1);
            col2im(&cols, &g, dxi);
        }
    };
    if xs.n >= 2 {
        dx.par_chunks_mut(x_img)
            .zip(dy.par_chunks(y_img))
            .for_each(|(dxi, dyi)| run(dyi, dxi));
    } else {
        run(dy, &mut dx);
    }
    dx
}

pub fn conv2d_backward_weights<S: Scalar>(
    dy: &[S],
    ys: Shape,
    x: &[S],
    xs: Shape,
    ws: Shape,
    spec: ConvSpec,
) -> Vec<S> {
    let g = spec.geom(xs, ws, ys);
    let (mm, ll, nn) = (ws.n, g.cols(), g.rows());
    let x_img = xs.c * xs.h * xs.w;
    let y_img = ys.c * ys.h * ys.w;
    // per-image partials in parallel, reduced in fixed batch order
    let partials: Vec<Vec<S>> = (0..xs.n)
        .into_par_iter()
        .map(|b| {
            let xi = &x[b * x_img..(b + 1) * x_img];
            let dyi = &dy[b * y_img..(b + 1) * y_img];
            let mut dw = vec![S::ZERO; ws.len()];
            if spec.is_pointwise(ws) {
                gemm_nt(mm, ll, nn, dyi, xi, &mut dw);
            } else {
                let mut cols = vec![S::ZERO; nn * ll];
                im2col(xi, &g, &mut cols);
                gemm_nt(mm, ll, nn, dyi, &cols, &mut dw);
            }
            dw
        })
        .collect();
    let mut dw = vec![S::ZERO; ws.len()];
    for partial in &partials {
        for (d, &p) in dw.iter_mut().zip(partial) {
            *d = *d + p;
        }
    }
    dw
}

pub fn conv2d_transpose_forward<S: Scalar>(
    x: &[S],
    xs: Shape,
    w: &[S],
    ws: Shape,
    bias: Option<&[S]>,
    spec: ConvTransposeSpec,
    ys: Shape,
) -> Vec<S> {
    let g = spec.geom(xs, ws, ys);
    // kernel viewed as (Ci x Co*kh*kw), transposed to (Co*kh*kw x Ci)
    let wt = transpose_to_cols(w, ws);
    let (mm, kk, nn) = (g.rows(), xs.c, g.cols());
    let mut y = vec![S::ZERO; ys.len()];
    let x_img = xs.c * xs.h * xs.w;
    let y_img = ys.c * ys.h * ys.w;
    let run = |xi: &[S], yi: &mut [S]| {
        let mut cols = vec![S::ZERO; mm * nn];
        gemm_nn(mm, kk, nn, &wt, xi, &mut cols, xs.n == 1);
        col2im(&cols, &g, yi);
        if let Some(b) = bias {
            let plane = ys.h * ys.w;
            for co in 0..ys.c {
                let bc = b[co];
                for v in &mut yi[co * plane..(co + 1) * plane] {
                    *v = *v + bc;
                }
            }
        }
    };
    if xs.n >= 2 {
        y.par_chunks_mut(y_img)
            .zip(x.par_chunks(x_img))
            .for_each(|(yi, xi)| run(xi, yi));
    } else {
        run(x, &mut y);
    }
    y
}

pub fn conv2d_transpose_backward_data<S: Scalar>(
    dy: &[S],
    ys: Shape,
    w: &[S],
    ws: Shape,
    xs: Shape,
    spec: ConvTransposeSpec,
) -> Vec<S> {
    let g = spec.geom(xs, ws, ys);
    // plain convolution of dy with the kernel viewed as (Ci x Co*kh*kw)
    let (mm, kk, nn) = (xs.c, g.rows(), g.cols());
    let mut dx = vec![S::ZERO; xs.len()];
    let x_img = xs.c * xs.h * xs.w;
    let y_img = ys.c * ys.h * ys.w;
    let run = |dyi: &[S], dxi: &mut [S]| {
        let mut cols = vec![S::ZERO; kk * nn];
        im2col(dyi, &g, &mut cols);
        gemm_nn(mm, kk, nn, w, &cols, dxi, xs.n == 1);
    };
    if xs.n >= 2 {
        dx.par_chunks_mut(x_img)
            .zip(dy.par_chunks(y_img))
            .for_each(|(dxi, dyi)| run(dyi, dxi));
    } else {
        run(dy, &mut dx);
    }
    dx
}

pub fn conv2d_transpose_backward_weights<S: Scalar>(
    dy: &[S],
    ys: Shape,
    x: &[S],
    xs: Shape,
    ws: Shape,
    spec: ConvTransposeSpec,
) -> Vec<S> {
    let g = spec.geom(xs, ws, ys);
    let (mm, ll, nn) = (xs.c, g.cols(), g.rows());
    let x_img = xs.c * xs.h * xs.w;
    let y_img = ys.c * ys.h * ys.w;
    let partials: Vec<Vec<S>> = (0..xs.n)
        .into_par_iter()
        .map(|b| {
            let xi = &x[b * x_img..(b + 1) * x_img];
            let dyi = &dy[b * y_img..(b + 1) * y_img];
            let mut cols = vec![S::ZERO; nn * ll];
            im2col(dyi, &g, &mut cols);
            let mut dw = vec![S::ZERO; ws.len()];
            gemm_nt(mm, ll, nn, xi, &cols, &mut dw);
            dw
        })
        .collect();
    let mut dw = vec![S::ZERO; ws.len()];
    for partial in &partials {
        for (d, &p) in dw.iter_mut().zip(partial) {
            *d = *d + p;
        }
    }
    dw
}

/// Per-channel sums of a `(N, C, H, W)` tensor (bias gradients).
pub fn channel_sums<S: Scalar>(dy: &[S], ys: Shape) -> Vec<S> {
    let plane = ys.h * ys.w;
    let mut out = vec![S::ZERO; ys.c];
    for n in 0..ys.n {
        for c in 0..ys.c {
            let base = (n * ys.c + c) * plane;
            let mut acc = S::ZERO;
            for &v in &dy[base..base + plane] {
                acc = acc + v;
            }
            out[c] = out[c] + acc;
        }
    }
    out
}
