//! Receptive-field computation: an analytic recurrence over layer specs and
//! an independent impulse-probe measurement through the real conv kernels.

use super::{ConvSpec, ConvTransposeSpec, Scalar, Shape, Tape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Elementwise,
}

/// Spatial behaviour of one layer, enough to derive its receptive field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel: (kernel, kernel),
            stride,
            dilation,
            padding,
        }
    }

    pub fn conv_transpose(kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ConvTranspose,
            kernel: (kernel, kernel),
            stride,
            dilation: 1,
            padding,
        }
    }

    pub fn elementwise() -> Self {
        LayerSpec {
            kind: LayerKind::Elementwise,
            kernel: (1, 1),
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

/// Exact nonnegative rational, for jumps that pass through fractional
/// strides in transposed-conv layers.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    fn one() -> Self {
        Ratio { num: 1, den: 1 }
    }

    fn reduce(mut self) -> Self {
        let g = gcd(self.num, self.den);
        self.num /= g;
        self.den /= g;
        self
    }

    fn mul_int(self, k: u64) -> Self {
        Ratio {
            num: self.num * k,
            den: self.den,
        }
        .reduce()
    }

    fn div_int(self, k: u64) -> Self {
        Ratio {
            num: self.num,
            den: self.den * k,
        }
        .reduce()
    }

    fn add(self, other: Ratio) -> Self {
        Ratio {
            num: self.num * other.den + other.num * self.den,
            den: self.den * other.den,
        }
        .reduce()
    }

    fn ceil(self) -> u64 {
        self.num.div_ceil(self.den)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Receptive field of the final output, per axis, in input pixels.
///
/// The recurrence tracks the spacing (`jump`) of the current grid in input
/// pixels: a convolution adds `(k-1)*dilation*jump` and multiplies the jump
/// by its stride; a transposed convolution adds `floor((k-1)/stride)*jump`
/// (the span of coarse taps feeding one fine output) and divides the jump.
pub fn receptive_field(layers: &[LayerSpec]) -> (usize, usize) {
    let mut rf = [Ratio::one(), Ratio::one()];
    let mut jump = [Ratio::one(), Ratio::one()];
    for layer in layers {
        let k = [layer.kernel.0 as u64, layer.kernel.1 as u64];
        for axis in 0..2 {
            match layer.kind {
                LayerKind::Conv => {
                    let grow = jump[axis].mul_int((k[axis] - 1) * layer.dilation as u64);
                    rf[axis] = rf[axis].add(grow);
                    jump[axis] = jump[axis].mul_int(layer.stride as u64);
                }
                LayerKind::ConvTranspose => {
                    let taps = (k[axis] - 1) / layer.stride as u64;
                    rf[axis] = rf[axis].add(jump[axis].mul_int(taps));
                    jump[axis] = jump[axis].div_int(layer.stride as u64);
                }
                LayerKind::Elementwise => {}
            }
        }
    }
    (rf[0].ceil() as usize, rf[1].ceil() as usize)
}

/// Measures the receptive field empirically: runs a single-channel probe
/// network with all-ones kernels through the real conv operators, seeds a
/// gradient of 1 at the centre output pixel, backpropagates, and returns
/// the bounding box of nonzero input gradient.
///
/// `input_hw` must be large enough to contain the footprint; the analytic
/// value plus a margin is a suitable choice.
pub fn impulse_footprint(layers: &[LayerSpec], input_hw: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = input_hw;
    let mut tape: Tape<f64> = Tape::new();
    let input = tape.leaf(Shape::new(1, 1, h, w), vec![1.0; h * w], true)?;
    let mut cur = input;
    for layer in layers {
        cur = match layer.kind {
            LayerKind::Conv => {
                let (kh, kw) = layer.kernel;
                let kernel = tape.constant_ones_kernel(kh, kw, false)?;
                tape.conv2d(
                    cur,
                    kernel,
                    None,
                    ConvSpec {
                        stride: layer.stride,
                        dilation: layer.dilation,
                        padding: layer.padding,
                    },
                )?
            }
            LayerKind::ConvTranspose => {
                let (kh, kw) = layer.kernel;
                let kernel = tape.constant_ones_kernel(kh, kw, true)?;
                tape.conv2d_transpose(
                    cur,
                    kernel,
                    None,
                    ConvTransposeSpec {
                        stride: layer.stride,
                        padding: layer.padding,
                    },
                )?
            }
            LayerKind::Elementwise => cur,
        };
    }
    let out = cur.shape;
    if out.h == 0 || out.w == 0 {
        return Err(Error::InvalidArgument(
            "probe input too small for the layer stack".into(),
        ));
    }
    // one-hot mask at the centre output position
    let mut mask = vec![0.0; out.len()];
    mask[(out.h / 2) * out.w + out.w / 2] = 1.0;
    let mask = tape.constant(out, mask)?;
    let loss = tape.masked_sum(cur, mask)?;
    let grads = tape.backward(loss)?;
    let g = grads
        .get(input)
        .ok_or_else(|| Error::Numeric("probe input received no gradient".into()))?;

    let (mut ymin, mut ymax, mut xmin, mut xmax) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] != 0.0 {
                ymin = ymin.min(y);
                ymax = ymax.max(y);
                xmin = xmin.min(x);
                xmax = xmax.max(x);
            }
        }
    }
    if ymin == usize::MAX {
        return Err(Error::Numeric("impulse probe found an empty footprint".into()));
    }
    if ymin == 0 || xmin == 0 || ymax == h - 1 || xmax == w - 1 {
        return Err(Error::InvalidArgument(format!(
            "probe footprint touches the {h}x{w} input border; enlarge the probe input"
        )));
    }
    Ok((ymax - ymin + 1, xmax - xmin + 1))
}

impl<S: Scalar> Tape<S> {
    fn constant_ones_kernel(&mut self, kh: usize, kw: usize, transpose: bool) -> Result<super::Tensor> {
        // conv kernels are (Co, Ci, kh, kw); transposed kernels (Ci, Co, kh, kw);
        // for the 1-channel probe both collapse to (1, 1, kh, kw)
        let _ = transpose;
        self.constant(Shape::new(1, 1, kh, kw), vec![S::ONE; kh * kw])
    }
}
