//! Reverse-mode automatic differentiation over dense 4D tensors, with
//! exactly the operator set the dual-domain network needs.
//!
//! A [`Tape`] owns every tensor produced during one forward recording;
//! [`Tensor`] is a cheap handle into it. Training runs in `f32`; the same
//! code instantiates with `f64` for verification-grade gradient checks.
//! Results are bit-deterministic for a fixed input regardless of thread
//! count: every accumulation has a fixed serial order.

mod conv;
mod gemm;
mod rf;

pub use conv::{ConvSpec, ConvTransposeSpec};
pub use rf::{impulse_footprint, receptive_field, LayerKind, LayerSpec};

use crate::error::{Error, Result};
use crate::jpeg;

/// Element type of a tape: `f32` for training, `f64` for verification.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f32::mul_add(self, a, b)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn mul_add(self, a: Self, b: Self) -> Self {
        f64::mul_add(self, a, b)
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Tensor extent in `(batch, channels, height, width)` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Tensor {
    id: usize,
    pub shape: Shape,
}

struct Buf<S> {
    vals: Vec<S>,
    shape: Shape,
    needs_grad: bool,
}

#[derive(Debug, Clone)]
enum Node {
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        y: usize,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        y: usize,
        spec: ConvTransposeSpec,
    },
    Prelu {
        x: usize,
        slope: usize,
        y: usize,
    },
    Add {
        a: usize,
        b: usize,
        y: usize,
    },
    Affine {
        x: usize,
        y: usize,
        mul: f64,
    },
    Scale {
        x: usize,
        s: usize,
        y: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
        y: usize,
    },
    AvgPool {
        x: usize,
        y: usize,
        factor: usize,
    },
    Mse {
        a: usize,
        b: usize,
        y: usize,
    },
    MaskedSum {
        x: usize,
        mask: usize,
        y: usize,
    },
    BlockIdct {
        x: usize,
        y: usize,
    },
    Dru {
        x: usize,
        lo: usize,
        hi: usize,
        y: usize,
    },
}

/// Wengert list: forward values plus the backward records.
pub struct Tape<S: Scalar> {
    bufs: Vec<Buf<S>>,
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

/// Gradients keyed by tensor handle, produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `t`; `None` if `t` is disconnected.
    pub fn get(&self, t: Tensor) -> Option<&[S]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that skips backward records; forward-only inference.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn value(&self, t: Tensor) -> &[S] {
        &self.bufs[t.id].vals
    }

    pub fn value_f64(&self, t: Tensor) -> Vec<f64> {
        self.bufs[t.id].vals.iter().map(|v| v.to_f64()).collect()
    }

    fn check_finite(vals: &[S], op: &str) -> Result<()> {
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{op} produced a non-finite value")));
        }
        Ok(())
    }

    fn push(&mut self, vals: Vec<S>, shape: Shape, needs_grad: bool) -> Tensor {
        debug_assert_eq!(vals.len(), shape.len());
        let id = self.bufs.len();
        self.bufs.push(Buf {
            vals,
            shape,
            needs_grad,
        });
        Tensor { id, shape }
    }

    fn needs(&self, t: Tensor) -> bool {
        self.grad_enabled && self.bufs[t.id].needs_grad
    }

    /// Introduces a leaf tensor. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, shape: Shape, vals: Vec<S>, requires_grad: bool) -> Result<Tensor> {
        if vals.len() != shape.len() {
            return Err(Error::InvalidArgument(format!(
                "leaf data length {} does not match shape {shape}",
                vals.len()
            )));
        }
        Self::check_finite(&vals, "leaf")?;
        Ok(self.push(vals, shape, self.grad_enabled && requires_grad))
    }

    /// A leaf that never receives gradient (inputs, targets, boxes).
    pub fn constant(&mut self, shape: Shape, vals: Vec<S>) -> Result<Tensor> {
        self.leaf(shape, vals, false)
    }

    pub fn constant_f64(&mut self, shape: Shape, vals: &[f64]) -> Result<Tensor> {
        let vals = vals.iter().map(|&v| S::from_f64(v)).collect();
        self.constant(shape, vals)
    }

    pub fn scalar_leaf(&mut self, v: S, requires_grad: bool) -> Result<Tensor> {
        self.leaf(Shape::scalar(), vec![v], requires_grad)
    }

    /// 2D cross-correlation with stride, dilation, and zero padding.
    /// `x` is `(N, Ci, H, W)`, `weight` `(Co, Ci, kh, kw)`, `bias` `(1, Co, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        spec: ConvSpec,
    ) -> Result<Tensor> {
        let (xs, ws) = (x.shape, weight.shape);
        if xs.c != ws.c {
            return Err(Error::InvalidArgument(format!(
                "conv2d input {xs} and kernel {ws} disagree on channels"
            )));
        }
        if let Some(b) = bias {
            if b.shape != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::InvalidArgument(format!(
                    "conv2d bias {} must be 1x{}x1x1",
                    b.shape, ws.n
                )));
            }
        }
        let out_shape = spec.out_shape(xs, ws)?;
        let vals = conv::conv2d_forward(
            &self.bufs[x.id].vals,
            xs,
            &self.bufs[weight.id].vals,
            ws,
            bias.map(|b| self.bufs[b.id].vals.as_slice()),
            spec,
            out_shape,
        );
        Self::check_finite(&vals, "conv2d")?;
        let needs = self.needs(x) || self.needs(weight) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let y = self.push(vals, out_shape, needs);
        if needs {
            self.nodes.push(Node::Conv2d {
                x: x.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                y: y.id,
                spec,
            });
        }
        Ok(y)
    }

    /// Transposed convolution (upsampling); the exact adjoint of a
    /// [`Tape::conv2d`] with the same kernel, stride, and padding.
    /// `x` is `(N, Ci, H, W)`, `weight` `(Ci, Co, kh, kw)`.
    pub fn conv2d_transpose(
        &mut self,
        x: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        spec: ConvTransposeSpec,
    ) -> Result<Tensor> {
        let (xs, ws) = (x.shape, weight.shape);
        if xs.c != ws.n {
            return Err(Error::InvalidArgument(format!(
                "conv2d_transpose input {xs} and kernel {ws} disagree on channels"
            )));
        }
        if let Some(b) = bias {
            if b.shape != Shape::new(1, ws.c, 1, 1) {
                return Err(Error::InvalidArgument(format!(
                    "conv2d_transpose bias {} must be 1x{}x1x1",
                    b.shape, ws.c
                )));
            }
        }
        let out_shape = spec.out_shape(xs, ws)?;
        let vals = conv::conv2d_transpose_forward(
            &self.bufs[x.id].vals,
            xs,
            &self.bufs[weight.id].vals,
            ws,
            bias.map(|b| self.bufs[b.id].vals.as_slice()),
            spec,
            out_shape,
        );
        Self::check_finite(&vals, "conv2d_transpose")?;
        let needs = self.needs(x) || self.needs(weight) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let y = self.push(vals, out_shape, needs);
        if needs {
            self.nodes.push(Node::ConvTranspose2d {
                x: x.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                y: y.id,
                spec,
            });
        }
        Ok(y)
    }

    /// Parametric ReLU with one learnable slope per channel, `(1, C, 1, 1)`.
    pub fn prelu(&mut self, x: Tensor, slope: Tensor) -> Result<Tensor> {
        if slope.shape != Shape::new(1, x.shape.c, 1, 1) {
            return Err(Error::InvalidArgument(format!(
                "prelu slope {} must be 1x{}x1x1",
                slope.shape, x.shape.c
            )));
        }
        let plane = x.shape.h * x.shape.w;
        let xv = &self.bufs[x.id].vals;
        let sv = &self.bufs[slope.id].vals;
        let mut vals = Vec::with_capacity(xv.len());
        for n in 0..x.shape.n {
            for c in 0..x.shape.c {
                let a = sv[c];
                let base = (n * x.shape.c + c) * plane;
                vals.extend(xv[base..base + plane].iter().map(|&v| {
                    if v >= S::ZERO {
                        v
                    } else {
                        a * v
                    }
                }));
            }
        }
        Self::check_finite(&vals, "prelu")?;
        let needs = self.needs(x) || self.needs(slope);
        let y = self.push(vals, x.shape, needs);
        if needs {
            self.nodes.push(Node::Prelu {
                x: x.id,
                slope: slope.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::InvalidArgument(format!(
                "add shapes disagree: {} vs {}",
                a.shape, b.shape
            )));
        }
        let vals: Vec<S> = self.bufs[a.id]
            .vals
            .iter()
            .zip(&self.bufs[b.id].vals)
            .map(|(&x, &y)| x + y)
            .collect();
        Self::check_finite(&vals, "add")?;
        let needs = self.needs(a) || self.needs(b);
        let y = self.push(vals, a.shape, needs);
        if needs {
            self.nodes.push(Node::Add {
                a: a.id,
                b: b.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    /// Elementwise `mul*x + add` with compile-time constants (used for
    /// normalization and fixed loss weights).
    pub fn affine(&mut self, x: Tensor, mul: f64, add: f64) -> Result<Tensor> {
        let (m, a) = (S::from_f64(mul), S::from_f64(add));
        let vals: Vec<S> = self.bufs[x.id].vals.iter().map(|&v| v.mul_add(m, a)).collect();
        Self::check_finite(&vals, "affine")?;
        let needs = self.needs(x);
        let y = self.push(vals, x.shape, needs);
        if needs {
            self.nodes.push(Node::Affine {
                x: x.id,
                y: y.id,
                mul,
            });
        }
        Ok(y)
    }

    /// Multiplies a tensor by a learnable scalar tensor (differentiable in
    /// both arguments).
    pub fn scale(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        if s.shape != Shape::scalar() {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be a scalar tensor, got {}",
                s.shape
            )));
        }
        let sv = self.bufs[s.id].vals[0];
        let vals: Vec<S> = self.bufs[x.id].vals.iter().map(|&v| v * sv).collect();
        Self::check_finite(&vals, "scale")?;
        let needs = self.needs(x) || self.needs(s);
        let y = self.push(vals, x.shape, needs);
        if needs {
            self.nodes.push(Node::Scale {
                x: x.id,
                s: s.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    pub fn concat_channels(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::InvalidArgument(format!(
                "concat_channels spatial/batch dims disagree: {sa} vs {sb}"
            )));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let plane = sa.h * sa.w;
        let mut vals = Vec::with_capacity(shape.len());
        for n in 0..sa.n {
            let av = &self.bufs[a.id].vals[n * sa.c * plane..(n + 1) * sa.c * plane];
            let bv = &self.bufs[b.id].vals[n * sb.c * plane..(n + 1) * sb.c * plane];
            vals.extend_from_slice(av);
            vals.extend_from_slice(bv);
        }
        let needs = self.needs(a) || self.needs(b);
        let y = self.push(vals, shape, needs);
        if needs {
            self.nodes.push(Node::ConcatChannels {
                a: a.id,
                b: b.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&mut self, x: Tensor, factor: usize) -> Result<Tensor> {
        let s = x.shape;
        if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool factor {factor} does not divide {s}"
            )));
        }
        if factor == 1 {
            // identity; still recorded through the affine path for grads
            return self.affine(x, 1.0, 0.0);
        }
        let (oh, ow) = (s.h / factor, s.w / factor);
        let shape = Shape::new(s.n, s.c, oh, ow);
        let inv = S::from_f64(1.0 / (factor * factor) as f64);
        let xv = &self.bufs[x.id].vals;
        let mut vals = Vec::with_capacity(shape.len());
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.h * s.w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = S::ZERO;
                        for dy in 0..factor {
                            let row = base + (oy * factor + dy) * s.w + ox * factor;
                            for dx in 0..factor {
                                acc = acc + xv[row + dx];
                            }
                        }
                        vals.push(acc * inv);
                    }
                }
            }
        }
        Self::check_finite(&vals, "avg_pool")?;
        let needs = self.needs(x);
        let y = self.push(vals, shape, needs);
        if needs {
            self.nodes.push(Node::AvgPool {
                x: x.id,
                y: y.id,
                factor,
            });
        }
        Ok(y)
    }

    /// Mean squared error over all elements; returns a scalar tensor.
    pub fn mse(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::InvalidArgument(format!(
                "mse shapes disagree: {} vs {}",
                a.shape, b.shape
            )));
        }
        let inv = 1.0 / a.shape.len() as f64;
        let sum: f64 = self.bufs[a.id]
            .vals
            .iter()
            .zip(&self.bufs[b.id].vals)
            .map(|(&x, &y)| {
                let d = (x - y).to_f64();
                d * d
            })
            .sum();
        let vals = vec![S::from_f64(sum * inv)];
        Self::check_finite(&vals, "mse")?;
        let needs = self.needs(a) || self.needs(b);
        let y = self.push(vals, Shape::scalar(), needs);
        if needs {
            self.nodes.push(Node::Mse {
                a: a.id,
                b: b.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    /// Weighted sum `sum(x * mask)` against a constant mask; scalar output.
    pub fn masked_sum(&mut self, x: Tensor, mask: Tensor) -> Result<Tensor> {
        if x.shape != mask.shape {
            return Err(Error::InvalidArgument(format!(
                "masked_sum shapes disagree: {} vs {}",
                x.shape, mask.shape
            )));
        }
        let sum: f64 = self.bufs[x.id]
            .vals
            .iter()
            .zip(&self.bufs[mask.id].vals)
            .map(|(&v, &m)| v.to_f64() * m.to_f64())
            .sum();
        let vals = vec![S::from_f64(sum)];
        Self::check_finite(&vals, "masked_sum")?;
        let needs = self.needs(x);
        let y = self.push(vals, Shape::scalar(), needs);
        if needs {
            self.nodes.push(Node::MaskedSum {
                x: x.id,
                mask: mask.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    /// Fixed blockwise inverse DCT layer: `(N, 64, bh, bw)` coefficient
    /// channels to `(N, 1, 8bh, 8bw)` pixels, including the +128 level
    /// shift. Backward applies the forward DCT (orthonormal adjoint).
    pub fn block_idct(&mut self, x: Tensor) -> Result<Tensor> {
        let s = x.shape;
        if s.c != 64 {
            return Err(Error::InvalidArgument(format!(
                "block_idct expects 64 coefficient channels, got {s}"
            )));
        }
        let shape = Shape::new(s.n, 1, s.h * 8, s.w * 8);
        let mut vals = vec![S::ZERO; shape.len()];
        let xv = &self.bufs[x.id].vals;
        let plane = s.h * s.w;
        let (oh, ow) = (shape.h, shape.w);
        for n in 0..s.n {
            for by in 0..s.h {
                for bx in 0..s.w {
                    let mut coeffs = [0.0f64; 64];
                    for (c, cv) in coeffs.iter_mut().enumerate() {
                        *cv = xv[(n * 64 + c) * plane + by * s.w + bx].to_f64();
                    }
                    let mut block = [0.0f64; 64];
                    jpeg::inverse_block_f64(&coeffs, &mut block);
                    for y in 0..8 {
                        for xq in 0..8 {
                            vals[n * oh * ow + (by * 8 + y) * ow + bx * 8 + xq] =
                                S::from_f64(block[y * 8 + xq] + 128.0);
                        }
                    }
                }
            }
        }
        Self::check_finite(&vals, "block_idct")?;
        let needs = self.needs(x);
        let y = self.push(vals, shape, needs);
        if needs {
            self.nodes.push(Node::BlockIdct { x: x.id, y: y.id });
        }
        Ok(y)
    }

    /// Coefficient rectification: clamps `x` elementwise into the constant
    /// box `[lo, hi]`. Gradient passes through inside the box (inclusive)
    /// and is zero outside.
    pub fn dru(&mut self, x: Tensor, lo: Tensor, hi: Tensor) -> Result<Tensor> {
        if x.shape != lo.shape || x.shape != hi.shape {
            return Err(Error::InvalidArgument(format!(
                "dru shapes disagree: x {} lo {} hi {}",
                x.shape, lo.shape, hi.shape
            )));
        }
        let vals: Vec<S> = self.bufs[x.id]
            .vals
            .iter()
            .zip(self.bufs[lo.id].vals.iter().zip(&self.bufs[hi.id].vals))
            .map(|(&v, (&l, &h))| {
                if v < l {
                    l
                } else if v > h {
                    h
                } else {
                    v
                }
            })
            .collect();
        Self::check_finite(&vals, "dru")?;
        let needs = self.needs(x);
        let y = self.push(vals, x.shape, needs);
        if needs {
            self.nodes.push(Node::Dru {
                x: x.id,
                lo: lo.id,
                hi: hi.id,
                y: y.id,
            });
        }
        Ok(y)
    }

    /// Smallest distance of any recorded piecewise-linear operation to its
    /// kink: `|x|` for PReLU inputs, distance to the clamp boundary for
    /// rectifier inputs. Finite-difference gradient checks require this
    /// clearance to exceed the step times the local slope, otherwise the
    /// secant straddles two linear pieces.
    pub fn kink_clearance(&self) -> f64 {
        let (p, d) = self.kink_clearances();
        p.min(d)
    }

    /// Separate clearances: (PReLU, rectifier).
    pub fn kink_clearances(&self) -> (f64, f64) {
        let mut prelu = f64::INFINITY;
        let mut dru = f64::INFINITY;
        for node in &self.nodes {
            match *node {
                Node::Prelu { x, .. } => {
                    for &v in &self.bufs[x].vals {
                        prelu = prelu.min(v.to_f64().abs());
                    }
                }
                Node::Dru { x, lo, hi, .. } => {
                    let xv = &self.bufs[x].vals;
                    let lv = &self.bufs[lo].vals;
                    let hv = &self.bufs[hi].vals;
                    for i in 0..xv.len() {
                        let v = xv[i].to_f64();
                        dru = dru
                            .min((v - lv[i].to_f64()).abs())
                            .min((v - hv[i].to_f64()).abs());
                    }
                }
                _ => {}
            }
        }
        (prelu, dru)
    }

    /// Reverse pass from a scalar loss. Consumes the recording: a second
    /// call on the same tape is a usage error.
    pub fn backward(&mut self, loss: Tensor) -> Result<Gradients<S>> {
        if loss.shape != Shape::scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got {}",
                loss.shape
            )));
        }
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward on an inference tape".into(),
            ));
        }
        if self.consumed {
            return Err(Error::InvalidArgument(
                "tape already consumed by a previous backward pass".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<S>>> = (0..self.bufs.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![S::ONE]);

        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            self.backward_node(node, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_buf<'g>(
        grads: &'g mut [Option<Vec<S>>],
        id: usize,
        len: usize,
    ) -> &'g mut Vec<S> {
        grads[id].get_or_insert_with(|| vec![S::ZERO; len])
    }

    fn backward_node(&self, node: &Node, grads: &mut [Option<Vec<S>>]) {
        match *node {
            Node::Conv2d { x, w, b, y, spec } => {
                let Some(dy) = grads[y].take() else { return };
                let xs = self.bufs[x].shape;
                let ws = self.bufs[w].shape;
                let ys = self.bufs[y].shape;
                if self.bufs[x].needs_grad {
                    let dx = conv::conv2d_backward_data(&dy, ys, &self.bufs[w].vals, ws, xs, spec);
                    axpy(Self::grad_buf(grads, x, xs.len()), &dx);
                }
                if self.bufs[w].needs_grad {
                    let dw = conv::conv2d_backward_weights(&dy, ys, &self.bufs[x].vals, xs, ws, spec);
                    axpy(Self::grad_buf(grads, w, ws.len()), &dw);
                }
                if let Some(b) = b {
                    if self.bufs[b].needs_grad {
                        let db = conv::channel_sums(&dy, ys);
                        axpy(Self::grad_buf(grads, b, ys.c), &db);
                    }
                }
            }
            Node::ConvTranspose2d { x, w, b, y, spec } => {
                let Some(dy) = grads[y].take() else { return };
                let xs = self.bufs[x].shape;
                let ws = self.bufs[w].shape;
                let ys = self.bufs[y].shape;
                if self.bufs[x].needs_grad {
                    let dx =
                        conv::conv2d_transpose_backward_data(&dy, ys, &self.bufs[w].vals, ws, xs, spec);
                    axpy(Self::grad_buf(grads, x, xs.len()), &dx);
                }
                if self.bufs[w].needs_grad {
                    let dw = conv::conv2d_transpose_backward_weights(
                        &dy,
                        ys,
                        &self.bufs[x].vals,
                        xs,
                        ws,
                        spec,
                    );
                    axpy(Self::grad_buf(grads, w, ws.len()), &dw);
                }
                if let Some(b) = b {
                    if self.bufs[b].needs_grad {
                        let db = conv::channel_sums(&dy, ys);
                        axpy(Self::grad_buf(grads, b, ys.c), &db);
                    }
                }
            }
            Node::Prelu { x, slope, y } => {
                let Some(dy) = grads[y].take() else { return };
                let s = self.bufs[x].shape;
                let plane = s.h * s.w;
                let xv = &self.bufs[x].vals;
                let sv = &self.bufs[slope].vals;
                if self.bufs[x].needs_grad {
                    let gx = Self::grad_buf(grads, x, s.len());
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let a = sv[c];
                            let base = (n * s.c + c) * plane;
                            for i in base..base + plane {
                                let g = if xv[i] >= S::ZERO { dy[i] } else { a * dy[i] };
                                gx[i] = gx[i] + g;
                            }
                        }
                    }
                }
                if self.bufs[slope].needs_grad {
                    let ga = Self::grad_buf(grads, slope, s.c);
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            let mut acc = S::ZERO;
                            for i in base..base + plane {
                                if xv[i] < S::ZERO {
                                    acc = dy[i].mul_add(xv[i], acc);
                                }
                            }
                            ga[c] = ga[c] + acc;
                        }
                    }
                }
            }
            Node::Add { a, b, y } => {
                let Some(dy) = grads[y].take() else { return };
                if self.bufs[a].needs_grad {
                    axpy(Self::grad_buf(grads, a, dy.len()), &dy);
                }
                if self.bufs[b].needs_grad {
                    axpy(Self::grad_buf(grads, b, dy.len()), &dy);
                }
            }
            Node::Affine { x, y, mul } => {
                let Some(dy) = grads[y].take() else { return };
                if self.bufs[x].needs_grad {
                    let m = S::from_f64(mul);
                    let gx = Self::grad_buf(grads, x, dy.len());
                    for (g, &d) in gx.iter_mut().zip(&dy) {
                        *g = d.mul_add(m, *g);
                    }
                }
            }
            Node::Scale { x, s, y } => {
                let Some(dy) = grads[y].take() else { return };
                let sv = self.bufs[s].vals[0];
                if self.bufs[x].needs_grad {
                    let gx = Self::grad_buf(grads, x, dy.len());
                    for (g, &d) in gx.iter_mut().zip(&dy) {
                        *g = d.mul_add(sv, *g);
                    }
                }
                if self.bufs[s].needs_grad {
                    let xv = &self.bufs[x].vals;
                    let mut acc = S::ZERO;
                    for (&d, &v) in dy.iter().zip(xv) {
                        acc = d.mul_add(v, acc);
                    }
                    let gs = Self::grad_buf(grads, s, 1);
                    gs[0] = gs[0] + acc;
                }
            }
            Node::ConcatChannels { a, b, y } => {
                let Some(dy) = grads[y].take() else { return };
                let (sa, sb) = (self.bufs[a].shape, self.bufs[b].shape);
                let plane = sa.h * sa.w;
                let stride_y = (sa.c + sb.c) * plane;
                if self.bufs[a].needs_grad {
                    let ga = Self::grad_buf(grads, a, sa.len());
                    for n in 0..sa.n {
                        let src = &dy[n * stride_y..n * stride_y + sa.c * plane];
                        axpy(&mut ga[n * sa.c * plane..(n + 1) * sa.c * plane], src);
                    }
                }
                if self.bufs[b].needs_grad {
                    let gb = Self::grad_buf(grads, b, sb.len());
                    for n in 0..sb.n {
                        let src = &dy[n * stride_y + sa.c * plane..(n + 1) * stride_y];
                        axpy(&mut gb[n * sb.c * plane..(n + 1) * sb.c * plane], src);
                    }
                }
            }
            Node::AvgPool { x, y, factor } => {
                let Some(dy) = grads[y].take() else { return };
                if !self.bufs[x].needs_grad {
                    return;
                }
                let s = self.bufs[x].shape;
                let (oh, ow) = (s.h / factor, s.w / factor);
                let inv = S::from_f64(1.0 / (factor * factor) as f64);
                let gx = Self::grad_buf(grads, x, s.len());
                for n in 0..s.n {
                    for c in 0..s.c {
                        let ybase = (n * s.c + c) * oh * ow;
                        let xbase = (n * s.c + c) * s.h * s.w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = dy[ybase + oy * ow + ox] * inv;
                                for fy in 0..factor {
                                    let row = xbase + (oy * factor + fy) * s.w + ox * factor;
                                    for fx in 0..factor {
                                        gx[row + fx] = gx[row + fx] + g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Node::Mse { a, b, y } => {
                let Some(dy) = grads[y].take() else { return };
                let g = dy[0].to_f64();
                let n = self.bufs[a].vals.len();
                let coef = S::from_f64(2.0 * g / n as f64);
                let av = &self.bufs[a].vals;
                let bv = &self.bufs[b].vals;
                if self.bufs[a].needs_grad {
                    let ga = Self::grad_buf(grads, a, n);
                    for i in 0..n {
                        ga[i] = coef.mul_add(av[i] - bv[i], ga[i]);
                    }
                }
                if self.bufs[b].needs_grad {
                    let gb = Self::grad_buf(grads, b, n);
                    for i in 0..n {
                        gb[i] = coef.mul_add(bv[i] - av[i], gb[i]);
                    }
                }
            }
            Node::MaskedSum { x, mask, y } => {
                let Some(dy) = grads[y].take() else { return };
                if !self.bufs[x].needs_grad {
                    return;
                }
                let g = dy[0];
                let mv = &self.bufs[mask].vals;
                let gx = Self::grad_buf(grads, x, mv.len());
                for (gxi, &m) in gx.iter_mut().zip(mv) {
                    *gxi = g.mul_add(m, *gxi);
                }
            }
            Node::BlockIdct { x, y } => {
                let Some(dy) = grads[y].take() else { return };
                if !self.bufs[x].needs_grad {
                    return;
                }
                let s = self.bufs[x].shape;
                let plane = s.h * s.w;
                let ow = s.w * 8;
                let oh = s.h * 8;
                let gx = Self::grad_buf(grads, x, s.len());
                for n in 0..s.n {
                    for by in 0..s.h {
                        for bx in 0..s.w {
                            let mut block = [0.0f64; 64];
                            for yy in 0..8 {
                                for xx in 0..8 {
                                    block[yy * 8 + xx] =
                                        dy[n * oh * ow + (by * 8 + yy) * ow + bx * 8 + xx].to_f64();
                                }
                            }
                            let mut coeffs = [0.0f64; 64];
                            jpeg::forward_block_f64(&block, &mut coeffs);
                            for (c, &cv) in coeffs.iter().enumerate() {
                                let idx = (n * 64 + c) * plane + by * s.w + bx;
                                gx[idx] = gx[idx] + S::from_f64(cv);
                            }
                        }
                    }
                }
            }
            Node::Dru { x, lo, hi, y } => {
                let Some(dy) = grads[y].take() else { return };
                if !self.bufs[x].needs_grad {
                    return;
                }
                let xv = &self.bufs[x].vals;
                let lv = &self.bufs[lo].vals;
                let hv = &self.bufs[hi].vals;
                let gx = Self::grad_buf(grads, x, xv.len());
                for i in 0..xv.len() {
                    if xv[i] >= lv[i] && xv[i] <= hv[i] {
                        gx[i] = gx[i] + dy[i];
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Debug-dump format for tensors: the magic line `DMCNN-TENSOR v1`, one
/// byte holding the element width (4 or 8), four `u32` little-endian shape
/// fields `(n, c, h, w)`, then the values as little-endian floats.
pub const TENSOR_DUMP_MAGIC: &str = "DMCNN-TENSOR v1\n";

/// Writes `vals` with `shape` in the documented dump format.
pub fn write_tensor_dump<S: Scalar, W: std::io::Write>(
    shape: Shape,
    vals: &[S],
    mut w: W,
) -> std::io::Result<()> {
    assert_eq!(vals.len(), shape.len());
    w.write_all(TENSOR_DUMP_MAGIC.as_bytes())?;
    let width = std::mem::size_of::<S>() as u8;
    w.write_all(&[width])?;
    for dim in [shape.n, shape.c, shape.h, shape.w] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in vals {
        match width {
            4 => w.write_all(&(v.to_f64() as f32).to_le_bytes())?,
            _ => w.write_all(&v.to_f64().to_le_bytes())?,
        }
    }
    Ok(())
}

/// Reads a dump back as `f64` values plus the shape.
pub fn read_tensor_dump(bytes: &[u8]) -> Result<(Shape, Vec<f64>)> {
    let magic = TENSOR_DUMP_MAGIC.as_bytes();
    let fail = |m: &str| Error::InvalidArgument(format!("tensor dump: {m}"));
    if bytes.len() < magic.len() + 17 || &bytes[..magic.len()] != magic {
        return Err(fail("bad magic or truncated header"));
    }
    let mut off = magic.len();
    let width = bytes[off] as usize;
    off += 1;
    if width != 4 && width != 8 {
        return Err(fail("element width must be 4 or 8"));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    if bytes.len() != off + shape.len() * width {
        return Err(fail("payload length does not match the shape"));
    }
    let vals = bytes[off..]
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f64::from(f32::from_le_bytes(c.try_into().unwrap()))
            } else {
                f64::from_le_bytes(c.try_into().unwrap())
            }
        })
        .collect();
    Ok((shape, vals))
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests;
