//! The dual-domain multi-scale restoration network.
//!
//! Two auto-encoder branches: a coefficient-domain branch that predicts a
//! residual on the quantized DCT coefficients, rectified into the
//! quantization-feasibility box and decoded by a fixed IDCT layer, and a
//! pixel-domain branch over the concatenated degraded image and DCT-branch
//! estimate, with a dilated bottleneck, two downsampling/upsampling stages,
//! and reconstruction heads at full, half, and quarter scale. The final
//! output mixes the pixel residual, the DCT estimate, and the input through
//! a learnable scalar `r`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{atomic_write, pad_to_block_multiple, ImagePlane, Patch};
use crate::jpeg::{feasible_interval, CoeffGrid, QuantTable};
use crate::tensor::{ConvSpec, ConvTransposeSpec, LayerSpec, Scalar, Shape, Tape, Tensor};

/// Coefficient normalization: an 8x8 orthonormal DCT of values in
/// `[-128, 127]` keeps `|coeff| <= 8*255`, so this maps both branches onto
/// O(1) activations.
pub const COEFF_SCALE: f64 = 8.0 * 255.0;

/// Architecture hyperparameters. Everything the builder consumes lives
/// here so variants are one config away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub pixel_depth: usize,
    pub dct_depth: usize,
    pub base_channels: usize,
    pub bottleneck_dilations: Vec<usize>,
    pub r_init: f64,
    pub prelu_init: f64,
    pub lambda: f64,
    pub theta: f64,
    pub scales: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            pixel_depth: 15,
            dct_depth: 9,
            base_channels: 64,
            bottleneck_dilations: vec![2, 4, 8],
            r_init: 0.5,
            prelu_init: 0.1,
            lambda: 0.9,
            theta: 0.618,
            scales: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!(
                "lambda {} and theta {} must lie in [0, 1]",
                self.lambda, self.theta
            )));
        }
        if self.scales != 3 {
            return Err(Error::Config(format!(
                "the multi-scale head count is fixed at 3, got {}",
                self.scales
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.bottleneck_dilations.is_empty() || self.bottleneck_dilations.iter().any(|&d| d == 0)
        {
            return Err(Error::Config(
                "bottleneck_dilations must be a non-empty list of factors >= 1".into(),
            ));
        }
        let d = self.bottleneck_dilations.len();
        if self.pixel_depth < d + 2 + 8 || (self.pixel_depth - d - 2) % 2 != 0 {
            return Err(Error::Config(format!(
                "pixel_depth {} cannot split into symmetric encoder/decoder halves (>=4 each) \
                 around {d} dilated layers plus 2 head layers",
                self.pixel_depth
            )));
        }
        if self.dct_depth < d + 2 || (self.dct_depth - d) % 2 != 0 {
            return Err(Error::Config(format!(
                "dct_depth {} cannot split into symmetric encoder/decoder halves around {d} \
                 dilated layers",
                self.dct_depth
            )));
        }
        Ok(())
    }

    fn pixel_enc_len(&self) -> usize {
        (self.pixel_depth - self.bottleneck_dilations.len() - 2) / 2
    }

    fn dct_enc_len(&self) -> usize {
        (self.dct_depth - self.bottleneck_dilations.len()) / 2
    }

    /// Spatial layer chain of the pixel branch (through the full-scale
    /// head), for receptive-field reporting.
    pub fn pixel_branch_layers(&self) -> Result<Vec<LayerSpec>> {
        Ok(pixel_plan(self)?.spatial_specs())
    }

    /// Spatial layer chain of the DCT branch; units are coefficient-grid
    /// cells, i.e. 8x8-pixel blocks.
    pub fn dct_branch_layers(&self) -> Result<Vec<LayerSpec>> {
        Ok(dct_plan(self)?.spatial_specs())
    }
}

#[derive(Debug, Clone, Copy)]
enum PlanOp {
    Conv(ConvSpec),
    ConvT(ConvTransposeSpec),
}

#[derive(Debug, Clone)]
struct ConvPlan {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    op: PlanOp,
    prelu: bool,
}

impl ConvPlan {
    fn unit(name: impl Into<String>, cin: usize, cout: usize, dilation: usize) -> Self {
        ConvPlan {
            name: name.into(),
            cin,
            cout,
            kernel: 3,
            op: PlanOp::Conv(ConvSpec::same(3, dilation)),
            prelu: true,
        }
    }

    fn down(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        ConvPlan {
            name: name.into(),
            cin,
            cout,
            kernel: 3,
            op: PlanOp::Conv(ConvSpec {
                stride: 2,
                dilation: 1,
                padding: 1,
            }),
            prelu: true,
        }
    }

    fn up(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        ConvPlan {
            name: name.into(),
            cin,
            cout,
            kernel: 4,
            op: PlanOp::ConvT(ConvTransposeSpec { stride: 2, padding: 1 }),
            prelu: true,
        }
    }

    fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        ConvPlan {
            name: name.into(),
            cin,
            cout,
            kernel: 1,
            op: PlanOp::Conv(ConvSpec::unit()),
            prelu: false,
        }
    }

    fn weight_shape(&self) -> Shape {
        match self.op {
            PlanOp::Conv(_) => Shape::new(self.cout, self.cin, self.kernel, self.kernel),
            PlanOp::ConvT(_) => Shape::new(self.cin, self.cout, self.kernel, self.kernel),
        }
    }

    fn fan_in(&self) -> usize {
        match self.op {
            PlanOp::Conv(_) => self.cin * self.kernel * self.kernel,
            // each fine output sees cin * (k/stride)^2 coarse taps
            PlanOp::ConvT(spec) => {
                self.cin * (self.kernel / spec.stride) * (self.kernel / spec.stride)
            }
        }
    }

    fn spec(&self) -> LayerSpec {
        match self.op {
            PlanOp::Conv(s) => LayerSpec::conv(self.kernel, s.stride, s.dilation, s.padding),
            PlanOp::ConvT(s) => LayerSpec::conv_transpose(self.kernel, s.stride, s.padding),
        }
    }
}

struct BranchPlan {
    layers: Vec<ConvPlan>,
    /// `(after_layer, source_layer)`: add the source output after the layer.
    skips: Vec<(usize, usize)>,
    /// Emission heads hanging off the trunk: `(after_layer, head)`.
    heads: Vec<(usize, ConvPlan)>,
}

impl BranchPlan {
    fn spatial_specs(&self) -> Vec<LayerSpec> {
        let mut specs: Vec<LayerSpec> = self.layers.iter().map(ConvPlan::spec).collect();
        if let Some((after, head)) = self.heads.iter().max_by_key(|(after, _)| *after) {
            debug_assert_eq!(*after, self.layers.len() - 1);
            specs.push(head.spec());
        }
        specs
    }
}

fn pixel_plan(cfg: &NetworkConfig) -> Result<BranchPlan> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let enc_n = cfg.pixel_enc_len();
    let leading = enc_n - 3;
    let mut layers = Vec::new();
    for i in 0..leading {
        let cin = if i == 0 { 2 } else { b };
        layers.push(ConvPlan::unit(format!("pix.enc{}", i + 1), cin, b, 1));
    }
    let skip_full = layers.len() - 1; // last full-scale encoder conv
    layers.push(ConvPlan::down(format!("pix.enc{}", leading + 1), b, 2 * b));
    layers.push(ConvPlan::unit(format!("pix.enc{}", leading + 2), 2 * b, 2 * b, 1));
    let skip_half = layers.len() - 1;
    layers.push(ConvPlan::down(format!("pix.enc{}", leading + 3), 2 * b, 4 * b));
    for (j, &d) in cfg.bottleneck_dilations.iter().enumerate() {
        layers.push(ConvPlan::unit(format!("pix.mid{}", j + 1), 4 * b, 4 * b, d));
    }
    layers.push(ConvPlan::unit("pix.dec1", 4 * b, 4 * b, 1));
    let quarter_feat = layers.len() - 1;
    layers.push(ConvPlan::up("pix.dec2", 4 * b, 2 * b));
    let up_half = layers.len() - 1;
    layers.push(ConvPlan::unit("pix.dec3", 2 * b, 2 * b, 1));
    let half_feat = layers.len() - 1;
    layers.push(ConvPlan::up("pix.dec4", 2 * b, b));
    let up_full = layers.len() - 1;
    for i in 0..enc_n - 4 {
        layers.push(ConvPlan::unit(format!("pix.dec{}", i + 5), b, b, 1));
    }
    layers.push(ConvPlan::unit("pix.head1", b, b, 1));
    layers.push(ConvPlan::unit("pix.head2", b, b, 1));
    let full_feat = layers.len() - 1;
    debug_assert_eq!(layers.len(), cfg.pixel_depth);

    Ok(BranchPlan {
        layers,
        skips: vec![(up_half, skip_half), (up_full, skip_full)],
        heads: vec![
            (quarter_feat, ConvPlan::pointwise("pix.out2", 4 * b, 1)),
            (half_feat, ConvPlan::pointwise("pix.out1", 2 * b, 1)),
            (full_feat, ConvPlan::pointwise("pix.out0", b, 1)),
        ],
    })
}

fn dct_plan(cfg: &NetworkConfig) -> Result<BranchPlan> {
    cfg.validate()?;
    let b = cfg.base_channels;
    let enc_n = cfg.dct_enc_len();
    let mut layers = Vec::new();
    for i in 0..enc_n {
        let cin = if i == 0 { 64 } else { b };
        layers.push(ConvPlan::unit(format!("dct.enc{}", i + 1), cin, b, 1));
    }
    for (j, &d) in cfg.bottleneck_dilations.iter().enumerate() {
        layers.push(ConvPlan::unit(format!("dct.mid{}", j + 1), b, b, d));
    }
    let mut skips = Vec::new();
    for i in 0..enc_n {
        layers.push(ConvPlan::unit(format!("dct.dec{}", i + 1), b, b, 1));
        // dec_i pairs with enc_{enc_n - i}
        skips.push((layers.len() - 1, enc_n - 1 - i));
    }
    debug_assert_eq!(layers.len(), cfg.dct_depth);
    let last = layers.len() - 1;
    Ok(BranchPlan {
        layers,
        skips,
        heads: vec![(last, ConvPlan::pointwise("dct.res", b, 64))],
    })
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamTensor<S> {
    pub shape: Shape,
    pub values: Vec<S>,
}

/// Training provenance carried into checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub trained_qf: Option<u8>,
    pub step: u64,
    pub validation_loss: Option<f64>,
}

/// The network: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: NetworkConfig,
    params: BTreeMap<String, ParamTensor<S>>,
    pub provenance: Provenance,
}

fn kaiming_bound(fan_in: usize, prelu_init: f64) -> f64 {
    let gain = (2.0 / (1.0 + prelu_init * prelu_init)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

impl<S: Scalar> Model<S> {
    /// Builds the network with Kaiming-uniform kernels, zero biases,
    /// `prelu_init` slopes, and `r_init` mixing. Deterministic in `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Model<S>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let add_branch = |plan: &BranchPlan, rng: &mut ChaCha8Rng, params: &mut BTreeMap<String, ParamTensor<S>>| {
            let add_layer = |layer: &ConvPlan, rng: &mut ChaCha8Rng, params: &mut BTreeMap<String, ParamTensor<S>>| {
                let ws = layer.weight_shape();
                let bound = kaiming_bound(layer.fan_in(), config.prelu_init);
                let values: Vec<S> = (0..ws.len())
                    .map(|_| S::from_f64((2.0 * rng.random::<f64>() - 1.0) * bound))
                    .collect();
                params.insert(format!("{}.weight", layer.name), ParamTensor { shape: ws, values });
                params.insert(
                    format!("{}.bias", layer.name),
                    ParamTensor {
                        shape: Shape::new(1, layer.cout, 1, 1),
                        values: vec![S::ZERO; layer.cout],
                    },
                );
                if layer.prelu {
                    params.insert(
                        format!("{}.slope", layer.name),
                        ParamTensor {
                            shape: Shape::new(1, layer.cout, 1, 1),
                            values: vec![S::from_f64(config.prelu_init); layer.cout],
                        },
                    );
                }
            };
            for layer in &plan.layers {
                add_layer(layer, rng, params);
            }
            for (_, head) in &plan.heads {
                add_layer(head, rng, params);
            }
        };
        add_branch(&dct_plan(config)?, &mut rng, &mut params);
        add_branch(&pixel_plan(config)?, &mut rng, &mut params);
        params.insert(
            "mix.r".into(),
            ParamTensor {
                shape: Shape::scalar(),
                values: vec![S::from_f64(config.r_init)],
            },
        );
        Ok(Model {
            config: config.clone(),
            params,
            provenance: Provenance::default(),
        })
    }

    pub fn parameters(&self) -> &BTreeMap<String, ParamTensor<S>> {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut BTreeMap<String, ParamTensor<S>> {
        &mut self.params
    }

    /// Mixing parameter `r` of the final residual combination.
    pub fn mixing_r(&self) -> f64 {
        self.params["mix.r"].values[0].to_f64()
    }
}

/// Total learnable parameter count for a configuration.
pub fn parameter_count(config: &NetworkConfig) -> Result<usize> {
    let mut count = 1; // mix.r
    for plan in [dct_plan(config)?, pixel_plan(config)?] {
        for layer in plan.layers.iter().chain(plan.heads.iter().map(|(_, h)| h)) {
            count += layer.weight_shape().len() + layer.cout;
            if layer.prelu {
                count += layer.cout;
            }
        }
    }
    Ok(count)
}

/// One forward-pass input: the degraded plane plus its codec-side data.
#[derive(Clone, Copy)]
pub struct BatchItem<'a> {
    pub degraded: &'a ImagePlane,
    pub coeffs: &'a CoeffGrid,
    pub table: &'a QuantTable,
}

impl<'a> From<&'a Patch> for BatchItem<'a> {
    fn from(p: &'a Patch) -> Self {
        BatchItem {
            degraded: &p.degraded,
            coeffs: &p.coeffs,
            table: &p.table,
        }
    }
}

/// Handles produced by one forward pass. Outputs are in pixel units.
pub struct ForwardOutput {
    /// Full-scale restoration.
    pub o0: Tensor,
    /// Half-scale reconstruction.
    pub o1: Tensor,
    /// Quarter-scale reconstruction.
    pub o2: Tensor,
    /// DCT-branch estimate after rectification and decoding.
    pub od: Tensor,
    /// Current value of the mixing scalar.
    pub r: f64,
    /// DCT-branch coefficients before rectification (coefficient units).
    pub coeffs_raw: Tensor,
    /// Rectified DCT-branch coefficients (coefficient units).
    pub coeffs_boxed: Tensor,
    /// Parameter leaves, for gradient extraction after backward.
    pub params: BTreeMap<String, Tensor>,
}

fn coeffs_to_channel_major<'a>(
    items: &'a [BatchItem<'a>],
    pick: impl Fn(&'a BatchItem<'a>) -> &'a CoeffGrid,
) -> Vec<f64> {
    let g0 = pick(&items[0]);
    let (bh, bw) = (g0.blocks_h(), g0.blocks_w());
    let plane = bh * bw;
    let mut out = vec![0.0; items.len() * 64 * plane];
    for (n, item) in items.iter().enumerate() {
        let grid = pick(item);
        let coeffs = grid.coeffs();
        for by in 0..bh {
            for bx in 0..bw {
                let block = &coeffs[(by * bw + bx) * 64..(by * bw + bx) * 64 + 64];
                for (c, &v) in block.iter().enumerate() {
                    out[(n * 64 + c) * plane + by * bw + bx] = v;
                }
            }
        }
    }
    out
}

fn planes_to_batch(planes: &[&ImagePlane]) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes.len() * planes[0].samples().len());
    for p in planes {
        out.extend_from_slice(p.samples());
    }
    out
}

fn run_branch<S: Scalar>(
    tape: &mut Tape<S>,
    plan: &BranchPlan,
    params: &BTreeMap<String, Tensor>,
    input: Tensor,
) -> Result<(Vec<Tensor>, BTreeMap<String, Tensor>)> {
    let mut outs: Vec<Tensor> = Vec::with_capacity(plan.layers.len());
    let mut cur = input;
    for (idx, layer) in plan.layers.iter().enumerate() {
        cur = apply_layer(tape, layer, params, cur)?;
        for &(after, source) in &plan.skips {
            if after == idx {
                cur = tape.add(cur, outs[source])?;
            }
        }
        outs.push(cur);
    }
    let mut heads = BTreeMap::new();
    for (after, head) in &plan.heads {
        let h = apply_layer(tape, head, params, outs[*after])?;
        heads.insert(head.name.clone(), h);
    }
    Ok((outs, heads))
}

fn apply_layer<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &ConvPlan,
    params: &BTreeMap<String, Tensor>,
    input: Tensor,
) -> Result<Tensor> {
    let w = params[&format!("{}.weight", layer.name)];
    let b = params[&format!("{}.bias", layer.name)];
    let mut out = match layer.op {
        PlanOp::Conv(spec) => tape.conv2d(input, w, Some(b), spec)?,
        PlanOp::ConvT(spec) => tape.conv2d_transpose(input, w, Some(b), spec)?,
    };
    if layer.prelu {
        let slope = params[&format!("{}.slope", layer.name)];
        out = tape.prelu(out, slope)?;
    }
    Ok(out)
}

/// Runs the full dual-branch forward pass on a batch of equally-sized
/// items whose dimensions are multiples of 8.
pub fn forward<S: Scalar>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    batch: &[BatchItem],
) -> Result<ForwardOutput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("forward on an empty batch".into()));
    }
    let (w, h) = (batch[0].degraded.width(), batch[0].degraded.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "forward input {w}x{h} must be a multiple of 8 (pad first)"
        )));
    }
    if w % 4 != 0 || h % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "forward input {w}x{h} must divide by 4 for the multi-scale heads"
        )));
    }
    for item in batch {
        if item.degraded.width() != w || item.degraded.height() != h {
            return Err(Error::InvalidArgument(
                "all batch items must share one size".into(),
            ));
        }
        if item.coeffs.blocks_w() * 8 != w || item.coeffs.blocks_h() * 8 != h {
            return Err(Error::InvalidArgument(format!(
                "coefficient grid {}x{} blocks does not cover a {w}x{h} plane",
                item.coeffs.blocks_h(),
                item.coeffs.blocks_w()
            )));
        }
    }
    let n = batch.len();
    let (bh, bw) = (h / 8, w / 8);

    // parameter leaves
    let mut params = BTreeMap::new();
    for (name, p) in &model.params {
        let t = tape.leaf(p.shape, p.values.clone(), true)?;
        params.insert(name.clone(), t);
    }

    // constant inputs
    let planes: Vec<&ImagePlane> = batch.iter().map(|b| b.degraded).collect();
    let c_pix = tape.constant_f64(Shape::new(n, 1, h, w), &planes_to_batch(&planes))?;
    let coeff_shape = Shape::new(n, 64, bh, bw);
    let xc_raw = tape.constant_f64(coeff_shape, &coeffs_to_channel_major(batch, |b| b.coeffs))?;
    let boxes: Vec<(CoeffGrid, CoeffGrid)> = batch
        .iter()
        .map(|b| feasible_interval(b.coeffs, b.table))
        .collect();
    let mut lo_vals = vec![0.0; coeff_shape.len()];
    let mut hi_vals = vec![0.0; coeff_shape.len()];
    let plane = bh * bw;
    for (ni, (lo, hi)) in boxes.iter().enumerate() {
        for by in 0..bh {
            for bx in 0..bw {
                let lo_block = lo.block(by, bx);
                let hi_block = hi.block(by, bx);
                for c in 0..64 {
                    lo_vals[(ni * 64 + c) * plane + by * bw + bx] = lo_block[c];
                    hi_vals[(ni * 64 + c) * plane + by * bw + bx] = hi_block[c];
                }
            }
        }
    }
    let lo = tape.constant_f64(coeff_shape, &lo_vals)?;
    let hi = tape.constant_f64(coeff_shape, &hi_vals)?;

    // DCT branch: residual on normalized coefficients, rectify, decode
    let xc_norm = tape.affine(xc_raw, 1.0 / COEFF_SCALE, 0.0)?;
    let plan = dct_plan(&model.config)?;
    let (_, dct_heads) = run_branch(tape, &plan, &params, xc_norm)?;
    let residual = dct_heads["dct.res"];
    let yc_norm = tape.add(xc_norm, residual)?;
    let yc = tape.affine(yc_norm, COEFF_SCALE, 0.0)?;
    let coeffs_boxed = tape.dru(yc, lo, hi)?;
    let od = tape.block_idct(coeffs_boxed)?;
    let od_norm = tape.affine(od, 1.0 / 255.0, -0.5)?;

    // pixel branch over the fused input
    let c_norm = tape.affine(c_pix, 1.0 / 255.0, -0.5)?;
    let fused = tape.concat_channels(c_norm, od_norm)?;
    let plan = pixel_plan(&model.config)?;
    let (_, pix_heads) = run_branch(tape, &plan, &params, fused)?;

    let c_half = tape.avg_pool(c_norm, 2)?;
    let c_quarter = tape.avg_pool(c_norm, 4)?;
    let o1_norm = tape.add(c_half, pix_heads["pix.out1"])?;
    let o2_norm = tape.add(c_quarter, pix_heads["pix.out2"])?;

    // final mixing: g + r*od + (1-r)*c
    let r = params["mix.r"];
    let one_minus_r = tape.affine(r, -1.0, 1.0)?;
    let od_mix = tape.scale(od_norm, r)?;
    let c_mix = tape.scale(c_norm, one_minus_r)?;
    let residual_plus_od = tape.add(pix_heads["pix.out0"], od_mix)?;
    let o0_norm = tape.add(residual_plus_od, c_mix)?;

    let o0 = tape.affine(o0_norm, 255.0, 127.5)?;
    let o1 = tape.affine(o1_norm, 255.0, 127.5)?;
    let o2 = tape.affine(o2_norm, 255.0, 127.5)?;

    Ok(ForwardOutput {
        o0,
        o1,
        o2,
        od,
        r: model.mixing_r(),
        coeffs_raw: yc,
        coeffs_boxed,
        params,
    })
}

/// `2^level`-fold average pooling of the clean target; level 0 is identity.
pub fn downscale_target(clean: &ImagePlane, level: usize) -> Result<ImagePlane> {
    if level > 2 {
        return Err(Error::InvalidArgument(format!(
            "target level {level} outside 0..=2"
        )));
    }
    let f = 1usize << level;
    let (w, h) = (clean.width(), clean.height());
    if w % f != 0 || h % f != 0 {
        return Err(Error::InvalidArgument(format!(
            "plane {w}x{h} does not divide by {f}"
        )));
    }
    if f == 1 {
        return Ok(clean.clone());
    }
    let inv = 1.0 / (f * f) as f64;
    Ok(ImagePlane::from_fn(w / f, h / f, |x, y| {
        let mut acc = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                acc += clean.get(x * f + dx, y * f + dy);
            }
        }
        acc * inv
    }))
}

/// Multi-scale DCT-embedded objective:
/// `sum_i theta^i MSE(o_i, target_i) + lambda MSE(od, target_0)`.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    out: &ForwardOutput,
    clean: &[&ImagePlane],
    config: &NetworkConfig,
) -> Result<Tensor> {
    if clean.len() != out.o0.shape.n {
        return Err(Error::InvalidArgument(format!(
            "{} clean targets for a batch of {}",
            clean.len(),
            out.o0.shape.n
        )));
    }
    let (h, w) = (out.o0.shape.h, out.o0.shape.w);
    if clean.iter().any(|p| p.width() != w || p.height() != h) {
        return Err(Error::InvalidArgument(
            "clean target size differs from the network output".into(),
        ));
    }
    let mut targets = Vec::new();
    for level in 0..3 {
        let planes: Vec<ImagePlane> = clean
            .iter()
            .map(|p| downscale_target(p, level))
            .collect::<Result<_>>()?;
        let refs: Vec<&ImagePlane> = planes.iter().collect();
        let shape = Shape::new(clean.len(), 1, h >> level, w >> level);
        targets.push(tape.constant_f64(shape, &planes_to_batch(&refs))?);
    }
    let mse0 = tape.mse(out.o0, targets[0])?;
    let mse1 = tape.mse(out.o1, targets[1])?;
    let mse2 = tape.mse(out.o2, targets[2])?;
    let mse_d = tape.mse(out.od, targets[0])?;

    let theta = config.theta;
    let w1 = tape.affine(mse1, theta, 0.0)?;
    let w2 = tape.affine(mse2, theta * theta, 0.0)?;
    let wd = tape.affine(mse_d, config.lambda, 0.0)?;
    let acc = tape.add(mse0, w1)?;
    let acc = tape.add(acc, w2)?;
    tape.add(acc, wd)
}

/// Restores one degraded plane: pads, runs the network without recording,
/// clamps to `[0, 255]`, and crops back to the input size.
pub fn restore<S: Scalar>(
    model: &Model<S>,
    degraded: &ImagePlane,
    coeffs: &CoeffGrid,
    table: &QuantTable,
) -> Result<ImagePlane> {
    let (padded, (ow, oh)) = pad_to_block_multiple(degraded);
    if coeffs.blocks_w() * 8 != padded.width() || coeffs.blocks_h() * 8 != padded.height() {
        return Err(Error::InvalidArgument(format!(
            "coefficient grid {}x{} blocks does not match the padded {}x{} plane",
            coeffs.blocks_h(),
            coeffs.blocks_w(),
            padded.width(),
            padded.height()
        )));
    }
    let mut tape: Tape<S> = Tape::inference();
    let item = BatchItem {
        degraded: &padded,
        coeffs,
        table,
    };
    let out = forward(model, &mut tape, &[item])?;
    let vals = tape.value(out.o0);
    let mut plane = ImagePlane::new(
        padded.width(),
        padded.height(),
        vals.iter().map(|v| v.to_f64()).collect(),
    )?;
    plane.clamp_in_place(0.0, 255.0);
    plane.crop(ow, oh)
}

/// Extracts one image of a `(N, 1, H, W)` tensor as a plane.
pub fn plane_from_tensor<S: Scalar>(tape: &Tape<S>, t: Tensor, index: usize) -> Result<ImagePlane> {
    let s = t.shape;
    if s.c != 1 || index >= s.n {
        return Err(Error::InvalidArgument(format!(
            "cannot extract image {index} from tensor {s}"
        )));
    }
    let plane = s.h * s.w;
    let vals = &tape.value(t)[index * plane..(index + 1) * plane];
    ImagePlane::new(s.w, s.h, vals.iter().map(|v| v.to_f64()).collect())
}

const CHECKPOINT_MAGIC: &str = "DMCNN-CHECKPOINT v1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    dtype: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: NetworkConfig,
    trained_qf: Option<u8>,
    step: u64,
    validation_loss: Option<f64>,
    tensors: Vec<ManifestEntry>,
}

/// Serialized model: config, provenance, and named `f32` parameters.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: NetworkConfig,
    pub parameters: BTreeMap<String, (Shape, Vec<f32>)>,
    pub provenance: Provenance,
}

impl ModelCheckpoint {
    /// Container layout: a magic line, a decimal manifest length line, the
    /// JSON manifest, then the little-endian `f32` payload.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, (shape, values)) in &self.parameters {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: [shape.n, shape.c, shape.h, shape.w],
                dtype: "f32".into(),
                offset: payload.len(),
                len: values.len(),
            });
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            trained_qf: self.provenance.trained_qf,
            step: self.provenance.step,
            validation_loss: self.provenance.validation_loss,
            tensors,
        };
        let manifest_json = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
        let mut bytes = Vec::with_capacity(manifest_json.len() + payload.len() + 64);
        bytes.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
        bytes.push(b'\n');
        bytes.extend_from_slice(format!("{}\n", manifest_json.len()).as_bytes());
        bytes.extend_from_slice(&manifest_json);
        bytes.extend_from_slice(&payload);
        atomic_write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
        let path = path.as_ref();
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("missing magic line".into()))?;
        if &bytes[..magic_end] != CHECKPOINT_MAGIC.as_bytes() {
            return Err(fail("bad magic string".into()));
        }
        let rest = &bytes[magic_end + 1..];
        let len_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fail("missing manifest length".into()))?;
        let manifest_len: usize = std::str::from_utf8(&rest[..len_end])
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| fail("bad manifest length".into()))?;
        let manifest_start = len_end + 1;
        if rest.len() < manifest_start + manifest_len {
            return Err(fail("truncated manifest".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&rest[manifest_start..manifest_start + manifest_len])
                .map_err(|e| fail(format!("manifest parse error: {e}")))?;
        let payload = &rest[manifest_start + manifest_len..];

        let mut parameters = BTreeMap::new();
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(fail(format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let [n, c, h, w] = entry.shape;
            let shape = Shape::new(n, c, h, w);
            if shape.len() != entry.len {
                return Err(fail(format!("tensor {}: shape/len mismatch", entry.name)));
            }
            let end = entry.offset + entry.len * 4;
            if end > payload.len() {
                return Err(fail(format!("tensor {}: payload out of bounds", entry.name)));
            }
            let mut values = Vec::with_capacity(entry.len);
            for chunk in payload[entry.offset..end].chunks_exact(4) {
                values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            if parameters.insert(entry.name.clone(), (shape, values)).is_some() {
                return Err(fail(format!("tensor {} appears twice", entry.name)));
            }
        }
        Ok(ModelCheckpoint {
            config: manifest.config,
            parameters,
            provenance: Provenance {
                trained_qf: manifest.trained_qf,
                step: manifest.step,
                validation_loss: manifest.validation_loss,
            },
        })
    }

    /// Instantiates the model, verifying that the parameter set matches the
    /// architecture exactly (every expected tensor present once with the
    /// right shape, nothing extra).
    pub fn into_model(self) -> Result<Model<f32>> {
        let reference: Model<f32> = Model::build(&self.config, 0)?;
        let mut params = BTreeMap::new();
        for (name, refp) in &reference.params {
            let (shape, values) = self.parameters.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {name} missing from checkpoint"))
            })?;
            if *shape != refp.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {shape} does not match architecture {}",
                    refp.shape
                )));
            }
            params.insert(
                name.clone(),
                ParamTensor {
                    shape: *shape,
                    values: values.clone(),
                },
            );
        }
        for name in self.parameters.keys() {
            if !reference.params.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} does not belong to this architecture"
                )));
            }
        }
        Ok(Model {
            config: self.config,
            params,
            provenance: self.provenance,
        })
    }
}

impl Model<f32> {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            config: self.config.clone(),
            parameters: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), (p.shape, p.values.clone())))
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
        ModelCheckpoint::load(path)?.into_model()
    }
}
