//! Baseline-JPEG luma degradation and the DCT-domain feasibility projection.
//!
//! The codec here is the lossy part of baseline JPEG only: 8x8 block DCT
//! with a -128 level shift, quality-scaled quantization of every
//! coefficient, and the inverse transform. Entropy coding is lossless and
//! deliberately absent. The DCT uses the orthonormal normalization so the
//! round trip and Parseval checks are exact in f64.

use std::io::{Read, Write};
use std::sync::LazyLock;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::imaging::{pad_to_block_multiple, ImagePlane};

/// IJG Annex K.1 base luminance table, row-major (u = vertical frequency).
const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// 8x8 quantization step sizes, entries in `[1, 255]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTable {
    steps: [u16; 64],
}

impl QuantTable {
    /// IJG-scaled luminance table for a quality factor in `1..=100`.
    ///
    /// Scaling uses the reference integer arithmetic: `s = 5000/qf` (integer
    /// division) below 50, `s = 200 - 2*qf` otherwise, and each entry is
    /// `(base*s + 50)/100` clamped to `[1, 255]`.
    pub fn luminance(qf: u8) -> Result<QuantTable> {
        if !(1..=100).contains(&qf) {
            return Err(Error::InvalidArgument(format!(
                "quality factor {qf} outside 1..=100"
            )));
        }
        let qf = u32::from(qf);
        let scale = if qf < 50 { 5000 / qf } else { 200 - 2 * qf };
        let mut steps = [0u16; 64];
        for (dst, &base) in steps.iter_mut().zip(&BASE_LUMA) {
            let v = (u32::from(base) * scale + 50) / 100;
            *dst = v.clamp(1, 255) as u16;
        }
        Ok(QuantTable { steps })
    }

    pub fn steps(&self) -> &[u16; 64] {
        &self.steps
    }

    /// Step for vertical frequency `u`, horizontal frequency `v`.
    #[inline]
    pub fn step(&self, u: usize, v: usize) -> u16 {
        self.steps[u * 8 + v]
    }

    /// Plain-text form: 8 rows of 8 integers.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.steps.chunks(8) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<QuantTable> {
        let values: Vec<u16> = text
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u16>()
                    .map_err(|_| Error::InvalidArgument(format!("bad table entry {tok:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != 64 {
            return Err(Error::InvalidArgument(format!(
                "quantization table needs 64 entries, got {}",
                values.len()
            )));
        }
        let mut steps = [0u16; 64];
        steps.copy_from_slice(&values);
        if steps.iter().any(|&s| s == 0 || s > 255) {
            return Err(Error::InvalidArgument(
                "quantization steps must lie in [1, 255]".into(),
            ));
        }
        Ok(QuantTable { steps })
    }
}

/// Per-block DCT coefficients as a 64-channel grid at 1/8 spatial
/// resolution. Channel `c = 8u + v` in row-major frequency order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffGrid {
    blocks_h: usize,
    blocks_w: usize,
    coeffs: Vec<f64>,
}

impl CoeffGrid {
    pub fn new(blocks_h: usize, blocks_w: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != blocks_h * blocks_w * 64 {
            return Err(Error::InvalidArgument(format!(
                "coefficient buffer length {} does not match {}x{} blocks",
                coeffs.len(),
                blocks_h,
                blocks_w
            )));
        }
        Ok(CoeffGrid {
            blocks_h,
            blocks_w,
            coeffs,
        })
    }

    pub fn zeros(blocks_h: usize, blocks_w: usize) -> Self {
        CoeffGrid {
            blocks_h,
            blocks_w,
            coeffs: vec![0.0; blocks_h * blocks_w * 64],
        }
    }

    pub fn blocks_h(&self) -> usize {
        self.blocks_h
    }

    pub fn blocks_w(&self) -> usize {
        self.blocks_w
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    #[inline]
    pub fn block(&self, by: usize, bx: usize) -> &[f64] {
        let i = (by * self.blocks_w + bx) * 64;
        &self.coeffs[i..i + 64]
    }

    #[inline]
    pub fn block_mut(&mut self, by: usize, bx: usize) -> &mut [f64] {
        let i = (by * self.blocks_w + bx) * 64;
        &mut self.coeffs[i..i + 64]
    }

    pub fn same_shape(&self, other: &CoeffGrid) -> bool {
        self.blocks_h == other.blocks_h && self.blocks_w == other.blocks_w
    }

    /// Binary dump: 8-byte header (`blocks_h`, `blocks_w` as `u32` LE)
    /// followed by the coefficients as little-endian `f64`.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.blocks_h as u32)?;
        w.write_u32::<LittleEndian>(self.blocks_w as u32)?;
        for &v in &self.coeffs {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_dump(mut r: impl Read) -> Result<CoeffGrid> {
        let fail = |reason: &str| Error::Decode {
            path: "<coefficient dump>".into(),
            reason: reason.into(),
        };
        let bh = r.read_u32::<LittleEndian>().map_err(|_| fail("truncated header"))? as usize;
        let bw = r.read_u32::<LittleEndian>().map_err(|_| fail("truncated header"))? as usize;
        let mut coeffs = vec![0.0; bh * bw * 64];
        r.read_f64_into::<LittleEndian>(&mut coeffs)
            .map_err(|_| fail("truncated coefficient payload"))?;
        CoeffGrid::new(bh, bw, coeffs)
    }
}

/// Orthonormal DCT-II basis: `BASIS[u][x] = c(u) cos((2x+1)u pi/16)` with
/// `c(0) = sqrt(1/8)`, `c(u>0) = 1/2`.
static BASIS: LazyLock<[[f64; 8]; 8]> = LazyLock::new(|| {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (x, val) in row.iter_mut().enumerate() {
            *val = c * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
});

/// Forward transform of one level-shifted 8x8 block (tensor-layer hook).
pub(crate) fn forward_block_f64(block: &[f64; 64], out: &mut [f64; 64]) {
    forward_block(block, out)
}

/// Inverse transform of one coefficient block, without the level shift.
pub(crate) fn inverse_block_f64(coeffs: &[f64; 64], out: &mut [f64; 64]) {
    inverse_block(coeffs, out)
}

fn forward_block(block: &[f64; 64], out: &mut [f64]) {
    let basis = &*BASIS;
    // rows: tmp[u][y] = sum_x basis[u][x] * block[y][x]  (transform along x)
    let mut tmp = [[0.0f64; 8]; 8];
    for y in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += basis[u][x] * block[y * 8 + x];
            }
            tmp[u][y] = acc;
        }
    }
    // columns: out[u][v] indexed by channel 8u+v with u vertical
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += basis[u][y] * tmp[v][y];
            }
            out[u * 8 + v] = acc;
        }
    }
}

fn inverse_block(coeffs: &[f64], out: &mut [f64; 64]) {
    let basis = &*BASIS;
    // columns first: tmp[v][y] = sum_u basis[u][y] * coeffs[u][v]
    let mut tmp = [[0.0f64; 8]; 8];
    for v in 0..8 {
        for y in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += basis[u][y] * coeffs[u * 8 + v];
            }
            tmp[v][y] = acc;
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for v in 0..8 {
                acc += basis[v][x] * tmp[v][y];
            }
            out[y * 8 + x] = acc;
        }
    }
}

/// Blockwise orthonormal 2D DCT-II after a -128 level shift.
///
/// Plane dimensions must already be multiples of 8; callers pad first.
pub fn block_dct(plane: &ImagePlane) -> Result<CoeffGrid> {
    let (w, h) = (plane.width(), plane.height());
    if w % 8 != 0 || h % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "plane {w}x{h} is not a multiple of 8; pad before the block DCT"
        )));
    }
    let (bw, bh) = (w / 8, h / 8);
    let mut grid = CoeffGrid::zeros(bh, bw);
    let mut block = [0.0f64; 64];
    for by in 0..bh {
        for bx in 0..bw {
            for y in 0..8 {
                let row = plane.row(by * 8 + y);
                for x in 0..8 {
                    block[y * 8 + x] = row[bx * 8 + x] - 128.0;
                }
            }
            forward_block(&block, grid.block_mut(by, bx));
        }
    }
    Ok(grid)
}

/// Exact inverse of [`block_dct`] including the +128 level shift.
/// The output is intentionally not clamped.
pub fn block_idct(grid: &CoeffGrid) -> ImagePlane {
    let (bh, bw) = (grid.blocks_h, grid.blocks_w);
    let mut plane = ImagePlane::filled(bw * 8, bh * 8, 0.0);
    let mut block = [0.0f64; 64];
    let w = bw * 8;
    for by in 0..bh {
        for bx in 0..bw {
            inverse_block(grid.block(by, bx), &mut block);
            for y in 0..8 {
                for x in 0..8 {
                    plane.samples_mut()[(by * 8 + y) * w + bx * 8 + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
    plane
}

#[inline]
fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Maps every coefficient to `round(o/Q) * Q` with rounding half away from
/// zero; table entries broadcast across blocks by channel index.
pub fn quantize(grid: &CoeffGrid, table: &QuantTable) -> CoeffGrid {
    let mut out = grid.clone();
    for block in out.coeffs.chunks_mut(64) {
        for (c, v) in block.iter_mut().enumerate() {
            let q = f64::from(table.steps[c]);
            *v = round_half_away(*v / q) * q;
        }
    }
    out
}

/// Result of pushing a plane through the lossy JPEG luma path.
#[derive(Debug, Clone)]
pub struct Degraded {
    /// Decoded plane, clamped to `[0, 255]` and cropped to the input size.
    pub plane: ImagePlane,
    /// Quantized coefficients of the padded grid (the DRU anchor).
    pub coeffs: CoeffGrid,
    pub table: QuantTable,
    /// Size of the plane before padding, `(width, height)`.
    pub original_size: (usize, usize),
}

/// Full luma degradation: pad, block DCT, quantize, inverse DCT, clamp,
/// crop. The returned coefficients correspond to the padded grid.
pub fn degrade(plane: &ImagePlane, qf: u8) -> Result<Degraded> {
    let table = QuantTable::luminance(qf)?;
    let (padded, original_size) = pad_to_block_multiple(plane);
    let coeffs = quantize(&block_dct(&padded)?, &table);
    let mut decoded = block_idct(&coeffs);
    decoded.clamp_in_place(0.0, 255.0);
    let plane = decoded.crop(original_size.0, original_size.1)?;
    Ok(Degraded {
        plane,
        coeffs,
        table,
        original_size,
    })
}

/// Elementwise feasibility box `[C - Q/2, C + Q/2]` implied by quantization.
pub fn feasible_interval(cdct: &CoeffGrid, table: &QuantTable) -> (CoeffGrid, CoeffGrid) {
    let mut lo = cdct.clone();
    let mut hi = cdct.clone();
    for (lo_block, hi_block) in lo.coeffs.chunks_mut(64).zip(hi.coeffs.chunks_mut(64)) {
        for c in 0..64 {
            let half = f64::from(table.steps[c]) / 2.0;
            lo_block[c] -= half;
            hi_block[c] += half;
        }
    }
    (lo, hi)
}

/// Clamps `x` into the feasibility box of `cdct` under `table` — the
/// Euclidean projection onto the box, applied elementwise.
pub fn dru_project(x: &CoeffGrid, cdct: &CoeffGrid, table: &QuantTable) -> Result<CoeffGrid> {
    if !x.same_shape(cdct) {
        return Err(Error::InvalidArgument(format!(
            "coefficient grids disagree: {}x{} vs {}x{}",
            x.blocks_h, x.blocks_w, cdct.blocks_h, cdct.blocks_w
        )));
    }
    let mut out = x.clone();
    for (out_block, c_block) in out.coeffs.chunks_mut(64).zip(cdct.coeffs.chunks(64)) {
        for c in 0..64 {
            let half = f64::from(table.steps[c]) / 2.0;
            out_block[c] = out_block[c].clamp(c_block[c] - half, c_block[c] + half);
        }
    }
    Ok(out)
}
