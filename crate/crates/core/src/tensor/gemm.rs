//! Dense kernels behind the convolution operators: packed GEMM and the
//! im2col/col2im lowering.
//!
//! Every output element is accumulated in a fixed serial order, so results
//! are bit-identical regardless of the rayon schedule or thread count.

use rayon::prelude::*;

use super::Scalar;

const MR: usize = 8;
const NR: usize = 32;
const NC: usize = 1024;

/// `c (m x n) += a (m x k) * b (k x n)`, all row-major.
pub fn gemm_nn<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    b: &[S],
    c: &mut [S],
    parallel: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let col_blocks: Vec<usize> = (0..n).step_by(NC).collect();
    if parallel && col_blocks.len() > 1 {
        // Column blocks touch disjoint columns of c; hand each its own view.
        let cptr = SendMutPtr(c.as_mut_ptr());
        col_blocks.par_iter().for_each(|&n0| {
            let c = unsafe { std::slice::from_raw_parts_mut(cptr.get(), m * n) };
            gemm_nn_block(m, k, n, n0, a, b, c);
        });
    } else {
        for &n0 in &col_blocks {
            gemm_nn_block(m, k, n, n0, a, b, c);
        }
    }
}

fn gemm_nn_block<S: Scalar>(m: usize, k: usize, n: usize, n0: usize, a: &[S], b: &[S], c: &mut [S]) {
    let nw = NC.min(n - n0);
    let nstrips = nw.div_ceil(NR);
    // pack the B panel into NR-column strips, k-major inside each strip
    let mut packed = vec![S::ZERO; nstrips * k * NR];
    for s in 0..nstrips {
        let col0 = n0 + s * NR;
        let w = NR.min(n - col0);
        let dst = &mut packed[s * k * NR..(s + 1) * k * NR];
        for kk in 0..k {
            dst[kk * NR..kk * NR + w].copy_from_slice(&b[kk * n + col0..kk * n + col0 + w]);
        }
    }
    let mut m0 = 0;
    while m0 < m {
        let mrows = MR.min(m - m0);
        for s in 0..nstrips {
            let col0 = n0 + s * NR;
            let w = NR.min(n - col0);
            let bp = &packed[s * k * NR..(s + 1) * k * NR];
            if mrows == MR && w == NR {
                kernel_nn(k, &a[m0 * k..], bp, &mut c[m0 * n + col0..], n);
            } else {
                for i in 0..mrows {
                    let arow = &a[(m0 + i) * k..(m0 + i + 1) * k];
                    let mut acc = [S::ZERO; NR];
                    for (kk, &av) in arow.iter().enumerate() {
                        let brow = &bp[kk * NR..kk * NR + w];
                        for j in 0..w {
                            acc[j] = av.mul_add(brow[j], acc[j]);
                        }
                    }
                    let crow = &mut c[(m0 + i) * n + col0..(m0 + i) * n + col0 + w];
                    for j in 0..w {
                        crow[j] = crow[j] + acc[j];
                    }
                }
            }
        }
        m0 += MR;
    }
}

#[inline(never)]
fn kernel_nn<S: Scalar>(k: usize, a: &[S], bp: &[S], c: &mut [S], ldc: usize) {
    let mut acc = [[S::ZERO; NR]; MR];
    for kk in 0..k {
        let brow = &bp[kk * NR..kk * NR + NR];
        for i in 0..MR {
            let av = a[i * k + kk];
            let accr = &mut acc[i];
            for j in 0..NR {
                accr[j] = av.mul_add(brow[j], accr[j]);
            }
        }
    }
    for (i, accr) in acc.iter().enumerate() {
        let crow = &mut c[i * ldc..i * ldc + NR];
        for j in 0..NR {
            crow[j] = crow[j] + accr[j];
        }
    }
}

const NT_LANES: usize = 8;
const NT_TM: usize = 4;
const NT_TN: usize = 4;

/// Dot-product tile: `out[i][j] = sum_l a_row_i[l] * b_row_j[l]` with
/// lane-parallel accumulators reduced in a fixed order.
#[inline(never)]
fn kernel_nt<S: Scalar>(
    l: usize,
    a: &[S],
    b: &[S],
    out: &mut [[S; NT_TN]; NT_TM],
) {
    let chunks = l / NT_LANES;
    let mut acc = [[[S::ZERO; NT_LANES]; NT_TN]; NT_TM];
    for ch in 0..chunks {
        let base = ch * NT_LANES;
        for i in 0..NT_TM {
            let av = &a[i * l + base..i * l + base + NT_LANES];
            for j in 0..NT_TN {
                let bv = &b[j * l + base..j * l + base + NT_LANES];
                let accv = &mut acc[i][j];
                for lane in 0..NT_LANES {
                    accv[lane] = av[lane].mul_add(bv[lane], accv[lane]);
                }
            }
        }
    }
    for i in 0..NT_TM {
        for j in 0..NT_TN {
            let mut sum = S::ZERO;
            for lane in 0..NT_LANES {
                sum = sum + acc[i][j][lane];
            }
            for ll in chunks * NT_LANES..l {
                sum = a[i * l + ll].mul_add(b[j * l + ll], sum);
            }
            out[i][j] = sum;
        }
    }
}

/// `c (m x n) += a (m x l) * b^T` where `b` is `(n x l)` row-major: every
/// output is a dot product over the shared contiguous `l` axis.
pub fn gemm_nt<S: Scalar>(m: usize, l: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), n * l);
    debug_assert_eq!(c.len(), m * n);
    // j-major order: the (m x l) side stays cache-resident while the
    // (n x l) side streams exactly once
    for j0 in (0..n).step_by(NT_TN) {
        let tw = NT_TN.min(n - j0);
        for i0 in (0..m).step_by(NT_TM) {
            let th = NT_TM.min(m - i0);
            if th == NT_TM && tw == NT_TN {
                let mut out = [[S::ZERO; NT_TN]; NT_TM];
                kernel_nt(l, &a[i0 * l..(i0 + NT_TM) * l], &b[j0 * l..(j0 + NT_TN) * l], &mut out);
                for i in 0..NT_TM {
                    for j in 0..NT_TN {
                        c[(i0 + i) * n + j0 + j] = c[(i0 + i) * n + j0 + j] + out[i][j];
                    }
                }
            } else {
                for i in 0..th {
                    for j in 0..tw {
                        let mut sum = S::ZERO;
                        for ll in 0..l {
                            sum = a[(i0 + i) * l + ll].mul_add(b[(j0 + j) * l + ll], sum);
                        }
                        c[(i0 + i) * n + j0 + j] = c[(i0 + i) * n + j0 + j] + sum;
                    }
                }
            }
        }
    }
}

/// Spatial geometry shared by im2col/col2im.
#[derive(Debug, Clone, Copy)]
pub struct PatchGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PatchGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output-x range for a kernel column offset, as `lo..hi`.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let kxd = kx * self.dilation;
        let lo = if self.pad > kxd {
            (self.pad - kxd).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kxd {
            ((self.w + self.pad - kxd - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(self.out_w), hi)
    }
}

/// Lowers one image `(C, H, W)` into the patch matrix
/// `(C*kh*kw, out_h*out_w)`, zero-filling out-of-bounds taps.
pub fn im2col<S: Scalar>(x: &[S], g: &PatchGeom, cols: &mut [S]) {
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let n = g.cols();
    for ci in 0..g.channels {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (ox_lo, ox_hi) = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize || ox_lo >= ox_hi {
                        seg.fill(S::ZERO);
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    seg[..ox_lo].fill(S::ZERO);
                    seg[ox_hi..].fill(S::ZERO);
                    let ix0 = (ox_lo * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    let ix0 = ix0 as usize;
                    if g.stride == 1 {
                        seg[ox_lo..ox_hi].copy_from_slice(&xrow[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        let mut ix = ix0;
                        for s in &mut seg[ox_lo..ox_hi] {
                            *s = xrow[ix];
                            ix += g.stride;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates the patch matrix back
/// into an image buffer (which the caller zero-initializes).
pub fn col2im<S: Scalar>(cols: &[S], g: &PatchGeom, x: &mut [S]) {
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    let n = g.cols();
    for ci in 0..g.channels {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (ox_lo, ox_hi) = g.valid_ox(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || ox_lo >= ox_hi {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let mut ix = (ox_lo * g.stride + kx * g.dilation) - g.pad;
                    for &v in &seg[ox_lo..ox_hi] {
                        xrow[ix] = xrow[ix] + v;
                        ix += g.stride;
                    }
                }
            }
        }
    }
}

struct SendMutPtr<S>(*mut S);

impl<S> SendMutPtr<S> {
    fn get(&self) -> *mut S {
        self.0
    }
}

unsafe impl<S: Send> Send for SendMutPtr<S> {}
unsafe impl<S: Send> Sync for SendMutPtr<S> {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_nn_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (8, 32, 32), (13, 17, 1100), (9, 64, 2051)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = naive_gemm(m, k, n, &a, &b);
            for parallel in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm_nn(m, k, n, &a, &b, &mut c, parallel);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-9, "({m},{k},{n}) parallel={parallel}");
                }
            }
        }
    }

    #[test]
    fn gemm_nn_parallel_is_bit_identical_to_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, n) = (16, 40, 3000);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let mut c1 = vec![0.0f32; m * n];
        let mut c2 = vec![0.0f32; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c1, false);
        gemm_nn(m, k, n, &a, &b, &mut c2, true);
        assert_eq!(c1, c2);
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, l, n) in &[(1, 1, 1), (5, 33, 6), (8, 100, 9), (7, 129, 5)] {
            let a: Vec<f64> = (0..m * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n * l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut want = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    want[i * n + j] = (0..l).map(|x| a[i * l + x] * b[j * l + x]).sum();
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_nt(m, l, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-9, "({m},{l},{n})");
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> characterizes the scatter exactly
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(stride, dilation, pad) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 1, 0)] {
            let (c, h, w, k) = (3, 9, 11, 3);
            let out_h = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
            let out_w = (w + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
            let g = PatchGeom {
                channels: c,
                h,
                w,
                kh: k,
                kw: k,
                stride,
                dilation,
                pad,
                out_h,
                out_w,
            };
            let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..g.rows() * g.cols()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut cols = vec![0.0; g.rows() * g.cols()];
            im2col(&x, &g, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "stride={stride} dil={dilation} pad={pad}");
        }
    }
}
