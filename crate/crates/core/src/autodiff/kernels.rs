//! Dense numeric kernels behind the tape primitives.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type of a tape (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    /// `C[m×n] = A[m×k]·B[k×n] + beta·C` on raw strided storage.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
    ) {
        // SAFETY: `gemm_ld` bounds every access by the slice lengths.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            )
        }
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
    ) {
        // SAFETY: `gemm_ld` bounds every access by the slice lengths.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                1,
            )
        }
    }
}

/// Row-major `C = op(A)·op(B) + beta·C` where `op(A)` is `m×k` and `op(B)` is
/// `k×n`. With `trans_a`, `A` is stored `k×m`; with `trans_b`, `B` is `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let lda = if trans_a { m } else { k };
    let ldb = if trans_b { k } else { n };
    gemm_ld(m, k, n, a, lda, trans_a, b, ldb, trans_b, beta, c, n);
}

/// [`gemm`] on sub-matrices with explicit row strides (leading dimensions)
/// of the stored operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm_ld<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    trans_a: bool,
    b: &[T],
    ldb: usize,
    trans_b: bool,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v = *v * beta;
            }
        }
        return;
    }
    let (ar, ac) = if trans_a { (k, m) } else { (m, k) };
    let (br, bc) = if trans_b { (n, k) } else { (k, n) };
    assert!(lda >= ac && a.len() >= (ar - 1) * lda + ac);
    assert!(ldb >= bc && b.len() >= (br - 1) * ldb + bc);
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let (rsb, csb) = if trans_b { (1, ldb as isize) } else { (ldb as isize, 1) };
    T::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, ldc as isize);
}

/// Shape bookkeeping for a 3D convolution over `[C, D, H, W]` inputs.
/// Two-dimensional convolutions use `D = 1` with a depth-1 kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(Error::Shape("convolution stride and kernel must be >= 1".into()));
            }
            let span = input[a] + 2 * pad[a];
            if span < kernel[a] {
                return Err(Error::Shape(format!(
                    "kernel {:?} larger than padded input {:?}",
                    kernel, input
                )));
            }
            output[a] = (span - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            c_in,
            c_out,
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel_volume()
    }

    /// For each kernel tap along axis `a`: output index range whose source
    /// coordinate `o·stride + tap − pad` falls inside the input.
    fn valid_range(&self, a: usize, tap: usize) -> (usize, usize) {
        let (s, p, n) = (self.stride[a] as isize, self.pad[a] as isize, self.input[a] as isize);
        let t = tap as isize;
        // o·s + t − p ≥ 0  and  o·s + t − p ≤ n − 1
        let lo = ((p - t).max(0) + s - 1) / s;
        let hi_num = n - 1 + p - t;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(self.output[a] as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<T: Real>(v: &[T]) -> T {
    let (mut s, mut c) = (T::zero(), T::zero());
    for &x in v {
        let t = s + x;
        c = c + if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Unfold `x[c_in, D, H, W]` into `col[c_in·K, N_out]`.
pub fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    im2col_lines(g, x, 0, g.output[0] * g.output[1], col);
}

/// Columns of [`im2col`] for output lines `l0..l1`, where a line is one
/// `(z, y)` row of `ow` output positions. `col` is `[c_in·K, (l1−l0)·ow]`.
pub fn im2col_lines<T: Real>(g: &ConvGeom, x: &[T], l0: usize, l1: usize, col: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let [id, ih, iw] = g.input;
    let nc = (l1 - l0) * ow;
    debug_assert_eq!(col.len(), g.c_in * kd * kh * kw * nc);
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for tz in 0..kd {
            let (z0, z1) = g.valid_range(0, tz);
            for ty in 0..kh {
                let (y0, y1) = g.valid_range(1, ty);
                for tx in 0..kw {
                    let (x0, x1) = g.valid_range(2, tx);
                    let dst = &mut col[row * nc..(row + 1) * nc];
                    for l in l0..l1 {
                        let (oz, oy) = (l / oh, l % oh);
                        let d = &mut dst[(l - l0) * ow..(l - l0 + 1) * ow];
                        if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                            d.fill(T::zero());
                            continue;
                        }
                        let iz = oz * g.stride[0] + tz - g.pad[0];
                        let iy = oy * g.stride[1] + ty - g.pad[1];
                        let src = &xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                        d[..x0].fill(T::zero());
                        d[x1..].fill(T::zero());
                        if g.stride[2] == 1 && x0 < x1 {
                            let ix0 = x0 + tx - g.pad[2];
                            d[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for ox in x0..x1 {
                                d[ox] = src[ox * g.stride[2] + tx - g.pad[2]];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `x`.
pub fn col2im<T: Real>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    col2im_lines(g, col, 0, g.output[0] * g.output[1], x);
}

/// Adjoint of [`im2col_lines`].
pub fn col2im_lines<T: Real>(g: &ConvGeom, col: &[T], l0: usize, l1: usize, x: &mut [T]) {
    let [kd, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let [id, ih, iw] = g.input;
    let nc = (l1 - l0) * ow;
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &mut x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for tz in 0..kd {
            let (z0, z1) = g.valid_range(0, tz);
            for ty in 0..kh {
                let (y0, y1) = g.valid_range(1, ty);
                for tx in 0..kw {
                    let (x0, x1) = g.valid_range(2, tx);
                    let src = &col[row * nc..(row + 1) * nc];
                    for l in l0..l1 {
                        let (oz, oy) = (l / oh, l % oh);
                        if oz < z0 || oz >= z1 || oy < y0 || oy >= y1 {
                            continue;
                        }
                        let iz = oz * g.stride[0] + tz - g.pad[0];
                        let iy = oy * g.stride[1] + ty - g.pad[1];
                        let dst = &mut xc[(iz * ih + iy) * iw..(iz * ih + iy + 1) * iw];
                        let s = &src[(l - l0) * ow..(l - l0 + 1) * ow];
                        if g.stride[2] == 1 && x0 < x1 {
                            let ix0 = x0 + tx - g.pad[2];
                            for (d, &v) in dst[ix0..ix0 + (x1 - x0)].iter_mut().zip(&s[x0..x1]) {
                                *d = *d + v;
                            }
                        } else {
                            for ox in x0..x1 {
                                let ix = ox * g.stride[2] + tx - g.pad[2];
                                dst[ix] = dst[ix] + s[ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Unfolded-column budget per chunk; keeps the im2col buffer cache-sized.
const COL_CHUNK_ELEMS: usize = 1 << 17;

/// Split the output lines into chunks whose unfolded block fits the budget.
fn line_chunks(g: &ConvGeom, budget: usize) -> impl Iterator<Item = (usize, usize)> {
    let ck = g.c_in * g.kernel_volume();
    let lines = g.output[0] * g.output[1];
    let per = (budget / (ck * g.output[2]).max(1)).clamp(1, lines.max(1));
    (0..lines).step_by(per).map(move |l0| (l0, (l0 + per).min(lines)))
}

/// `out[c_out, N] = W[c_out, c_in·K] · im2col(x) (+ bias)`.
pub fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let ck = g.c_in * g.kernel_volume();
    let n = g.out_spatial();
    let ow = g.output[2];
    let mut out = vec![T::zero(); g.c_out * n];
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(b[o]);
        }
    }
    let mut col = Vec::new();
    for (l0, l1) in line_chunks(g, COL_CHUNK_ELEMS) {
        let nc = (l1 - l0) * ow;
        col.resize(ck * nc, T::zero());
        im2col_lines(g, x, l0, l1, &mut col);
        gemm_ld(g.c_out, ck, nc, w, ck, false, &col, nc, false, T::one(), &mut out[l0 * ow..], n);
    }
    out
}

/// Gradient of the convolution with respect to its input:
/// `col2im(Wᵀ · gout)`.
pub fn conv_input_grad<T: Real>(g: &ConvGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let ck = g.c_in * g.kernel_volume();
    let n = g.out_spatial();
    let ow = g.output[2];
    let mut x = vec![T::zero(); g.c_in * g.in_spatial()];
    let mut col = Vec::new();
    for (l0, l1) in line_chunks(g, COL_CHUNK_ELEMS) {
        let nc = (l1 - l0) * ow;
        col.resize(ck * nc, T::zero());
        gemm_ld(ck, g.c_out, nc, w, ck, true, &gout[l0 * ow..], n, false, T::zero(), &mut col, nc);
        col2im_lines(g, &col, l0, l1, &mut x);
    }
    x
}

/// Gradient of the convolution with respect to its weights:
/// `gout · im2col(x)ᵀ`, accumulated into `gw`.
pub fn conv_weight_grad<T: Real>(g: &ConvGeom, x: &[T], gout: &[T], gw: &mut [T]) {
    let ck = g.c_in * g.kernel_volume();
    let n = g.out_spatial();
    let ow = g.output[2];
    let mut col = Vec::new();
    for (l0, l1) in line_chunks(g, 4 * COL_CHUNK_ELEMS) {
        let nc = (l1 - l0) * ow;
        col.resize(ck * nc, T::zero());
        im2col_lines(g, x, l0, l1, &mut col);
        gemm_ld(g.c_out, nc, ck, &gout[l0 * ow..], n, false, &col, nc, true, T::one(), gw, ck);
    }
}

/// Two-tap linear interpolation weights for resizing `n_in → n_out` samples,
/// sampling at pixel centres.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let f = src - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

/// Apply 1D taps along the last axis of `[rows, n_in] → [rows, n_out]`.
fn taps_last<T: Real>(x: &[T], rows: usize, n_in: usize, taps: &[(usize, usize, f64, f64)]) -> Vec<T> {
    let n_out = taps.len();
    let mut out = vec![T::zero(); rows * n_out];
    for r in 0..rows {
        let src = &x[r * n_in..(r + 1) * n_in];
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            out[r * n_out + o] = src[i0] * T::of(w0) + src[i1] * T::of(w1);
        }
    }
    out
}

fn taps_last_adjoint<T: Real>(g: &[T], rows: usize, n_in: usize, taps: &[(usize, usize, f64, f64)]) -> Vec<T> {
    let n_out = taps.len();
    let mut out = vec![T::zero(); rows * n_in];
    for r in 0..rows {
        let dst = &mut out[r * n_in..(r + 1) * n_in];
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let v = g[r * n_out + o];
            dst[i0] = dst[i0] + v * T::of(w0);
            dst[i1] = dst[i1] + v * T::of(w1);
        }
    }
    out
}

/// Taps along the middle axis of `[outer, n_in, inner]`.
fn taps_mid<T: Real>(x: &[T], outer: usize, n_in: usize, inner: usize, taps: &[(usize, usize, f64, f64)]) -> Vec<T> {
    let n_out = taps.len();
    let mut out = vec![T::zero(); outer * n_out * inner];
    for b in 0..outer {
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            let s0 = &x[(b * n_in + i0) * inner..(b * n_in + i0 + 1) * inner];
            let s1 = &x[(b * n_in + i1) * inner..(b * n_in + i1 + 1) * inner];
            let d = &mut out[(b * n_out + o) * inner..(b * n_out + o + 1) * inner];
            for k in 0..inner {
                d[k] = s0[k] * w0 + s1[k] * w1;
            }
        }
    }
    out
}

fn taps_mid_adjoint<T: Real>(
    g: &[T],
    outer: usize,
    n_in: usize,
    inner: usize,
    taps: &[(usize, usize, f64, f64)],
) -> Vec<T> {
    let n_out = taps.len();
    let mut out = vec![T::zero(); outer * n_in * inner];
    for b in 0..outer {
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(w0), T::of(w1));
            for k in 0..inner {
                let v = g[(b * n_out + o) * inner + k];
                out[(b * n_in + i0) * inner + k] = out[(b * n_in + i0) * inner + k] + v * w0;
                out[(b * n_in + i1) * inner + k] = out[(b * n_in + i1) * inner + k] + v * w1;
            }
        }
    }
    out
}

/// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`.
pub fn resize_bilinear<T: Real>(x: &[T], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let tw = bilinear_taps(w, out_w);
    let th = bilinear_taps(h, out_h);
    let along_w = taps_last(x, c * h, w, &tw);
    taps_mid(&along_w, c, h, out_w, &th)
}

pub fn resize_bilinear_adjoint<T: Real>(g: &[T], c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let tw = bilinear_taps(w, out_w);
    let th = bilinear_taps(h, out_h);
    let along_h = taps_mid_adjoint(g, c, h, out_w, &th);
    taps_last_adjoint(&along_h, c * h, w, &tw)
}

/// Truncated Gaussian window with per-position renormalisation at the
/// borders: for each output index, `(first source index, weights)`.
pub fn gaussian_taps(n: usize, sigma: f64, radius: usize) -> Vec<(usize, Vec<f64>)> {
    let kernel: Vec<f64> = (0..=2 * radius)
        .map(|k| {
            let d = k as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let w: Vec<f64> = (lo..=hi).map(|j| kernel[j + radius - i]).collect();
            let total: f64 = w.iter().sum();
            (lo, w.into_iter().map(|v| v / total).collect())
        })
        .collect()
}

fn window_pass<T: Real>(x: &[T], outer: usize, n: usize, inner: usize, taps: &[(usize, Vec<f64>)], adjoint: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..outer {
        for (i, (lo, w)) in taps.iter().enumerate() {
            for (k, &wk) in w.iter().enumerate() {
                let j = lo + k;
                let wk = T::of(wk);
                let (src, dst) = if adjoint { (i, j) } else { (j, i) };
                let s = (b * n + src) * inner;
                let d = (b * n + dst) * inner;
                for t in 0..inner {
                    out[d + t] = out[d + t] + x[s + t] * wk;
                }
            }
        }
    }
    out
}

/// Separable Gaussian smoothing of `[outer, D, H, W]` over the last three axes.
pub fn gaussian_blur3d<T: Real>(x: &[T], outer: usize, dims: [usize; 3], sigma: f64, radius: usize, adjoint: bool) -> Vec<T> {
    let [d, h, w] = dims;
    let td = gaussian_taps(d, sigma, radius);
    let th = gaussian_taps(h, sigma, radius);
    let tw = gaussian_taps(w, sigma, radius);
    let passes: [(usize, usize, usize, &[(usize, Vec<f64>)]); 3] = [
        (outer * d * h, w, 1, &tw),
        (outer * d, h, w, &th),
        (outer, d, h * w, &td),
    ];
    let mut cur = x.to_vec();
    if adjoint {
        for &(o, n, i, t) in passes.iter().rev() {
            cur = window_pass(&cur, o, n, i, t, true);
        }
    } else {
        for &(o, n, i, t) in passes.iter() {
            cur = window_pass(&cur, o, n, i, t, false);
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_keeps_small_terms() {
        assert_eq!(compensated_sum(&[1e16f64, 1.0, -1e16]), 1.0);
        assert_eq!(compensated_sum(&[1e8f32, 1.0, -1e8]), 1.0);
        assert_eq!(compensated_sum::<f64>(&[]), 0.0);
    }

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let [od, oh, ow] = g.output;
        let [id, ih, iw] = g.input;
        let [kd, kh, kw] = g.kernel;
        let mut out = vec![0.0; g.c_out * od * oh * ow];
        for o in 0..g.c_out {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let iy = (y * g.stride[1] + b) as isize - g.pad[1] as isize;
                                        let ix = (xx * g.stride[2] + e) as isize - g.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= id as isize || iy >= ih as isize || ix >= iw as isize {
                                            continue;
                                        }
                                        let xi = ((c * id + iz as usize) * ih + iy as usize) * iw + ix as usize;
                                        let wi = (((o * g.c_in + c) * kd + a) * kh + b) * kw + e;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((o * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 2, 1], [0, 1, 2])] {
            let g = ConvGeom::new(2, 3, [5, 6, 7], [3, 3, 3], stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 5 * 6 * 7).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let fast = conv_forward(&g, &x, &w, None);
            let slow = naive_conv(&g, &x, &w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_input_grad_is_adjoint() {
        let g = ConvGeom::new(2, 3, [4, 5, 6], [3, 3, 3], [2, 1, 2], [1, 1, 1]).unwrap();
        let x: Vec<f64> = (0..2 * 4 * 5 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..g.weight_len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = (0..3 * g.out_spatial()).map(|i| (i as f64 * 0.7).sin()).collect();
        let ax = conv_forward(&g, &x, &w, None);
        let aty = conv_input_grad(&g, &y, &w);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn ones_kernel_center_value() {
        let g = ConvGeom::new(1, 1, [1, 5, 5], [1, 3, 3], [1, 1, 1], [0, 1, 1]).unwrap();
        let out = conv_forward(&g, &[1.0f64; 25], &[1.0; 9], None);
        assert_eq!(out[2 * 5 + 2], 9.0);
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn resize_adjoint_and_constant() {
        let x: Vec<f64> = vec![2.5; 3 * 4 * 5];
        let y = resize_bilinear(&x, 3, 4, 5, 7, 9);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let x: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..3 * 7 * 9).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = resize_bilinear(&x, 3, 4, 5, 7, 9).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = resize_bilinear_adjoint(&g, 3, 4, 5, 7, 9).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn blur_preserves_constants_and_is_adjoint() {
        let dims = [5, 6, 7];
        let c: Vec<f64> = vec![3.0; 2 * 210];
        assert!(gaussian_blur3d(&c, 2, dims, 1.5, 5, false).iter().all(|v| (v - 3.0).abs() < 1e-12));
        let x: Vec<f64> = (0..420).map(|i| (i as f64 * 0.13).sin()).collect();
        let y: Vec<f64> = (0..420).map(|i| (i as f64 * 0.29).cos()).collect();
        let lhs: f64 = gaussian_blur3d(&x, 2, dims, 1.5, 5, false).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = gaussian_blur3d(&y, 2, dims, 1.5, 5, true).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
