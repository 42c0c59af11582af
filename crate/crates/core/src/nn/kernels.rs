//! Strided 2-D correlation kernels shared by convolution and transposed convolution.
//!
//! A [`Geometry`] relates a "big" plane stack `[C_b, H_b, W_b]` to a "small"
//! one `[C_s, H_s, W_s]` through a `k×k` window with stride and zero padding.
//! Convolution maps big → small with [`correlate`]; its adjoint
//! [`correlate_transpose`] maps small → big and is exactly the transposed
//! convolution forward pass. Weight matrices are `[C_s, C_b·k·k]` row-major.

use crate::par;
use crate::tensor::linalg::{gemm, MatMut, MatRef};
use crate::tensor::Real;

/// Upper bound on im2col scratch elements per task.
const COL_BUDGET: usize = 1 << 20;

/// Stride-1 layers with at most this many small-side channels skip im2col.
const DIRECT_MAX_SMALL_C: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub big_c: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.big_c * self.k * self.k
    }

    fn big_plane(&self) -> usize {
        self.big_h * self.big_w
    }

    fn small_plane(&self) -> usize {
        self.small_h * self.small_w
    }

    fn row_chunks(&self, col_rows: usize) -> Vec<(usize, usize)> {
        let per = (COL_BUDGET / (col_rows * self.small_w).max(1)).clamp(1, self.small_h);
        (0..self.small_h).step_by(per).map(|r0| (r0, (r0 + per).min(self.small_h))).collect()
    }

    fn direct(&self, small_c: usize) -> bool {
        self.stride == 1 && small_c <= DIRECT_MAX_SMALL_C
    }

    /// Output columns `s` whose source `s + kx − pad` lies inside the big plane.
    fn span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.big_w + self.pad).saturating_sub(kx).min(self.small_w);
        (lo, hi.max(lo))
    }

    /// Calls `f(o, c, ky, kx, y, r, s0, s1)` for every in-bounds row pairing of a stride-1 window.
    fn for_each_line(&self, small_c: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
        for o in 0..small_c {
            for c in 0..self.big_c {
                for ky in 0..self.k {
                    for r in 0..self.small_h {
                        let Some(y) = self.src(r, ky, self.big_h) else { continue };
                        for kx in 0..self.k {
                            let (s0, s1) = self.span(kx);
                            f(o, c, ky, kx, y, r, s0, s1);
                        }
                    }
                }
            }
        }
    }

    fn widx(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.big_c + c) * self.k + ky) * self.k + kx
    }

    /// Source coordinate along one axis, or `None` inside the zero padding.
    #[inline]
    fn src(&self, out: usize, tap: usize, limit: usize) -> Option<usize> {
        let v = (out * self.stride + tap) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < limit).then_some(v as usize)
    }

    /// Fills `cols[(c·k·k + ky·k + kx), (r − r0)·W_s + s]` for channels `c0..c1`.
    fn im2col<T: Real>(&self, big: &[T], c0: usize, c1: usize, rows: (usize, usize), cols: &mut [T]) {
        let (r0, r1) = rows;
        let n = (r1 - r0) * self.small_w;
        let k = self.k;
        for c in c0..c1 {
            let plane = &big[c * self.big_plane()..(c + 1) * self.big_plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c - c0) * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for r in r0..r1 {
                        let line = &mut dst[(r - r0) * self.small_w..(r - r0 + 1) * self.small_w];
                        match self.src(r, ky, self.big_h) {
                            None => line.iter_mut().for_each(|v| *v = T::zero()),
                            Some(y) => {
                                let src = &plane[y * self.big_w..(y + 1) * self.big_w];
                                for (s, v) in line.iter_mut().enumerate() {
                                    *v = self.src(s, kx, self.big_w).map_or(T::zero(), |x| src[x]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters `cols` back, adding into `big_group`
    /// (which holds channels `c0..c1` only).
    fn col2im<T: Real>(&self, cols: &[T], c0: usize, c1: usize, rows: (usize, usize), big_group: &mut [T]) {
        let (r0, r1) = rows;
        let n = (r1 - r0) * self.small_w;
        let k = self.k;
        for c in c0..c1 {
            let plane = &mut big_group[(c - c0) * self.big_plane()..(c - c0 + 1) * self.big_plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c - c0) * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for r in r0..r1 {
                        let Some(y) = self.src(r, ky, self.big_h) else { continue };
                        let line = &src[(r - r0) * self.small_w..(r - r0 + 1) * self.small_w];
                        let dst = &mut plane[y * self.big_w..(y + 1) * self.big_w];
                        for (s, &v) in line.iter().enumerate() {
                            if let Some(x) = self.src(s, kx, self.big_w) {
                                dst[x] = dst[x] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with eight interleaved partial sums.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ac.remainder().iter().zip(bc.remainder()).fold(T::zero(), |t, (&p, &q)| t + p * q);
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |t, &v| t + v)
}

/// `small = wmat · im2col(big)` for one sample; `small` is overwritten.
pub(crate) fn correlate<T: Real>(g: &Geometry, big: &[T], wmat: &[T], small_c: usize, small: &mut [T]) {
    let kk_rows = g.col_rows();
    debug_assert_eq!(wmat.len(), small_c * kk_rows);
    debug_assert_eq!(small.len(), small_c * g.small_plane());
    if g.direct(small_c) {
        small.iter_mut().for_each(|v| *v = T::zero());
        let (bp, sp) = (g.big_plane(), g.small_plane());
        g.for_each_line(small_c, |o, c, ky, kx, y, r, s0, s1| {
            let w = wmat[g.widx(o, c, ky, kx)];
            let x0 = s0 + kx - g.pad;
            let src = &big[c * bp + y * g.big_w + x0..][..s1 - s0];
            let dst = &mut small[o * sp + r * g.small_w + s0..][..s1 - s0];
            for (d, &b) in dst.iter_mut().zip(src) {
                *d = *d + w * b;
            }
        });
        return;
    }
    let chunks = g.row_chunks(kk_rows);
    let parts = par::map(chunks.len(), |i| {
        let rows = chunks[i];
        let n = (rows.1 - rows.0) * g.small_w;
        let mut cols = vec![T::zero(); kk_rows * n];
        g.im2col(big, 0, g.big_c, rows, &mut cols);
        let mut out = vec![T::zero(); small_c * n];
        gemm(
            T::one(),
            MatRef::new(wmat, 0, small_c, kk_rows),
            MatRef::new(&cols, 0, kk_rows, n),
            T::zero(),
            MatMut::new(&mut out, 0, small_c, n),
        );
        out
    });
    let plane = g.small_plane();
    for (&(r0, r1), part) in chunks.iter().zip(parts) {
        let n = (r1 - r0) * g.small_w;
        for c in 0..small_c {
            small[c * plane + r0 * g.small_w..c * plane + r1 * g.small_w].copy_from_slice(&part[c * n..(c + 1) * n]);
        }
    }
}

/// `big += col2im(wmatᵀ · small)` for one sample.
pub(crate) fn correlate_transpose<T: Real>(g: &Geometry, small: &[T], wmat: &[T], small_c: usize, big: &mut [T]) {
    let kk = g.k * g.k;
    let row_len = g.col_rows();
    debug_assert_eq!(wmat.len(), small_c * row_len);
    debug_assert_eq!(big.len(), g.big_c * g.big_plane());
    if g.direct(small_c) {
        let (bp, sp) = (g.big_plane(), g.small_plane());
        g.for_each_line(small_c, |o, c, ky, kx, y, r, s0, s1| {
            let w = wmat[g.widx(o, c, ky, kx)];
            let x0 = s0 + kx - g.pad;
            let src = &small[o * sp + r * g.small_w + s0..][..s1 - s0];
            let dst = &mut big[c * bp + y * g.big_w + x0..][..s1 - s0];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = *d + w * v;
            }
        });
        return;
    }
    let group = g.big_c.div_ceil(4).max(1);
    let chunks = g.row_chunks(group * kk);
    let plane = g.small_plane();
    par::for_each_chunk(big, group * g.big_plane(), |gi, big_group| {
        let c0 = gi * group;
        let c1 = (c0 + group).min(g.big_c);
        let m = (c1 - c0) * kk;
        let mut cols = Vec::new();
        for &(r0, r1) in &chunks {
            let n = (r1 - r0) * g.small_w;
            cols.clear();
            cols.resize(m * n, T::zero());
            // columns c0·kk .. c1·kk of wmat, transposed
            let wt = MatRef::strided(wmat, c0 * kk, m, small_c, 1, row_len);
            let rhs = MatRef::strided(small, r0 * g.small_w, small_c, n, plane, 1);
            gemm(T::one(), wt, rhs, T::zero(), MatMut::new(&mut cols, 0, m, n));
            g.col2im(&cols, c0, c1, (r0, r1), big_group);
        }
    });
}

/// `dw += small · im2col(big)ᵀ` for one sample.
pub(crate) fn weight_grad<T: Real>(g: &Geometry, big: &[T], small: &[T], small_c: usize, dw: &mut [T]) {
    let kk_rows = g.col_rows();
    debug_assert_eq!(dw.len(), small_c * kk_rows);
    if g.direct(small_c) {
        let (bp, sp) = (g.big_plane(), g.small_plane());
        g.for_each_line(small_c, |o, c, ky, kx, y, r, s0, s1| {
            let x0 = s0 + kx - g.pad;
            let a = &small[o * sp + r * g.small_w + s0..][..s1 - s0];
            let b = &big[c * bp + y * g.big_w + x0..][..s1 - s0];
            let dot = dot(a, b);
            let i = g.widx(o, c, ky, kx);
            dw[i] = dw[i] + dot;
        });
        return;
    }
    let chunks = g.row_chunks(kk_rows);
    let plane = g.small_plane();
    let parts = par::map(chunks.len(), |i| {
        let rows = chunks[i];
        let n = (rows.1 - rows.0) * g.small_w;
        let mut cols = vec![T::zero(); kk_rows * n];
        g.im2col(big, 0, g.big_c, rows, &mut cols);
        let mut part = vec![T::zero(); small_c * kk_rows];
        gemm(
            T::one(),
            MatRef::strided(small, rows.0 * g.small_w, small_c, n, plane, 1),
            MatRef::new(&cols, 0, kk_rows, n).t(),
            T::zero(),
            MatMut::new(&mut part, 0, small_c, kk_rows),
        );
        part
    });
    for part in parts {
        for (d, p) in dw.iter_mut().zip(part) {
            *d = *d + p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop correlation used as the reference.
    fn reference(g: &Geometry, big: &[f64], w: &[f64], small_c: usize) -> Vec<f64> {
        let mut out = vec![0.0; small_c * g.small_plane()];
        for o in 0..small_c {
            for r in 0..g.small_h {
                for s in 0..g.small_w {
                    let mut acc = 0.0;
                    for c in 0..g.big_c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let y = (r * g.stride + ky) as isize - g.pad as isize;
                                let x = (s * g.stride + kx) as isize - g.pad as isize;
                                if y < 0 || x < 0 || y >= g.big_h as isize || x >= g.big_w as isize {
                                    continue;
                                }
                                acc += w[((o * g.big_c + c) * g.k + ky) * g.k + kx]
                                    * big[(c * g.big_h + y as usize) * g.big_w + x as usize];
                            }
                        }
                    }
                    out[(o * g.small_h + r) * g.small_w + s] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: usize) -> Vec<f64> {
        (0..n).map(|i| (((i * 7919 + salt * 104729) % 1000) as f64) / 500.0 - 1.0).collect()
    }

    #[test]
    fn correlate_matches_direct_loops() {
        for &(k, stride, pad, h) in &[(3, 1, 1, 5), (3, 2, 1, 8), (7, 1, 3, 9), (1, 1, 0, 4)] {
            let small_h = (h + 2 * pad - k) / stride + 1;
            let g = Geometry { big_c: 2, big_h: h, big_w: h + 1, small_h, small_w: (h + 1 + 2 * pad - k) / stride + 1, k, stride, pad };
            let big = pseudo(2 * h * (h + 1), 1);
            let w = pseudo(3 * 2 * k * k, 2);
            let mut out = vec![0.0; 3 * g.small_plane()];
            correlate(&g, &big, &w, 3, &mut out);
            let want = reference(&g, &big, &w, 3);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b} for k={k} stride={stride}");
            }
        }
    }

    #[test]
    fn wide_stride_one_layers_match_direct_loops() {
        let g = Geometry { big_c: 3, big_h: 6, big_w: 7, small_h: 6, small_w: 7, k: 3, stride: 1, pad: 1 };
        let small_c = DIRECT_MAX_SMALL_C + 2;
        assert!(!g.direct(small_c));
        let big = pseudo(3 * 42, 6);
        let w = pseudo(small_c * 27, 7);
        let mut out = vec![0.0; small_c * 42];
        correlate(&g, &big, &w, small_c, &mut out);
        for (a, b) in out.iter().zip(&reference(&g, &big, &w, small_c)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_is_adjoint_and_weight_grad_is_consistent() {
        for &(stride, small_h, small_c, k, pad) in &[(2, 4, 2, 3, 1), (1, 8, 2, 3, 1), (1, 6, 3, 5, 1), (1, 8, 12, 3, 1)] {
            let g = Geometry { big_c: 3, big_h: 8, big_w: 8, small_h, small_w: small_h, k, stride, pad };
            let sp = small_h * small_h;
            let big = pseudo(3 * 64, 3);
            let small = pseudo(small_c * sp, 4);
            let w = pseudo(small_c * 3 * k * k, 5);
            let mut fwd = vec![0.0; small_c * sp];
            correlate(&g, &big, &w, small_c, &mut fwd);
            let mut adj = vec![0.0; 3 * 64];
            correlate_transpose(&g, &small, &w, small_c, &mut adj);
            let lhs: f64 = fwd.iter().zip(&small).map(|(a, b)| a * b).sum();
            let rhs: f64 = big.iter().zip(&adj).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride} small_c {small_c}");
            // <small, W·cols(big)> is linear in W with gradient small·cols(big)ᵀ
            let mut dw = vec![0.0; w.len()];
            weight_grad(&g, &big, &small, small_c, &mut dw);
            let via_grad: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
            assert!((via_grad - lhs).abs() < 1e-10, "stride {stride} small_c {small_c}");
        }
    }
}
