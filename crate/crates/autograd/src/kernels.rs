//! Raw buffer kernels shared by the convolution ops.

use crate::real::Real;

/// Geometry of a 2-d convolution over an `n x c x h x w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        assert!(stride >= 1, "stride must be positive");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Self {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }
    }

    /// Rows of the column matrix.
    #[inline]
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the column matrix.
    #[inline]
    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `x` (`n x c x h x w`) into a `k x (n*oh*ow)` column matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.k() * ncols];
    let plane = g.h * g.w;
    let opl = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[n * opl + oy * g.ow..n * opl + (oy + 1) * g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a column matrix back, accumulating into `x` (`n x c x h x w`).
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.cols();
    let plane = g.h * g.w;
    let opl = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src = &src_row[n * opl + oy * g.ow..n * opl + (oy + 1) * g.ow];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[a, b, inner]` -> `[b, a, inner]`.
pub fn swap_outer<T: Real>(x: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            let src = &x[(i * b + j) * inner..(i * b + j + 1) * inner];
            out[(j * a + i) * inner..(j * a + i + 1) * inner].copy_from_slice(src);
        }
    }
    out
}

/// Whether a stride-1 conv is cheap enough to run without unfolding.
///
/// Few channel pairs mean the column matrix is mostly copy traffic.
pub fn prefers_direct(g: &ConvGeom, co: usize) -> bool {
    g.stride == 1 && co * g.c <= 64
}

/// Valid output columns `[lo, hi)` for kernel column `kj` (stride 1).
#[inline]
fn span(g: &ConvGeom, k: usize, out: usize, inp: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k);
    let hi = (inp + g.pad).saturating_sub(k).min(out);
    (lo, hi.max(lo))
}

/// Stride-1 cross-correlation accumulated into `out` (`n x co x oh x ow`).
pub fn direct_conv<T: Real>(x: &[T], w: &[T], g: &ConvGeom, co: usize, out: &mut [T]) {
    debug_assert_eq!(g.stride, 1);
    let (plane, opl) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for o in 0..co {
            let dst = &mut out[(n * co + o) * opl..(n * co + o + 1) * opl];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                for ki in 0..g.kh {
                    let (ylo, yhi) = span(g, ki, g.oh, g.h);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (xlo, xhi) = span(g, kj, g.ow, g.w);
                        let shift = kj + xlo - g.pad;
                        for oy in ylo..yhi {
                            let iy = oy + ki - g.pad;
                            let s = &src[iy * g.w + shift..iy * g.w + shift + (xhi - xlo)];
                            let d = &mut dst[oy * g.ow + xlo..oy * g.ow + xhi];
                            d.iter_mut().zip(s).for_each(|(d, &s)| *d += wv * s);
                        }
                    }
                }
            }
        }
    }
}

/// Input gradient of [`direct_conv`], accumulated into `gx`.
pub fn direct_conv_grad_x<T: Real>(gy: &[T], w: &[T], g: &ConvGeom, co: usize, gx: &mut [T]) {
    let (plane, opl) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for c in 0..g.c {
            let dst = &mut gx[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
            for o in 0..co {
                let src = &gy[(n * co + o) * opl..(n * co + o + 1) * opl];
                for ki in 0..g.kh {
                    let (ylo, yhi) = span(g, ki, g.oh, g.h);
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (xlo, xhi) = span(g, kj, g.ow, g.w);
                        let shift = kj + xlo - g.pad;
                        for oy in ylo..yhi {
                            let iy = oy + ki - g.pad;
                            let s = &src[oy * g.ow + xlo..oy * g.ow + xhi];
                            let d = &mut dst[iy * g.w + shift..iy * g.w + shift + (xhi - xlo)];
                            d.iter_mut().zip(s).for_each(|(d, &s)| *d += wv * s);
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient of [`direct_conv`], accumulated into `gw`.
pub fn direct_conv_grad_w<T: Real>(gy: &[T], x: &[T], g: &ConvGeom, co: usize, gw: &mut [T]) {
    let (plane, opl) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for o in 0..co {
            let go = &gy[(n * co + o) * opl..(n * co + o + 1) * opl];
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * plane..(n * g.c + c + 1) * plane];
                for ki in 0..g.kh {
                    let (ylo, yhi) = span(g, ki, g.oh, g.h);
                    for kj in 0..g.kw {
                        let (xlo, xhi) = span(g, kj, g.ow, g.w);
                        let shift = kj + xlo - g.pad;
                        let mut acc = T::zero();
                        for oy in ylo..yhi {
                            let iy = oy + ki - g.pad;
                            let s = &src[iy * g.w + shift..iy * g.w + shift + (xhi - xlo)];
                            let d = &go[oy * g.ow + xlo..oy * g.ow + xhi];
                            acc += dot(d, s);
                        }
                        gw[((o * g.c + c) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // four partial sums so the loop vectorises
    let mut p = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            p[i] += x[i] * y[i];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    (p[0] + p[1]) + (p[2] + p[3]) + tail
}
