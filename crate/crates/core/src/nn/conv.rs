//! 2-D convolution and transposed convolution: direct kernels for stride-1
//! 3/5/7 taps, im2col + GEMM otherwise.
//!
//! Convolution here is cross-correlation: the kernel is not flipped.
//! Kernels are laid out `(out_channels, in_channels, k, k)`, which is exactly
//! the row-major `O x (C*k*k)` matrix the GEMM consumes.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{sum_f64, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on the top and left (and as much as needed on
    /// the bottom and right), preserving size at stride 1.
    Same,
    Valid,
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding before the first row/column.
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: Padding) -> Self {
        let pad = match padding {
            Padding::Same => kernel / 2,
            Padding::Valid => 0,
        };
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Geometry of the stride-2 convolution whose adjoint doubles resolution.
    pub fn upsample(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 2,
            pad: kernel / 2,
        }
    }

    pub fn out_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

fn check_kernel<T: Scalar>(op: &'static str, w: &Tensor<T>, g: ConvGeom) -> Result<()> {
    let s = w.shape();
    if s.h != g.kernel || s.w != g.kernel {
        return Err(Error::pre(
            op,
            format!(
                "kernel tensor {s} does not match {}x{} geometry",
                g.kernel, g.kernel
            ),
        ));
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape()
            != (Shape {
                n: 1,
                c: channels,
                h: 1,
                w: 1,
            })
        {
            return Err(Error::pre(
                op,
                format!(
                    "bias {} does not match {channels} output channels",
                    b.shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Unfolds one `(c, h, w)` sample into a `(c*k*k) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let k = g.kernel;
    let p = oh * ow;
    let zero = T::zero();
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(zero);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        // ix = ox + shift
                        let shift = kj as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        dst[..lo].fill(zero);
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        dst[hi..].fill(zero);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                zero
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulating) a column matrix back onto
/// a zeroed `(c, h, w)` sample.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let k = g.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let shift = kj as isize - g.pad as isize;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        let d0 = (lo as isize + shift) as usize;
                        for (d, &s) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: ConvGeom) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

/// Stride-1 layers with kernels of 3, 5 or 7 run as register-blocked
/// correlations over a zero-padded source instead of im2col + GEMM.
fn use_direct(g: ConvGeom) -> bool {
    g.stride == 1 && matches!(g.kernel, 3 | 5 | 7) && g.pad < g.kernel
}

const LANES: usize = 16;
/// Output channels per register block.
const OB: usize = 4;
/// Output channels per register block of the kernel gradient.
const OBG: usize = 2;
/// Output rows per pass of the kernel gradient.
const BAND: usize = 8;

/// Layout of a zero-padded `(c, hp, wp)` copy of a `(c, h, w)` sample with
/// `top` rows and `left` columns in front, wide enough for `K`-tap
/// correlations producing `(oh, ow)` in blocks of `LANES`.
#[derive(Clone, Copy)]
struct Padded {
    c: usize,
    h: usize,
    w: usize,
    top: usize,
    left: usize,
    hp: usize,
    wp: usize,
}

impl Padded {
    #[allow(clippy::too_many_arguments)]
    fn new(
        c: usize,
        h: usize,
        w: usize,
        top: usize,
        left: usize,
        k: usize,
        oh: usize,
        ow: usize,
    ) -> Self {
        let hp = (oh + k - 1).max(h + top);
        let wp = (ow + k - 1).max(w + left) + LANES;
        Self {
            c,
            h,
            w,
            top,
            left,
            hp,
            wp,
        }
    }

    fn len(&self) -> usize {
        self.c * self.hp * self.wp
    }

    #[inline(always)]
    fn fill<T: Scalar>(&self, x: &[T], xp: &mut [T]) {
        xp.fill(T::zero());
        for ci in 0..self.c {
            for r in 0..self.h {
                let dst = &mut xp[(ci * self.hp + r + self.top) * self.wp + self.left..][..self.w];
                dst.copy_from_slice(&x[(ci * self.h + r) * self.w..][..self.w]);
            }
        }
    }
}

/// `a * b + c`, fused when `F`.
#[inline(always)]
fn madd<T: Scalar, const F: bool>(a: T, b: T, c: T) -> T {
    if F {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Repacks `(o, c, k, k)` taps as `[o / B][c][k][k][B]`, zero past `o`.
fn pack_taps<T: Scalar, const B: usize>(k: &[T], o: usize, c: usize, kk: usize) -> Vec<T> {
    let blocks = o.div_ceil(B);
    let mut out = vec![T::zero(); blocks * c * kk * kk * B];
    for oc in 0..o {
        let (b, ob) = (oc / B, oc % B);
        for t in 0..c * kk * kk {
            out[(b * c * kk * kk + t) * B + ob] = k[oc * c * kk * kk + t];
        }
    }
    out
}

/// `y[o] = sum_c k[o, c] * xp[c]` (cross-correlation, stride 1), with taps
/// packed by [`pack_taps`] and `y` laid out `(o, oh, ow)`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate<T: Scalar, const K: usize, const B: usize, const F: bool>(
    xp: &[T],
    pd: Padded,
    taps: &[T],
    o: usize,
    oh: usize,
    ow: usize,
    y: &mut [T],
) {
    let (c, hp, wp) = (pd.c, pd.hp, pd.wp);
    for oy in 0..oh {
        for b in 0..o.div_ceil(B) {
            let tb = &taps[b * c * K * K * B..][..c * K * K * B];
            for ox0 in (0..ow).step_by(LANES) {
                let mut acc = [[T::zero(); LANES]; B];
                for ci in 0..c {
                    for ki in 0..K {
                        let row = &xp[(ci * hp + oy + ki) * wp + ox0..][..K - 1 + LANES];
                        let t = &tb[(ci * K + ki) * K * B..][..K * B];
                        for kj in 0..K {
                            let src: &[T; LANES] = row[kj..kj + LANES].try_into().unwrap();
                            for (ob, a) in acc.iter_mut().enumerate() {
                                let wv = t[kj * B + ob];
                                for l in 0..LANES {
                                    a[l] = madd::<T, F>(wv, src[l], a[l]);
                                }
                            }
                        }
                    }
                }
                let n = LANES.min(ow - ox0);
                for (ob, a) in acc.iter().enumerate() {
                    let oc = b * B + ob;
                    if oc < o {
                        y[(oc * oh + oy) * ow + ox0..][..n].copy_from_slice(&a[..n]);
                    }
                }
            }
        }
    }
}

/// One row of [`correlate_grad`]: `acc[ob][kj] += d[ob] * row[kj..]` over
/// whole `LANES` blocks.
#[inline(always)]
fn grad_row<T: Scalar, const K: usize, const F: bool>(
    acc: &mut [[[T; LANES]; K]; OBG],
    d: [&[T]; OBG],
    row: &[T],
    full: usize,
) {
    for ox0 in (0..full).step_by(LANES) {
        let win = &row[ox0..ox0 + LANES + K - 1];
        let d0: &[T; LANES] = d[0][ox0..ox0 + LANES].try_into().unwrap();
        let d1: &[T; LANES] = d[1][ox0..ox0 + LANES].try_into().unwrap();
        for kj in 0..K {
            let src: &[T; LANES] = win[kj..kj + LANES].try_into().unwrap();
            for l in 0..LANES {
                acc[0][kj][l] = madd::<T, F>(d0[l], src[l], acc[0][kj][l]);
            }
            for l in 0..LANES {
                acc[1][kj][l] = madd::<T, F>(d1[l], src[l], acc[1][kj][l]);
            }
        }
    }
}

/// `dw[o, c, ki, kj] += sum dy[o, oy, ox] * xp[c, oy + ki, ox + kj]`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_grad<T: Scalar, const K: usize, const F: bool>(
    xp: &[T],
    pd: Padded,
    dy: &[T],
    o: usize,
    oh: usize,
    ow: usize,
    dw: &mut [T],
) {
    let (c, hp, wp) = (pd.c, pd.hp, pd.wp);
    let full = ow - ow % LANES;
    let zeros = vec![T::zero(); ow];
    for oy0 in (0..oh).step_by(BAND) {
        for b in 0..o.div_ceil(OBG) {
            let live = OBG.min(o - b * OBG);
            for ci in 0..c {
                for ki in 0..K {
                    let mut acc = [[[T::zero(); LANES]; K]; OBG];
                    let mut tail = [[T::zero(); K]; OBG];
                    for oy in oy0..(oy0 + BAND).min(oh) {
                        let row = &xp[(ci * hp + oy + ki) * wp..][..ow + K - 1];
                        let mut d = [&zeros[..]; OBG];
                        for (ob, dv) in d.iter_mut().enumerate().take(live) {
                            *dv = &dy[((b * OBG + ob) * oh + oy) * ow..][..ow];
                        }
                        grad_row::<T, K, F>(&mut acc, d, row, full);
                        for (t, dv) in tail.iter_mut().zip(d) {
                            for ox in full..ow {
                                for (kj, s) in t.iter_mut().enumerate() {
                                    *s += dv[ox] * row[ox + kj];
                                }
                            }
                        }
                    }
                    for ob in 0..live {
                        let oc = b * OBG + ob;
                        let out = &mut dw[((oc * c + ci) * K + ki) * K..][..K];
                        for ((g, a), t) in out.iter_mut().zip(&acc[ob]).zip(tail[ob]) {
                            *g += a.iter().fold(t, |s, &v| s + v);
                        }
                    }
                }
            }
        }
    }
}

macro_rules! by_kernel {
    ($k:expr, $f:ident::<$($g:tt),*>($($arg:expr),* $(,)?)) => {
        match $k {
            3 => $f::<T, 3, $($g),*>($($arg),*),
            5 => $f::<T, 5, $($g),*>($($arg),*),
            7 => $f::<T, 7, $($g),*>($($arg),*),
            k => unreachable!("no direct path for {k}x{k} kernels"),
        }
    };
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn direct_correlate<T: Scalar, const F: bool>(
    xp: &[T],
    pd: Padded,
    taps: &[T],
    kk: usize,
    o: usize,
    oh: usize,
    ow: usize,
    y: &mut [T],
) {
    if o < OB {
        by_kernel!(kk, correlate::<1, F>(xp, pd, taps, o, oh, ow, y))
    } else {
        by_kernel!(kk, correlate::<OB, F>(xp, pd, taps, o, oh, ow, y))
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn direct_grad<T: Scalar, const F: bool>(
    xp: &[T],
    pd: Padded,
    dy: &[T],
    kk: usize,
    o: usize,
    oh: usize,
    ow: usize,
    dw: &mut [T],
) {
    by_kernel!(kk, correlate_grad::<F>(xp, pd, dy, o, oh, ow, dw))
}

/// Taps for [`direct_correlate`] producing `o` channels.
fn direct_taps<T: Scalar>(k: &[T], o: usize, c: usize, kk: usize) -> Vec<T> {
    if o < OB {
        pack_taps::<T, 1>(k, o, c, kk)
    } else {
        pack_taps::<T, OB>(k, o, c, kk)
    }
}

/// Copies of the direct kernels compiled for wider vector units, picked at
/// runtime.
#[cfg(target_arch = "x86_64")]
mod wide {
    use super::*;
    use std::sync::OnceLock;

    #[derive(Clone, Copy, PartialEq, Eq)]
    pub enum Level {
        Base,
        Avx2,
        Avx512,
    }

    pub fn level() -> Level {
        static LEVEL: OnceLock<Level> = OnceLock::new();
        *LEVEL.get_or_init(|| {
            let avx2 = is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma");
            if avx2 && is_x86_feature_detected!("avx512f") {
                Level::Avx512
            } else if avx2 {
                Level::Avx2
            } else {
                Level::Base
            }
        })
    }

    macro_rules! compiled_for {
        ($features:literal, $corr:ident, $grad:ident) => {
            #[target_feature(enable = $features)]
            #[allow(clippy::too_many_arguments)]
            pub unsafe fn $corr<T: Scalar>(
                xp: &[T],
                pd: Padded,
                taps: &[T],
                kk: usize,
                o: usize,
                oh: usize,
                ow: usize,
                y: &mut [T],
            ) {
                super::direct_correlate::<T, true>(xp, pd, taps, kk, o, oh, ow, y)
            }

            #[target_feature(enable = $features)]
            #[allow(clippy::too_many_arguments)]
            pub unsafe fn $grad<T: Scalar>(
                xp: &[T],
                pd: Padded,
                dy: &[T],
                kk: usize,
                o: usize,
                oh: usize,
                ow: usize,
                dw: &mut [T],
            ) {
                super::direct_grad::<T, true>(xp, pd, dy, kk, o, oh, ow, dw)
            }
        };
    }

    compiled_for!("avx2,fma", correlate_avx2, grad_avx2);
    compiled_for!("avx512f,avx2,fma", correlate_avx512, grad_avx512);
}

macro_rules! dispatch {
    ($base:ident, $avx2:ident, $avx512:ident, ($($arg:expr),* $(,)?)) => {{
        #[cfg(target_arch = "x86_64")]
        match wide::level() {
            // SAFETY: the required CPU features were detected at runtime.
            wide::Level::Avx512 => unsafe { wide::$avx512($($arg),*) },
            wide::Level::Avx2 => unsafe { wide::$avx2($($arg),*) },
            wide::Level::Base => $base::<T, false>($($arg),*),
        }
        #[cfg(not(target_arch = "x86_64"))]
        $base::<T, false>($($arg),*)
    }};
}

/// Forward convolution. `w` is `(out, in, k, k)`, `b` is `(1, out, 1, 1)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    check_kernel("conv2d", w, g)?;
    if ws.c != xs.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: ws,
        });
    }
    check_bias("conv2d", b, ws.n)?;
    let (oh, ow) = match (g.out_len(xs.h), g.out_len(xs.w)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::pre(
                "conv2d",
                format!("input {xs} smaller than kernel"),
            ))
        }
    };
    let out_shape = Shape {
        n: xs.n,
        c: ws.n,
        h: oh,
        w: ow,
    };
    let mut out = Tensor::zeros(out_shape);
    let kdim = ws.c * g.kernel * g.kernel;
    let p = oh * ow;
    let wm = MatRef::new(w.data(), ws.n, kdim);
    let direct = use_direct(g);
    let pd = Padded::new(xs.c, xs.h, xs.w, g.pad, g.pad, g.kernel, oh, ow);
    let taps = if direct {
        direct_taps(w.data(), ws.n, ws.c, g.kernel)
    } else {
        Vec::new()
    };
    let scratch_len = if direct {
        pd.len()
    } else if is_pointwise(g) {
        0
    } else {
        kdim * p
    };
    T::with_scratch(scratch_len, |col| {
        for n in 0..xs.n {
            let xn = x.sample(n);
            let yn = &mut out.data_mut()[n * out_shape.sample()..(n + 1) * out_shape.sample()];
            if direct {
                pd.fill(xn, col);
                dispatch!(direct_correlate, correlate_avx2, correlate_avx512, (
                    col,
                    pd,
                    &taps,
                    g.kernel,
                    ws.n,
                    oh,
                    ow,
                    yn
                ));
            } else if is_pointwise(g) {
                gemm(wm, MatRef::new(xn, kdim, p), T::zero(), yn);
            } else {
                im2col(xn, xs.c, xs.h, xs.w, g, oh, ow, col);
                gemm(wm, MatRef::new(col, kdim, p), T::zero(), yn);
            }
            if let Some(b) = b {
                for (o, plane) in yn.chunks_exact_mut(p).enumerate() {
                    let bo = b.data()[o];
                    plane.iter_mut().for_each(|v| *v += bo);
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input, for an input of
/// spatial size `(in_h, in_w)`. Also the forward map of the transposed
/// convolution.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let ds = dy.shape();
    let ws = w.shape();
    check_kernel("conv2d_backward_input", w, g)?;
    if ws.n != ds.c || g.out_len(in_h) != Some(ds.h) || g.out_len(in_w) != Some(ds.w) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward_input",
            left: ds,
            right: ws,
        });
    }
    let in_shape = Shape {
        n: ds.n,
        c: ws.c,
        h: in_h,
        w: in_w,
    };
    let mut dx = Tensor::zeros(in_shape);
    let kdim = ws.c * g.kernel * g.kernel;
    let p = ds.h * ds.w;
    let wt = MatRef::new(w.data(), ws.n, kdim).t();
    let direct = use_direct(g);
    // the input gradient correlates dy with the spatially flipped, channel
    // transposed kernel
    let kk = g.kernel;
    let flipped = if direct {
        Tensor::from_fn(
            Shape {
                n: ws.c,
                c: ws.n,
                h: kk,
                w: kk,
            },
            |i| {
                let (kj, ki, o, c) = (
                    i % kk,
                    i / kk % kk,
                    i / (kk * kk) % ws.n,
                    i / (kk * kk * ws.n),
                );
                w.data()[((o * ws.c + c) * kk + kk - 1 - ki) * kk + kk - 1 - kj]
            },
        )
    } else {
        Tensor::zeros(Shape {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
        })
    };
    let back = kk.saturating_sub(1 + g.pad);
    let pd = Padded::new(ds.c, ds.h, ds.w, back, back, kk, in_h, in_w);
    let taps = if direct {
        direct_taps(flipped.data(), ws.c, ws.n, kk)
    } else {
        Vec::new()
    };
    let scratch_len = if direct {
        pd.len()
    } else if is_pointwise(g) {
        0
    } else {
        kdim * p
    };
    T::with_scratch(scratch_len, |col| {
        for n in 0..ds.n {
            let dxn = &mut dx.data_mut()[n * in_shape.sample()..(n + 1) * in_shape.sample()];
            if direct {
                pd.fill(dy.sample(n), col);
                dispatch!(direct_correlate, correlate_avx2, correlate_avx512, (
                    col,
                    pd,
                    &taps,
                    kk,
                    ws.c,
                    in_h,
                    in_w,
                    dxn
                ));
            } else if is_pointwise(g) {
                gemm(wt, MatRef::new(dy.sample(n), ds.c, p), T::zero(), dxn);
            } else {
                gemm(wt, MatRef::new(dy.sample(n), ds.c, p), T::zero(), col);
                col2im(col, ws.c, in_h, in_w, g, ds.h, ds.w, dxn);
            }
        }
    });
    Ok(dx)
}

/// Gradient of [`conv2d`] with respect to the kernel tensor.
pub fn conv2d_backward_kernel<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ds = dy.shape();
    if xs.n != ds.n || g.out_len(xs.h) != Some(ds.h) || g.out_len(xs.w) != Some(ds.w) {
        return Err(Error::ShapeMismatch {
            op: "conv2d_backward_kernel",
            left: xs,
            right: ds,
        });
    }
    let ws = Shape {
        n: ds.c,
        c: xs.c,
        h: g.kernel,
        w: g.kernel,
    };
    let kdim = xs.c * g.kernel * g.kernel;
    let p = ds.h * ds.w;
    let mut dw = Tensor::zeros(ws);
    let direct = use_direct(g);
    let pd = Padded::new(xs.c, xs.h, xs.w, g.pad, g.pad, g.kernel, ds.h, ds.w);
    let scratch_len = if direct {
        pd.len()
    } else if is_pointwise(g) {
        0
    } else {
        kdim * p
    };
    T::with_scratch(scratch_len, |col| {
        for n in 0..xs.n {
            let beta = if n == 0 { T::zero() } else { T::one() };
            let dyn_ = MatRef::new(dy.sample(n), ds.c, p);
            if direct {
                pd.fill(x.sample(n), col);
                dispatch!(direct_grad, grad_avx2, grad_avx512, (
                    col,
                    pd,
                    dy.sample(n),
                    g.kernel,
                    ds.c,
                    ds.h,
                    ds.w,
                    dw.data_mut()
                ));
            } else if is_pointwise(g) {
                gemm(
                    dyn_,
                    MatRef::new(x.sample(n), kdim, p).t(),
                    beta,
                    dw.data_mut(),
                );
            } else {
                im2col(x.sample(n), xs.c, xs.h, xs.w, g, ds.h, ds.w, col);
                gemm(dyn_, MatRef::new(col, kdim, p).t(), beta, dw.data_mut());
            }
        }
    });
    Ok(dw)
}

/// Per-channel sum of an output gradient, shaped `(1, c, 1, 1)`.
pub fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let p = s.plane();
    let mut acc = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (c, plane) in dy.sample(n).chunks_exact(p).enumerate() {
            acc[c] += sum_f64(plane);
        }
    }
    Tensor::from_fn(
        Shape {
            n: 1,
            c: s.c,
            h: 1,
            w: 1,
        },
        |c| T::lit(acc[c]),
    )
}

/// Transposed convolution doubling the spatial resolution.
///
/// `w` is `(in, out, k, k)`: the kernel layout of the stride-2 convolution
/// this operation is the adjoint of. With zero bias,
/// `<conv2d(y, w, upsample(k)), x> == <y, conv_transpose2d(x, w)>`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::pre(
            "conv_transpose2d",
            format!("kernel {ws} must be square and odd"),
        ));
    }
    if ws.n != xs.c {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            left: xs,
            right: ws,
        });
    }
    check_bias("conv_transpose2d", b, ws.c)?;
    let g = ConvGeom::upsample(ws.h);
    let mut y = conv2d_backward_input(x, w, g, 2 * xs.h, 2 * xs.w)?;
    if let Some(b) = b {
        let ys = y.shape();
        let p = ys.plane();
        for n in 0..ys.n {
            let yn = &mut y.data_mut()[n * ys.sample()..(n + 1) * ys.sample()];
            for (o, plane) in yn.chunks_exact_mut(p).enumerate() {
                let bo = b.data()[o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(y)
}

/// Input and kernel gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::upsample(w.shape().h);
    let dx = conv2d(dy, w, None, g)?;
    let dw = conv2d_backward_kernel(dy, x, g)?;
    Ok((dx, dw))
}
