//! Forward and backward kernels for the dense primitives.
//!
//! Batched kernels parallelize over samples and reduce per-sample partials
//! sequentially in sample order, so results do not depend on thread count.

use std::cell::RefCell;

use rayon::prelude::*;

/// `c = beta * c + a * b` where `a` is `m x k` and `b` is `k x n`, both
/// row-major unless the matching `*_t` flag asks for the transpose of the
/// stored matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe exactly the m*k, k*n
    // and m*n row-major (or transposed) views of the slices.
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
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution window over one `C x H x W` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample into a `(C*k*k) x (Ho*Wo)` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.width, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `ox` in `lo..hi` read an in-bounds input column for
/// kernel offset `kx`.
#[inline]
fn valid_range(kx: usize, pad: usize, stride: usize, width: usize, wo: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad must satisfy 0 <= ix < width.
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if width + pad > kx {
        ((width + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_range(kx, g.pad, g.stride, g.width, wo);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a per-thread buffer of `len` elements whose contents are
/// unspecified; callers must overwrite before reading. Never nested.
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Sums per-sample partial buffers in sample order.
fn reduce_ordered(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

/// Runs `f(sample, dx_chunk)` for every sample, handing out zeroed slices of
/// a fresh `n * in_len` input-gradient buffer when `need_dx`.
fn per_sample<T: Send>(
    n: usize,
    in_len: usize,
    need_dx: bool,
    f: impl Fn(usize, Option<&mut [f64]>) -> T + Sync,
) -> (Option<Vec<f64>>, Vec<T>) {
    if need_dx {
        let mut dx = vec![0.0; n * in_len];
        let out = dx.par_chunks_mut(in_len).enumerate().map(|(s, d)| f(s, Some(d))).collect();
        (Some(dx), out)
    } else {
        (None, (0..n).into_par_iter().map(|s| f(s, None)).collect())
    }
}

fn bias_grad(dy: &[f64], n: usize, co: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; co];
    for s in 0..n {
        for (o, d) in db.iter_mut().enumerate() {
            let base = (s * co + o) * plane;
            *d += dy[base..base + plane].iter().sum::<f64>();
        }
    }
    db
}

fn add_bias(y: &mut [f64], bias: &[f64], plane: usize) {
    for (o, b) in bias.iter().enumerate() {
        y[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

/// Batched convolution. `w` is `Co x (Ci*k*k)`, output is `N x Co x Ho x Wo`.
pub fn conv2d_forward(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], co: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let mut y = vec![0.0; n * co * hw];
    y.par_chunks_mut(co * hw).enumerate().for_each(|(s, ys)| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        if g.is_pointwise() {
            gemm(co, rows, hw, w, false, xs, false, 0.0, ys);
        } else {
            with_scratch(rows * hw, |cols| {
                im2col(xs, g, cols);
                gemm(co, rows, hw, w, false, cols, false, 0.0, ys);
            });
        }
        if let Some(b) = bias {
            add_bias(ys, b, hw);
        }
    });
    y
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    co: usize,
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let out_len = co * hw;
    let (dx, dw_parts) = per_sample(n, in_len, need_dx, |s, dxs| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        if let Some(dxs) = dxs {
            if g.is_pointwise() {
                gemm(rows, co, hw, w, true, dys, false, 0.0, dxs);
            } else {
                with_scratch(rows * hw, |dcols| {
                    gemm(rows, co, hw, w, true, dys, false, 0.0, dcols);
                    col2im(dcols, g, dxs);
                });
            }
        }
        need_dw.then(|| {
            let mut dw = vec![0.0; co * rows];
            if g.is_pointwise() {
                gemm(co, hw, rows, dys, false, xs, true, 0.0, &mut dw);
            } else {
                with_scratch(rows * hw, |cols| {
                    im2col(xs, g, cols);
                    gemm(co, hw, rows, dys, false, cols, true, 0.0, &mut dw);
                });
            }
            dw
        })
    });
    let dw = need_dw.then(|| reduce_ordered(dw_parts.into_iter().flatten().collect(), co * rows));
    let db = need_db.then(|| bias_grad(dy, n, co, hw));
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `out_geom` describes the *output* plane as the
/// input of the adjoint convolution; `w` is stored `Ci x (Co*k*k)`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    n: usize,
    ci: usize,
    out_geom: &ConvGeom,
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let hw_in = out_geom.col_cols();
    let in_len = ci * hw_in;
    let out_plane = out_geom.height * out_geom.width;
    let out_len = out_geom.channels * out_plane;
    let rows = out_geom.col_rows();
    let mut y = vec![0.0; n * out_len];
    y.par_chunks_mut(out_len).enumerate().for_each(|(s, ys)| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        with_scratch(rows * hw_in, |cols| {
            gemm(rows, ci, hw_in, w, true, xs, false, 0.0, cols);
            col2im(cols, out_geom, ys);
        });
        if let Some(b) = bias {
            add_bias(ys, b, out_plane);
        }
    });
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    x: &[f64],
    n: usize,
    ci: usize,
    out_geom: &ConvGeom,
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let hw_in = out_geom.col_cols();
    let in_len = ci * hw_in;
    let out_plane = out_geom.height * out_geom.width;
    let out_len = out_geom.channels * out_plane;
    let rows = out_geom.col_rows();
    let (dx, dw_parts) = per_sample(n, in_len, need_dx, |s, dxs| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        with_scratch(rows * hw_in, |dcols| {
            im2col(dys, out_geom, dcols);
            if let Some(dxs) = dxs {
                gemm(ci, rows, hw_in, w, false, dcols, false, 0.0, dxs);
            }
            need_dw.then(|| {
                let mut dw = vec![0.0; ci * rows];
                gemm(ci, hw_in, rows, xs, false, dcols, true, 0.0, &mut dw);
                dw
            })
        })
    });
    let dw = need_dw.then(|| reduce_ordered(dw_parts.into_iter().flatten().collect(), ci * rows));
    let db = need_db.then(|| bias_grad(dy, n, out_geom.channels, out_plane));
    ConvGrads { dx, dw, db }
}

/// Source taps of half-pixel bilinear 2x upsampling along one axis:
/// `(lo, hi, weight_hi)` for each output index.
pub fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn upsample2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; planes * oh * ow];
    y.par_chunks_mut(oh * ow).enumerate().for_each(|(p, out)| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    });
    y
}

pub fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(p, d)| {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    });
    dx
}

pub fn avgpool2x_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let out = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (iy, ix) = (2 * oy, 2 * ox);
                out[oy * ow + ox] = 0.25
                    * (src[iy * w + ix] + src[iy * w + ix + 1] + src[(iy + 1) * w + ix] + src[(iy + 1) * w + ix + 1]);
            }
        }
    }
    y
}

pub fn avgpool2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = 0.25 * g[oy * ow + ox];
                let (iy, ix) = (2 * oy, 2 * ox);
                d[iy * w + ix] += v;
                d[iy * w + ix + 1] += v;
                d[(iy + 1) * w + ix] += v;
                d[(iy + 1) * w + ix + 1] += v;
            }
        }
    }
    dx
}
