//! Forward and backward kernels on plain tensors. The autograd graph wires
//! these together; the image-level helpers call them directly.

use std::ops::Range;

use crate::tensor::{Elem, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input tap `o * stride - pad + kk` lands in `[0, d)`.
    fn valid_range(&self, kk: usize, d: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= d-1
        let hi_num = d as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out as isize);
        (lo.min(hi) as usize, hi as usize)
    }
}

/// Unfolds output rows `rows` of one `[c, h, w]` item into
/// `[c*k*k, rows.len()*wo]` columns.
fn im2col<T: Elem>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, rows: Range<usize>, cols: &mut [T]) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let span = rows.len() * wo;
    let mut row = 0;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, h, ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, w, wo);
                let dst = &mut cols[row * span..(row + 1) * span];
                for (r, oy) in rows.clone().enumerate() {
                    let drow = &mut dst[r * wo..(r + 1) * wo];
                    if oy < oy0 || oy >= oy1 || ox0 >= ox1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    drow[..ox0].fill(T::zero());
                    drow[ox1..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = ox0 + kx - g.pad;
                        drow[ox0..ox1].copy_from_slice(&src[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns for output rows `rows` back onto a
/// `[c, h, w]` item.
fn col2im<T: Elem>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom, rows: Range<usize>, x: &mut [T]) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let span = rows.len() * wo;
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            let (oy0, oy1) = g.valid_range(ky, h, ho);
            for kx in 0..g.k {
                let (ox0, ox1) = g.valid_range(kx, w, wo);
                let src = &cols[row * span..(row + 1) * span];
                if ox0 < ox1 {
                    for (r, oy) in rows.clone().enumerate() {
                        if oy < oy0 || oy >= oy1 {
                            continue;
                        }
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[r * wo..(r + 1) * wo];
                        let drow = &mut plane[iy * w..(iy + 1) * w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &s) in drow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&srow[ox0..ox1]) {
                                *d += s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox * g.stride + kx - g.pad] += srow[ox];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Bytes of unfolded columns processed per GEMM call; keeps the panel in cache.
const COL_BLOCK_BYTES: usize = 256 * 1024;

/// Output-row bands for blocked im2col.
fn row_bands(kdim: usize, ho: usize, wo: usize, elem: usize) -> impl Iterator<Item = Range<usize>> {
    let per_row = (kdim * wo * elem).max(1);
    let band = (COL_BLOCK_BYTES / per_row).clamp(1, ho.max(1));
    (0..ho).step_by(band).map(move |r| r..(r + band).min(ho))
}

/// Cross-correlation with zero padding. `w` is `[co, ci, k, k]`, `b` is `[1, co, 1, 1]`.
pub fn conv2d_forward<T: Elem>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (co, ci) = (ws.n, ws.c);
    debug_assert_eq!(ci, xs.c);
    let (ho, wo) = (g.out_dim(xs.h), g.out_dim(xs.w));
    let hw_out = ho * wo;
    let kdim = ci * g.k * g.k;
    let mut out = Tensor::zeros(Shape::new(xs.n, co, ho, wo));
    let mut cols = Vec::new();
    for n in 0..xs.n {
        let xin = x.item(n);
        let dst = out.item_mut(n);
        if g.is_pointwise() {
            unsafe {
                T::gemm(co, kdim, hw_out, T::one(), w.data().as_ptr(), kdim as isize, 1, xin.as_ptr(), hw_out as isize, 1, T::zero(), dst.as_mut_ptr(), hw_out as isize, 1);
            }
        } else {
            for rows in row_bands(kdim, ho, wo, std::mem::size_of::<T>()) {
                let span = rows.len() * wo;
                cols.resize(kdim * span, T::zero());
                im2col(xin, ci, xs.h, xs.w, g, rows.clone(), &mut cols);
                unsafe {
                    T::gemm(
                        co,
                        kdim,
                        span,
                        T::one(),
                        w.data().as_ptr(),
                        kdim as isize,
                        1,
                        cols.as_ptr(),
                        span as isize,
                        1,
                        T::zero(),
                        dst.as_mut_ptr().add(rows.start * wo),
                        hw_out as isize,
                        1,
                    );
                }
            }
        }
        if let Some(b) = b {
            for (o, &bv) in b.data().iter().enumerate() {
                for v in &mut dst[o * hw_out..(o + 1) * hw_out] {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

pub fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    g: ConvGeom,
    need_x: bool,
    need_w: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let (co, ci) = (ws.n, ws.c);
    let os = gout.shape();
    let (ho, wo) = (os.h, os.w);
    let hw_out = ho * wo;
    let kdim = ci * g.k * g.k;
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(Shape::new(1, co, 1, 1));
    let mut gx = if need_x { Some(Tensor::zeros(xs)) } else { None };
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    for n in 0..xs.n {
        let go = gout.item(n);
        for o in 0..co {
            gb.data_mut()[o] += go[o * hw_out..(o + 1) * hw_out].iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            if need_w {
                // gw[co, ci] += gout[co, hw] * x[ci, hw]^T
                unsafe {
                    T::gemm(co, hw_out, kdim, T::one(), go.as_ptr(), hw_out as isize, 1, x.item(n).as_ptr(), 1, hw_out as isize, T::one(), gw.data_mut().as_mut_ptr(), kdim as isize, 1);
                }
            }
            if let Some(gx) = gx.as_mut() {
                let dst = gx.item_mut(n);
                unsafe {
                    T::gemm(kdim, co, hw_out, T::one(), w.data().as_ptr(), 1, kdim as isize, go.as_ptr(), hw_out as isize, 1, T::zero(), dst.as_mut_ptr(), hw_out as isize, 1);
                }
            }
            continue;
        }
        for rows in row_bands(kdim, ho, wo, std::mem::size_of::<T>()) {
            let span = rows.len() * wo;
            let go_band = unsafe { go.as_ptr().add(rows.start * wo) };
            if need_w {
                cols.resize(kdim * span, T::zero());
                im2col(x.item(n), ci, xs.h, xs.w, g, rows.clone(), &mut cols);
                unsafe {
                    T::gemm(
                        co,
                        span,
                        kdim,
                        T::one(),
                        go_band,
                        hw_out as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        span as isize,
                        T::one(),
                        gw.data_mut().as_mut_ptr(),
                        kdim as isize,
                        1,
                    );
                }
            }
            if let Some(gx) = gx.as_mut() {
                gcols.resize(kdim * span, T::zero());
                // gcols[kdim, span] = w[co, kdim]^T * gout[co, span]
                unsafe {
                    T::gemm(
                        kdim,
                        co,
                        span,
                        T::one(),
                        w.data().as_ptr(),
                        1,
                        kdim as isize,
                        go_band,
                        hw_out as isize,
                        1,
                        T::zero(),
                        gcols.as_mut_ptr(),
                        span as isize,
                        1,
                    );
                }
                col2im(&gcols, ci, xs.h, xs.w, g, rows.clone(), gx.item_mut(n));
            }
        }
    }
    ConvGrads { x: gx, w: gw, b: gb }
}

/// 2×2 mean pooling with floor on odd sizes.
pub fn avg_pool2x_forward<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let q = T::lit(0.25);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                let r0 = &src[2 * y * s.w..];
                let r1 = &src[(2 * y + 1) * s.w..];
                for xx in 0..wo {
                    dst[y * wo + xx] = q * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2x_backward<T: Elem>(in_shape: Shape, gout: &Tensor<T>) -> Tensor<T> {
    let os = gout.shape();
    let mut gx = Tensor::zeros(in_shape);
    let q = T::lit(0.25);
    for n in 0..os.n {
        for c in 0..os.c {
            let src = gout.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for y in 0..os.h {
                for xx in 0..os.w {
                    let v = q * src[y * os.w + xx];
                    let base = 2 * y * in_shape.w + 2 * xx;
                    dst[base] += v;
                    dst[base + 1] += v;
                    dst[base + in_shape.w] += v;
                    dst[base + in_shape.w + 1] += v;
                }
            }
        }
    }
    gx
}

/// Per-output-index source taps `(i0, i1, frac)` for half-pixel bilinear 2× upsampling.
fn bilinear_taps(d: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * d)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(d - 1);
            let i1 = (i0 + 1).min(d - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x_forward<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (ho, wo) = (2 * s.h, 2 * s.w);
    let ty = bilinear_taps(s.h);
    let tx: Vec<_> = bilinear_taps(s.w).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let mut row = vec![T::zero(); wo];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                let r0 = &src[y0 * s.w..(y0 + 1) * s.w];
                let r1 = &src[y1 * s.w..(y1 + 1) * s.w];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                    let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                    row[ox] = top + fy * (bot - top);
                }
                dst[oy * wo..(oy + 1) * wo].copy_from_slice(&row);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Elem>(in_shape: Shape, gout: &Tensor<T>) -> Tensor<T> {
    let ty = bilinear_taps(in_shape.h);
    let tx: Vec<_> = bilinear_taps(in_shape.w).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
    let wo = 2 * in_shape.w;
    let mut gx = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let src = gout.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                let srow = &src[oy * wo..(oy + 1) * wo];
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = srow[ox];
                    let gt = g * (T::one() - fy);
                    let gbm = g * fy;
                    dst[y0 * in_shape.w + x0] += gt * (T::one() - fx);
                    dst[y0 * in_shape.w + x1] += gt * fx;
                    dst[y1 * in_shape.w + x0] += gbm * (T::one() - fx);
                    dst[y1 * in_shape.w + x1] += gbm * fx;
                }
            }
        }
    }
    gx
}

/// Fixed-kernel "valid" correlation applied to every channel independently.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel2d {
    pub kh: usize,
    pub kw: usize,
    pub taps: Vec<f64>,
}

impl Kernel2d {
    pub fn new(kh: usize, kw: usize, taps: Vec<f64>) -> Self {
        assert_eq!(taps.len(), kh * kw);
        Kernel2d { kh, kw, taps }
    }
}

pub fn filter_valid_forward<T: Elem>(x: &Tensor<T>, k: &Kernel2d) -> Tensor<T> {
    let s = x.shape();
    let (ho, wo) = (s.h + 1 - k.kh, s.w + 1 - k.kw);
    let taps: Vec<T> = k.taps.iter().map(|&v| T::lit(v)).collect();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for i in 0..k.kh {
                for j in 0..k.kw {
                    let t = taps[i * k.kw + j];
                    if t == T::zero() {
                        continue;
                    }
                    for y in 0..ho {
                        let srow = &src[(y + i) * s.w + j..(y + i) * s.w + j + wo];
                        let drow = &mut dst[y * wo..(y + 1) * wo];
                        for (d, &v) in drow.iter_mut().zip(srow) {
                            *d += t * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn filter_valid_backward<T: Elem>(in_shape: Shape, gout: &Tensor<T>, k: &Kernel2d) -> Tensor<T> {
    let os = gout.shape();
    let taps: Vec<T> = k.taps.iter().map(|&v| T::lit(v)).collect();
    let mut gx = Tensor::zeros(in_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            let src = gout.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for i in 0..k.kh {
                for j in 0..k.kw {
                    let t = taps[i * k.kw + j];
                    if t == T::zero() {
                        continue;
                    }
                    for y in 0..os.h {
                        let srow = &src[y * os.w..(y + 1) * os.w];
                        let base = (y + i) * in_shape.w + j;
                        let drow = &mut dst[base..base + os.w];
                        for (d, &g) in drow.iter_mut().zip(srow) {
                            *d += t * g;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[inline]
fn reflect(i: isize, d: usize) -> usize {
    let d = d as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= d {
        i = 2 * (d - 1) - i;
    }
    i as usize
}

/// Mirror padding without repeating the edge sample (requires `pad < dim`).
pub fn pad_reflect_forward<T: Elem>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let s = x.shape();
    let (ho, wo) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                let sy = reflect(y as isize - pad as isize, s.h);
                for xx in 0..wo {
                    let sx = reflect(xx as isize - pad as isize, s.w);
                    dst[y * wo + xx] = src[sy * s.w + sx];
                }
            }
        }
    }
    out
}

pub fn pad_reflect_backward<T: Elem>(in_shape: Shape, gout: &Tensor<T>, pad: usize) -> Tensor<T> {
    let os = gout.shape();
    let mut gx = Tensor::zeros(in_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            let src = gout.plane(n, c);
            let dst = gx.plane_mut(n, c);
            for y in 0..os.h {
                let sy = reflect(y as isize - pad as isize, in_shape.h);
                for xx in 0..os.w {
                    let sx = reflect(xx as isize - pad as isize, in_shape.w);
                    dst[sy * in_shape.w + sx] += src[y * os.w + xx];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let (ho, wo) = (g.out_dim(xs.h), g.out_dim(xs.w));
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, ho, wo));
        for n in 0..xs.n {
            for o in 0..ws.n {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..xs.c {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (xx * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(n, o, y, xx);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Shape, seed: f64) -> Tensor<f64> {
        let data = (0..shape.numel()).map(|i| (i as f64 * 0.37 + seed).sin()).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 7, 6), (3, 2, 1, 8, 8), (3, 2, 1, 7, 9), (1, 1, 0, 5, 5), (3, 1, 0, 6, 6)] {
            let g = ConvGeom { k, stride, pad };
            let x = ramp(Shape::new(2, 3, h, w), 0.1);
            let wt = ramp(Shape::new(4, 3, k, k), 1.3);
            let got = conv2d_forward(&x, &wt, None, g);
            let want = naive_conv(&x, &wt, g);
            assert!(got.max_abs_diff(&want) < 1e-12, "geom {g:?}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), r> == <x, conv^T(r)> and <conv_w(x), r> == <w, dW>
        let g = ConvGeom { k: 3, stride: 2, pad: 1 };
        let x = ramp(Shape::new(2, 3, 7, 8), 0.3);
        let wt = ramp(Shape::new(5, 3, 3, 3), 2.0);
        let y = conv2d_forward(&x, &wt, None, g);
        let r = ramp(y.shape(), 0.7);
        let grads = conv2d_backward(&x, &wt, &r, g, true, true);
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let gx = grads.x.unwrap();
        let rhs_x: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = wt.data().iter().zip(grads.w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn banded_unfolding_matches_whole_image() {
        // 64 input channels at 40 px wide push each band down to one or two rows.
        for g in [ConvGeom { k: 3, stride: 1, pad: 1 }, ConvGeom { k: 3, stride: 2, pad: 1 }] {
            let x = ramp(Shape::new(1, 64, 13, 40), 0.4);
            let wt = ramp(Shape::new(3, 64, 3, 3), 0.8);
            assert!(row_bands(64 * 9, g.out_dim(13), g.out_dim(40), 8).count() > 2);
            let y = conv2d_forward(&x, &wt, None, g);
            assert!(y.max_abs_diff(&naive_conv(&x, &wt, g)) < 1e-11);
            let r = ramp(y.shape(), 0.1);
            let grads = conv2d_backward(&x, &wt, &r, g, true, true);
            let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let rhs_x: f64 = x.data().iter().zip(grads.x.unwrap().data()).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = wt.data().iter().zip(grads.w.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-8 * lhs.abs().max(1.0));
            assert!((lhs - rhs_w).abs() < 1e-8 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn resampling_adjoints() {
        let x = ramp(Shape::new(1, 2, 6, 5), 0.2);
        let up = upsample2x_forward(&x);
        let r = ramp(up.shape(), 0.9);
        let lhs: f64 = up.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let gx = upsample2x_backward(x.shape(), &r);
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let dn = avg_pool2x_forward(&x);
        assert_eq!(dn.shape(), Shape::new(1, 2, 3, 2));
        let r = ramp(dn.shape(), 0.4);
        let lhs: f64 = dn.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let gx = avg_pool2x_backward(x.shape(), &r);
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let p = pad_reflect_forward(&x, 1);
        let r = ramp(p.shape(), 0.5);
        let lhs: f64 = p.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let gx = pad_reflect_backward(x.shape(), &r, 1);
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_repeat() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        // height 1 cannot reflect by 1; use a 2-row image instead
        let x2 = Tensor::stack_batch(&[x.clone()]).unwrap();
        let x2 = Tensor::from_vec(Shape::new(1, 1, 2, 3), [x2.data(), x2.data()].concat()).unwrap();
        let p = pad_reflect_forward(&x2, 1);
        assert_eq!(&p.data()[5..10], &[2.0, 1.0, 2.0, 3.0, 2.0]);
    }
}
