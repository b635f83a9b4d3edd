//! Raw compute kernels behind the graph ops: im2col convolution,
//! pooling, bilinear resampling, normalization and softmax.
//!
//! Every kernel is deterministic: parallel loops only ever split work
//! whose results land in disjoint output regions, and cross-sample
//! reductions are summed sequentially in index order.

use rayon::prelude::*;

use super::Element;
use crate::error::{Error, Result};

/// Resolved geometry of a 2D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn resolve(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        dilation: usize,
        same: bool,
    ) -> Result<Self> {
        if x_shape.len() != 4 || k_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("want 4-d input/kernel, got {x_shape:?} / {k_shape:?}"),
            ));
        }
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, kcin, kh, kw) = (k_shape[0], k_shape[1], k_shape[2], k_shape[3]);
        if cin != kcin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} != kernel channels {kcin}"),
            ));
        }
        if stride < 1 || dilation < 1 {
            return Err(Error::shape("conv2d", "stride and dilation must be >= 1"));
        }
        if same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::shape("conv2d", "same padding requires odd kernels"));
        }
        let span_h = dilation * (kh - 1);
        let span_w = dilation * (kw - 1);
        let (pad_t, pad_l, total_h, total_w) = if same {
            (span_h / 2, span_w / 2, h + span_h, w + span_w)
        } else {
            (0, 0, h, w)
        };
        if total_h < span_h + 1 || total_w < span_w + 1 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel span {span_h}x{span_w} exceeds input {h}x{w}"),
            ));
        }
        let oh = (total_h - span_h - 1) / stride + 1;
        let ow = (total_w - span_w - 1) / stride + 1;
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            dilation,
            pad_t,
            pad_l,
            oh,
            ow,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Element>(d: &ConvDims, x: &[T], cols: &mut [T]) {
    let ohow = d.oh * d.ow;
    cols.fill(T::ZERO);
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * ohow;
                for oi in 0..d.oh {
                    let ii = (oi * d.stride + ki * d.dilation) as isize - d.pad_t as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let src_row = ii as usize * d.w;
                    let dst_row = row + oi * d.ow;
                    if d.stride == 1 {
                        // contiguous span of valid columns
                        let off = kj as isize * d.dilation as isize - d.pad_l as isize;
                        let lo = (-off).max(0) as usize;
                        let hi = ((d.w as isize - off).min(d.ow as isize)).max(0) as usize;
                        if lo < hi {
                            let src0 = (lo as isize + off) as usize;
                            cols[dst_row + lo..dst_row + hi]
                                .copy_from_slice(&plane[src_row + src0..src_row + src0 + hi - lo]);
                        }
                    } else {
                        for oj in 0..d.ow {
                            let ij =
                                (oj * d.stride + kj * d.dilation) as isize - d.pad_l as isize;
                            if ij >= 0 && ij < d.w as isize {
                                cols[dst_row + oj] = plane[src_row + ij as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(d: &ConvDims, cols: &[T], x_grad: &mut [T]) {
    let ohow = d.oh * d.ow;
    for c in 0..d.cin {
        let plane = &mut x_grad[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * ohow;
                for oi in 0..d.oh {
                    let ii = (oi * d.stride + ki * d.dilation) as isize - d.pad_t as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let dst_row = ii as usize * d.w;
                    let src_row = row + oi * d.ow;
                    for oj in 0..d.ow {
                        let ij = (oj * d.stride + kj * d.dilation) as isize - d.pad_l as isize;
                        if ij >= 0 && ij < d.w as isize {
                            plane[dst_row + ij as usize] += cols[src_row + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; `out` has length n*cout*oh*ow.
pub fn conv2d_fwd<T: Element>(d: &ConvDims, x: &[T], kernel: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let ohow = d.oh * d.ow;
    let ckk = d.col_rows();
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * ohow;
    let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad_t == 0 && d.pad_l == 0;
    out.par_chunks_mut(out_stride)
        .zip(x.par_chunks(in_stride))
        .for_each(|(out_n, x_n)| {
            if pointwise {
                T::gemm(
                    d.cout, ckk, ohow, T::ONE, kernel, ckk as isize, 1, x_n, ohow as isize, 1,
                    T::ZERO, out_n, ohow as isize, 1,
                );
            } else {
                let mut cols = vec![T::ZERO; ckk * ohow];
                im2col(d, x_n, &mut cols);
                T::gemm(
                    d.cout, ckk, ohow, T::ONE, kernel, ckk as isize, 1, &cols, ohow as isize, 1,
                    T::ZERO, out_n, ohow as isize, 1,
                );
            }
            if let Some(b) = bias {
                for (c, row) in out_n.chunks_mut(ohow).enumerate() {
                    let bv = b[c];
                    for v in row {
                        *v += bv;
                    }
                }
            }
        });
}

/// Backward convolution: accumulates into dx, dk and db.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Element>(
    d: &ConvDims,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let ohow = d.oh * d.ow;
    let ckk = d.col_rows();
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * ohow;
    let pointwise = d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad_t == 0 && d.pad_l == 0;
    let want_dk = dk.is_some();

    // Per-sample partials computed in parallel; dk summed in sample order
    // afterwards so the reduction order is fixed.
    let mut dx_store: Vec<Vec<T>> = Vec::new();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..d.n)
        .into_par_iter()
        .map(|ni| {
            let x_n = &x[ni * in_stride..(ni + 1) * in_stride];
            let dy_n = &dy[ni * out_stride..(ni + 1) * out_stride];
            let mut dk_n = if want_dk { vec![T::ZERO; kernel.len()] } else { Vec::new() };
            if want_dk {
                if pointwise {
                    T::gemm(
                        d.cout, ohow, ckk, T::ONE, dy_n, ohow as isize, 1, x_n, 1, ohow as isize,
                        T::ZERO, &mut dk_n, ckk as isize, 1,
                    );
                } else {
                    let mut cols = vec![T::ZERO; ckk * ohow];
                    im2col(d, x_n, &mut cols);
                    T::gemm(
                        d.cout, ohow, ckk, T::ONE, dy_n, ohow as isize, 1, &cols, 1, ohow as isize,
                        T::ZERO, &mut dk_n, ckk as isize, 1,
                    );
                }
            }
            let mut dx_n = vec![T::ZERO; in_stride];
            {
                let mut dcols = vec![T::ZERO; ckk * ohow];
                T::gemm(
                    ckk, d.cout, ohow, T::ONE, kernel, 1, ckk as isize, dy_n, ohow as isize, 1,
                    T::ZERO, &mut dcols, ohow as isize, 1,
                );
                if pointwise {
                    dx_n.copy_from_slice(&dcols);
                } else {
                    col2im_add(d, &dcols, &mut dx_n);
                }
            }
            (dk_n, dx_n)
        })
        .collect();

    if let Some(dk) = dk {
        for (dk_n, _) in &parts {
            for (a, b) in dk.iter_mut().zip(dk_n) {
                *a += *b;
            }
        }
    }
    if let Some(dx) = dx {
        for (ni, (_, dx_n)) in parts.into_iter().enumerate() {
            let dst = &mut dx[ni * in_stride..(ni + 1) * in_stride];
            for (a, b) in dst.iter_mut().zip(&dx_n) {
                *a += *b;
            }
        }
    } else {
        dx_store.extend(parts.into_iter().map(|(_, v)| v));
        drop(dx_store);
    }
    if let Some(db) = db {
        for ni in 0..d.n {
            let dy_n = &dy[ni * out_stride..(ni + 1) * out_stride];
            for (c, row) in dy_n.chunks(ohow).enumerate() {
                let mut s = T::ZERO;
                for v in row {
                    s += *v;
                }
                db[c] += s;
            }
        }
    }
}

/// Transposed convolution with 2x2 kernel, stride 2 (exact upsampling by 2).
/// kernel layout: [cin, cout, 2, 2]; out: [n, cout, 2h, 2w].
pub fn deconv2x2_fwd<T: Element>(
    _n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    x: &[T],
    kernel: &[T],
    out: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    out.par_chunks_mut(cout * oh * ow)
        .zip(x.par_chunks(cin * h * w))
        .for_each(|(out_n, x_n)| {
            out_n.fill(T::ZERO);
            for ci in 0..cin {
                let plane = &x_n[ci * h * w..(ci + 1) * h * w];
                for co in 0..cout {
                    let kbase = (ci * cout + co) * 4;
                    let oplane = &mut out_n[co * oh * ow..(co + 1) * oh * ow];
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let kv = kernel[kbase + di * 2 + dj];
                        for i in 0..h {
                            let src = &plane[i * w..(i + 1) * w];
                            let dst_row = (2 * i + di) * ow + dj;
                            for (j, &v) in src.iter().enumerate() {
                                oplane[dst_row + 2 * j] += kv * v;
                            }
                        }
                    }
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2x2_bwd<T: Element>(
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    x: &[T],
    kernel: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let (oh, ow) = (2 * h, 2 * w);
    let want_dk = dk.is_some();
    let want_dx = dx.is_some();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let x_n = &x[ni * cin * h * w..(ni + 1) * cin * h * w];
            let dy_n = &dy[ni * cout * oh * ow..(ni + 1) * cout * oh * ow];
            let mut dk_n = if want_dk { vec![T::ZERO; kernel.len()] } else { Vec::new() };
            let mut dx_n = if want_dx { vec![T::ZERO; cin * h * w] } else { Vec::new() };
            for ci in 0..cin {
                for co in 0..cout {
                    let kbase = (ci * cout + co) * 4;
                    let gplane = &dy_n[co * oh * ow..(co + 1) * oh * ow];
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let kv = kernel[kbase + di * 2 + dj];
                        let mut ks = T::ZERO;
                        for i in 0..h {
                            let grow = (2 * i + di) * ow + dj;
                            let xrow = i * w;
                            for j in 0..w {
                                let g = gplane[grow + 2 * j];
                                if want_dk {
                                    ks += g * x_n[ci * h * w + xrow + j];
                                }
                                if want_dx {
                                    dx_n[ci * h * w + xrow + j] += kv * g;
                                }
                            }
                        }
                        if want_dk {
                            dk_n[kbase + di * 2 + dj] += ks;
                        }
                    }
                }
            }
            (dk_n, dx_n)
        })
        .collect();
    if let Some(dk) = dk {
        for (dk_n, _) in &parts {
            for (a, b) in dk.iter_mut().zip(dk_n) {
                *a += *b;
            }
        }
    }
    if let Some(dx) = dx {
        for (ni, (_, dx_n)) in parts.into_iter().enumerate() {
            let dst = &mut dx[ni * cin * h * w..(ni + 1) * cin * h * w];
            for (a, b) in dst.iter_mut().zip(&dx_n) {
                *a += *b;
            }
        }
    }
}

/// 2x2 max pooling with stride 2 (floor mode). Returns local argmax codes.
pub fn maxpool2_fwd<T: Element>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    x: &[T],
    out: &mut [T],
    codes: &mut Vec<u8>,
) {
    let (oh, ow) = (h / 2, w / 2);
    codes.resize(n * c * oh * ow, 0);
    for p in 0..n * c {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let obase = p * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = plane[2 * i * w + 2 * j];
                let mut code = 0u8;
                for (idx, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let v = plane[(2 * i + di) * w + (2 * j + dj)];
                    if v > best {
                        best = v;
                        code = idx as u8;
                    }
                }
                out[obase + i * ow + j] = best;
                codes[obase + i * ow + j] = code;
            }
        }
    }
}

pub fn maxpool2_bwd<T: Element>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    dy: &[T],
    codes: &[u8],
    dx: &mut [T],
) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..n * c {
        let dplane = &mut dx[p * h * w..(p + 1) * h * w];
        let obase = p * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let code = codes[obase + i * ow + j] as usize;
                let (di, dj) = (code / 2, code % 2);
                dplane[(2 * i + di) * w + (2 * j + dj)] += dy[obase + i * ow + j];
            }
        }
    }
}

/// Per-axis bilinear weights with half-pixel centers (align_corners=false).
pub fn bilinear_axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
            if src <= 0.0 {
                (0, 0, 1.0)
            } else if src >= (in_len - 1) as f64 {
                (in_len - 1, in_len - 1, 1.0)
            } else {
                let i0 = src.floor() as usize;
                let f = src - i0 as f64;
                (i0, i0 + 1, 1.0 - f)
            }
        })
        .collect()
}

pub fn bilinear_fwd<T: Element>(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    x: &[T],
    out: &mut [T],
) {
    let wy = bilinear_axis_weights(h, oh);
    let wx = bilinear_axis_weights(w, ow);
    out.par_chunks_mut(oh * ow)
        .zip(x.par_chunks(h * w))
        .for_each(|(o, p)| {
            for (i, &(y0, y1, fy)) in wy.iter().enumerate() {
                let fy = T::from_f64(fy);
                let gy = T::ONE - fy;
                for (j, &(x0, x1, fx)) in wx.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let gx = T::ONE - fx;
                    o[i * ow + j] = (p[y0 * w + x0] * fx + p[y0 * w + x1] * gx) * fy
                        + (p[y1 * w + x0] * fx + p[y1 * w + x1] * gx) * gy;
                }
            }
        });
}

pub fn bilinear_bwd<T: Element>(
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dy: &[T],
    dx: &mut [T],
) {
    let wy = bilinear_axis_weights(h, oh);
    let wx = bilinear_axis_weights(w, ow);
    dx.par_chunks_mut(h * w)
        .zip(dy.par_chunks(oh * ow))
        .for_each(|(d, g)| {
            for (i, &(y0, y1, fy)) in wy.iter().enumerate() {
                let fy = T::from_f64(fy);
                let gy = T::ONE - fy;
                for (j, &(x0, x1, fx)) in wx.iter().enumerate() {
                    let fx = T::from_f64(fx);
                    let gx = T::ONE - fx;
                    let gv = g[i * ow + j];
                    d[y0 * w + x0] += gv * fx * fy;
                    d[y0 * w + x1] += gv * gx * fy;
                    d[y1 * w + x0] += gv * fx * gy;
                    d[y1 * w + x1] += gv * gx * gy;
                }
            }
        });
}

/// Softmax along a middle axis described as (outer, len, inner);
/// parallel over outer groups with a fixed element grain.
pub fn softmax_fwd<T: Element>(outer: usize, len: usize, inner: usize, x: &[T], out: &mut [T]) {
    let group = len * inner;
    let one_group = |x: &[T], out: &mut [T]| {
        for i in 0..inner {
            let mut m = x[i];
            for l in 1..len {
                let v = x[i + l * inner];
                if v > m {
                    m = v;
                }
            }
            let mut s = T::ZERO;
            for l in 0..len {
                let e = (x[i + l * inner] - m).exp();
                out[i + l * inner] = e;
                s += e;
            }
            for l in 0..len {
                out[i + l * inner] = out[i + l * inner] / s;
            }
        }
    };
    if outer * group >= 524_288 {
        let grain = (262_144 / group.max(1)).max(1);
        out.par_chunks_mut(grain * group)
            .zip(x.par_chunks(grain * group))
            .for_each(|(oc, xc)| {
                for (o, xg) in oc.chunks_mut(group).zip(xc.chunks(group)) {
                    one_group(xg, o);
                }
            });
    } else {
        for o in 0..outer {
            one_group(&x[o * group..(o + 1) * group], &mut out[o * group..(o + 1) * group]);
        }
    }
}

pub fn softmax_bwd<T: Element>(
    outer: usize,
    len: usize,
    inner: usize,
    y: &[T],
    dy: &[T],
    dx: &mut [T],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::ZERO;
            for l in 0..len {
                dot += y[base + l * inner] * dy[base + l * inner];
            }
            for l in 0..len {
                let idx = base + l * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}
