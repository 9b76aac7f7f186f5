//! Forward/backward kernels on raw NCHW slices.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self { stride, pad, dilation }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Shape bundle for one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvShape {
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

pub fn im2col<T: Scalar>(x: &[T], s: &ConvShape, g: &ConvGeom, cols: &mut [T]) {
    let plane = s.out_plane();
    let (h, w) = (s.h as isize, s.w as isize);
    for c in 0..s.cin {
        let xc = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (c * s.kh + ki) * s.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..s.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    let line = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

pub fn col2im<T: Scalar>(cols: &[T], s: &ConvShape, g: &ConvGeom, dx: &mut [T]) {
    let plane = s.out_plane();
    let (h, w) = (s.h as isize, s.w as isize);
    for c in 0..s.cin {
        let dxc = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let row = (c * s.kh + ki) * s.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..s.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * s.wo..(oy + 1) * s.wo];
                    let dst = &mut dxc[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward over a batch. When `keep_cols` is set the per-sample
/// column buffers are returned for the weight gradient.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    s: &ConvShape,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let k = s.k();
    let plane = s.out_plane();
    let in_len = s.cin * s.h * s.w;
    let out_len = s.cout * plane;
    let mut out = vec![T::zero(); n * out_len];
    let pointwise = g.is_pointwise(s.kh, s.kw);
    let mut kept = if keep_cols && !pointwise { Some(vec![T::zero(); n * k * plane]) } else { None };
    let mut scratch = if kept.is_none() && !pointwise { vec![T::zero(); k * plane] } else { Vec::new() };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let cols: &[T] = if pointwise {
            xi
        } else if let Some(buf) = kept.as_mut() {
            let c = &mut buf[i * k * plane..(i + 1) * k * plane];
            im2col(xi, s, g, c);
            c
        } else {
            im2col(xi, s, g, &mut scratch);
            &scratch
        };
        let oi = &mut out[i * out_len..(i + 1) * out_len];
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                oi[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            s.cout,
            k,
            plane,
            T::one(),
            weight,
            (k as isize, 1),
            cols,
            (plane as isize, 1),
            beta,
            oi,
            (plane as isize, 1),
        );
    }
    (out, kept)
}

/// Gradients of a convolution. Any of the outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    cols: Option<&[T]>,
    n: usize,
    s: &ConvShape,
    weight: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let k = s.k();
    let plane = s.out_plane();
    let in_len = s.cin * s.h * s.w;
    let out_len = s.cout * plane;
    let pointwise = g.is_pointwise(s.kh, s.kw);

    if let Some(db) = db {
        for i in 0..n {
            let dyi = &dy[i * out_len..(i + 1) * out_len];
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dyi[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
    }

    if let Some(dw) = dw {
        let mut scratch = Vec::new();
        for i in 0..n {
            let dyi = &dy[i * out_len..(i + 1) * out_len];
            let ci: &[T] = if pointwise {
                &x[i * in_len..(i + 1) * in_len]
            } else if let Some(c) = cols {
                &c[i * k * plane..(i + 1) * k * plane]
            } else {
                scratch.resize(k * plane, T::zero());
                im2col(&x[i * in_len..(i + 1) * in_len], s, g, &mut scratch);
                &scratch
            };
            // dw[cout, k] += dy_i[cout, plane] * cols_i[k, plane]^T
            T::gemm(
                s.cout,
                plane,
                k,
                T::one(),
                dyi,
                (plane as isize, 1),
                ci,
                (1, plane as isize),
                T::one(),
                dw,
                (k as isize, 1),
            );
        }
    }

    if let Some(dx) = dx {
        let mut dcols = if pointwise { Vec::new() } else { vec![T::zero(); k * plane] };
        for i in 0..n {
            let dyi = &dy[i * out_len..(i + 1) * out_len];
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            if pointwise {
                // dx_i[k, plane] += w^T[k, cout] * dy_i[cout, plane]
                T::gemm(
                    k,
                    s.cout,
                    plane,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dyi,
                    (plane as isize, 1),
                    T::one(),
                    dxi,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    s.cout,
                    plane,
                    T::one(),
                    weight,
                    (1, k as isize),
                    dyi,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                col2im(&dcols, s, g, dxi);
            }
        }
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch mean and biased variance over (N, H, W).
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * plane;
            s += x[base..base + plane].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * plane;
            v += x[base..base + plane].iter().map(|&e| (e - m) * (e - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// Bilinear resize with half-pixel centers (no corner alignment).
/// Returns, for one axis, the (low index, high index, high weight) triple of
/// every output coordinate.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub fn upsample_bilinear<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                d[y0 * w + x1] += v * (T::one() - fy) * fx;
                d[y1 * w + x0] += v * fy * (T::one() - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
}

/// Max pooling with implicit -inf padding; returns output and argmax indices
/// into the input plane.
pub fn max_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let ho = g.out_dim(h, kernel);
    let wo = g.out_dim(w, kernel);
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut arg = vec![0usize; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for ki in 0..kernel {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            best_i = idx;
                        }
                    }
                }
                out[(p * ho + oy) * wo + ox] = best;
                arg[(p * ho + oy) * wo + ox] = best_i;
            }
        }
    }
    (out, arg, ho, wo)
}

/// Numerically stable softmax over the channel axis of one pixel column.
pub fn softmax_pixel<T: Scalar>(logits: &[T], c: usize, plane: usize, p: usize, out: &mut [T]) {
    let mut m = T::neg_infinity();
    for k in 0..c {
        m = m.max(logits[k * plane + p]);
    }
    let mut z = T::zero();
    for k in 0..c {
        let e = (logits[k * plane + p] - m).exp();
        out[k] = e;
        z += e;
    }
    for v in out.iter_mut().take(c) {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], s: &ConvShape, w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; s.cout * s.ho * s.wo];
        for co in 0..s.cout {
            for oy in 0..s.ho {
                for ox in 0..s.wo {
                    let mut acc = 0.0;
                    for ci in 0..s.cin {
                        for ki in 0..s.kh {
                            for kj in 0..s.kw {
                                let iy = (oy * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += x[(ci * s.h + iy as usize) * s.w + ix as usize]
                                    * w[((co * s.cin + ci) * s.kh + ki) * s.kw + kj];
                            }
                        }
                    }
                    out[(co * s.ho + oy) * s.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(stride, pad, dil) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1), (1, 6, 6)] {
            let g = ConvGeom::new(stride, pad, dil);
            let (cin, h, w, cout, kk) = (3, 7, 6, 4, 3);
            let s = ConvShape { cin, h, w, cout, kh: kk, kw: kk, ho: g.out_dim(h, kk), wo: g.out_dim(w, kk) };
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
            let wt: Vec<f64> = (0..cout * s.k()).map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0).collect();
            let (out, _) = conv2d_forward(&x, 1, &s, &wt, None, &g, false);
            let want = naive_conv(&x, &s, &wt, &g);
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{stride} {pad} {dil}");
            }
        }
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f32> = (0..12).map(|i| i as f32).collect();
        assert_eq!(upsample_bilinear(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn bilinear_from_single_pixel_broadcasts() {
        let up = upsample_bilinear(&[2.5f64], 1, 1, 1, 3, 3);
        assert!(up.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn out_dim_stride_arithmetic() {
        assert_eq!(ConvGeom::new(2, 1, 1).out_dim(64, 3), 32);
        assert_eq!(ConvGeom::new(1, 18, 18).out_dim(2, 3), 2);
        assert_eq!(ConvGeom::new(2, 3, 1).out_dim(64, 7), 32);
    }
}
