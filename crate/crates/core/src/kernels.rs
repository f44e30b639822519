//! Forward and backward kernels for the network layers.
//!
//! Feature tensors are laid out `(C, T, H, W)`; convolution weights are
//! `(C_out, C_in, kt, kh, kw)`. All convolutions use zero "same" padding
//! of `k/2` per axis, stride 1 in time and `stride` in both spatial axes.

use crate::tensor::{Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger outputs are processed in
/// row bands.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    ci: usize,
    t: usize,
    h: usize,
    w: usize,
    co: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be (C, T, H, W), got {x:?}");
        assert_eq!(w.len(), 5, "conv weight must be (Co, Ci, kt, kh, kw), got {w:?}");
        assert_eq!(x[0], w[1], "conv input has {} channels, weight expects {}", x[0], w[1]);
        let (kh, kw) = (w[3], w[4]);
        let ho = (x[2] + 2 * (kh / 2) - kh) / stride + 1;
        let wo = (x[3] + 2 * (kw / 2) - kw) / stride + 1;
        Self { ci: x[0], t: x[1], h: x[2], w: x[3], co: w[0], kt: w[2], kh, kw, stride, ho, wo }
    }

    fn k(&self) -> usize {
        self.ci * self.kt * self.kh * self.kw
    }

    fn out_shape(&self) -> [usize; 4] {
        [self.co, self.t, self.ho, self.wo]
    }

    fn band_rows(&self) -> usize {
        (COL_BUDGET / (self.k() * self.wo).max(1)).clamp(1, self.ho)
    }

    /// Valid output column range `[lo, hi)` for a tap offset when stride is 1.
    fn unit_stride_cols(&self, dw: usize) -> (usize, usize) {
        let pw = self.kw / 2;
        let lo = pw.saturating_sub(dw);
        let hi = (self.w + pw).saturating_sub(dw).min(self.wo);
        (lo, hi.max(lo))
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], t: usize, r0: usize, r1: usize, col: &mut [T]) {
    let n = (r1 - r0) * g.wo;
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    let plane = g.h * g.w;
    let mut k = 0;
    for ci in 0..g.ci {
        for dt in 0..g.kt {
            let ti = t as isize + dt as isize - pt as isize;
            for dh in 0..g.kh {
                for dw in 0..g.kw {
                    let row = &mut col[k * n..(k + 1) * n];
                    k += 1;
                    if ti < 0 || ti >= g.t as isize {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.t + ti as usize) * plane..][..plane];
                    for ho in r0..r1 {
                        let dst = &mut row[(ho - r0) * g.wo..][..g.wo];
                        let hi = (ho * g.stride + dh) as isize - ph as isize;
                        if hi < 0 || hi >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let srow = &src[hi as usize * g.w..][..g.w];
                        if g.stride == 1 {
                            let (lo, hi_c) = g.unit_stride_cols(dw);
                            dst[..lo].fill(T::zero());
                            dst[hi_c..].fill(T::zero());
                            let off = lo + dw - pw;
                            dst[lo..hi_c].copy_from_slice(&srow[off..off + (hi_c - lo)]);
                        } else {
                            for (wo, d) in dst.iter_mut().enumerate() {
                                let wi = (wo * g.stride + dw) as isize - pw as isize;
                                *d = if wi < 0 || wi >= g.w as isize { T::zero() } else { srow[wi as usize] };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], t: usize, r0: usize, r1: usize, dx: &mut [T]) {
    let n = (r1 - r0) * g.wo;
    let (pt, ph, pw) = (g.kt / 2, g.kh / 2, g.kw / 2);
    let plane = g.h * g.w;
    let mut k = 0;
    for ci in 0..g.ci {
        for dt in 0..g.kt {
            let ti = t as isize + dt as isize - pt as isize;
            for dh in 0..g.kh {
                for dw in 0..g.kw {
                    let row = &col[k * n..(k + 1) * n];
                    k += 1;
                    if ti < 0 || ti >= g.t as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.t + ti as usize) * plane..][..plane];
                    for ho in r0..r1 {
                        let src = &row[(ho - r0) * g.wo..][..g.wo];
                        let hi = (ho * g.stride + dh) as isize - ph as isize;
                        if hi < 0 || hi >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[hi as usize * g.w..][..g.w];
                        if g.stride == 1 {
                            let (lo, hi_c) = g.unit_stride_cols(dw);
                            let off = lo + dw - pw;
                            for (d, &s) in drow[off..off + (hi_c - lo)].iter_mut().zip(&src[lo..hi_c]) {
                                *d += s;
                            }
                        } else {
                            for (wo, &s) in src.iter().enumerate() {
                                let wi = (wo * g.stride + dw) as isize - pw as isize;
                                if wi >= 0 && (wi as usize) < g.w {
                                    drow[wi as usize] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride);
    let mut out = Tensor::<T>::zeros(&g.out_shape());
    let k = g.k();
    let band = g.band_rows();
    let mut col = vec![T::zero(); k * band * g.wo];
    let out_plane = g.ho * g.wo;
    let out_t_stride = (g.t * out_plane) as isize;
    for t in 0..g.t {
        let mut r0 = 0;
        while r0 < g.ho {
            let r1 = (r0 + band).min(g.ho);
            let n = (r1 - r0) * g.wo;
            im2col(&g, x.data(), t, r0, r1, &mut col[..k * n]);
            let c_off = t * out_plane + r0 * g.wo;
            // SAFETY: w is (co, k) row-major, col is (k, n) row-major, and the
            // output block (co rows strided by T*Ho*Wo, n contiguous columns)
            // lies inside `out`.
            unsafe {
                T::gemm(
                    g.co,
                    k,
                    n,
                    T::one(),
                    w.data().as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    T::zero(),
                    out.data_mut().as_mut_ptr().add(c_off),
                    out_t_stride,
                    1,
                );
            }
            r0 = r1;
        }
    }
    if let Some(b) = b {
        let per = g.t * out_plane;
        for (c, chunk) in out.data_mut().chunks_exact_mut(per).enumerate() {
            let bc = b.data()[c];
            for v in chunk {
                *v += bc;
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    need_dx: bool,
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride);
    assert_eq!(gy.shape(), g.out_shape());
    let k = g.k();
    let band = g.band_rows();
    let mut col = vec![T::zero(); k * band * g.wo];
    let mut dcol = if need_dx { vec![T::zero(); k * band * g.wo] } else { Vec::new() };
    let mut dw = Tensor::zeros(w.shape());
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    let out_plane = g.ho * g.wo;
    let out_t_stride = (g.t * out_plane) as isize;
    for t in 0..g.t {
        let mut r0 = 0;
        while r0 < g.ho {
            let r1 = (r0 + band).min(g.ho);
            let n = (r1 - r0) * g.wo;
            let gy_ptr = unsafe { gy.data().as_ptr().add(t * out_plane + r0 * g.wo) };
            im2col(&g, x.data(), t, r0, r1, &mut col[..k * n]);
            // SAFETY: dW (co, k) += gy_band (co, n) * col^T (n, k).
            unsafe {
                T::gemm(
                    g.co,
                    n,
                    k,
                    T::one(),
                    gy_ptr,
                    out_t_stride,
                    1,
                    col.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    dw.data_mut().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // SAFETY: dcol (k, n) = W^T (k, co) * gy_band (co, n).
                unsafe {
                    T::gemm(
                        k,
                        g.co,
                        n,
                        T::one(),
                        w.data().as_ptr(),
                        1,
                        k as isize,
                        gy_ptr,
                        out_t_stride,
                        1,
                        T::zero(),
                        dcol.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                col2im(&g, &dcol[..k * n], t, r0, r1, dx.data_mut());
            }
            r0 = r1;
        }
    }
    let per = g.t * out_plane;
    let db = Tensor::from_fn(&[g.co], |c| gy.data()[c * per..(c + 1) * per].iter().copied().sum());
    ConvGrads { dx, dw, db }
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x.data().iter().zip(gy.data()).map(|(&v, &g)| if v > T::zero() { g } else { g * slope }).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Nearest-neighbour 2x spatial up-sampling of a `(C, T, H, W)` tensor.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (ct, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[s[0], s[1], 2 * h, 2 * w]);
    let od = out.data_mut();
    for p in 0..ct {
        let src = &x.data()[p * h * w..][..h * w];
        let dst = &mut od[p * 4 * h * w..][..4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = src[i * w + j];
                let base = 2 * i * 2 * w + 2 * j;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(gy: &Tensor<T>) -> Tensor<T> {
    let s = gy.shape();
    let (ct, h, w) = (s[0] * s[1], s[2] / 2, s[3] / 2);
    let mut out = Tensor::zeros(&[s[0], s[1], h, w]);
    let od = out.data_mut();
    for p in 0..ct {
        let src = &gy.data()[p * 4 * h * w..][..4 * h * w];
        for i in 0..h {
            for j in 0..w {
                let base = 2 * i * 2 * w + 2 * j;
                od[p * h * w + i * w + j] = src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1];
            }
        }
    }
    out
}

/// 2x2 average pooling over the last two axes.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let n = s.len();
    let (h, w) = (s[n - 2], s[n - 1]);
    let (ho, wo) = (h / 2, w / 2);
    let lead: usize = s[..n - 2].iter().product();
    let mut shape = s.to_vec();
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(&shape);
    for p in 0..lead {
        let src = &x.data()[p * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                out.data_mut()[p * ho * wo + i * wo + j] = (a + b) * quarter;
            }
        }
    }
    out
}

/// Mean over the temporal axis: `(C, T, H, W) -> (C, 1, H, W)`.
pub fn mean_time<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let inv = T::one() / T::of(t as f64);
    let mut out = Tensor::zeros(&[c, 1, s[2], s[3]]);
    for ci in 0..c {
        let dst = &mut out.data_mut()[ci * plane..][..plane];
        for ti in 0..t {
            let src = &x.data()[(ci * t + ti) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        for d in dst {
            *d *= inv;
        }
    }
    out
}

pub fn mean_time_backward<T: Scalar>(gy: &Tensor<T>, t: usize) -> Tensor<T> {
    let s = gy.shape();
    let (c, plane) = (s[0], s[2] * s[3]);
    let inv = T::one() / T::of(t as f64);
    let mut out = Tensor::zeros(&[c, t, s[2], s[3]]);
    for ci in 0..c {
        let src = &gy.data()[ci * plane..][..plane];
        for ti in 0..t {
            let dst = &mut out.data_mut()[(ci * t + ti) * plane..][..plane];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d = g * inv;
            }
        }
    }
    out
}

/// Spatially variant filtering: `S(c,p,q) = sum_{u,v} theta(c,u,v,p,q) * f(c, p+u, q+v)`
/// with zero padding. `f` is `(C, 1, H, W)`, `theta` is `(C*nf*nf, 1, H, W)`
/// with tap index `(u+z)*nf + (v+z)` inside each channel's group.
pub fn similarity<T: Scalar>(f: &Tensor<T>, theta: &Tensor<T>, nf: usize) -> Tensor<T> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[2], s[3]);
    assert_eq!(theta.shape(), [c * nf * nf, 1, h, w], "filter field does not match feature map");
    let z = (nf / 2) as isize;
    let plane = h * w;
    let mut out = Tensor::zeros(&[c, 1, h, w]);
    for ci in 0..c {
        let fc = &f.data()[ci * plane..][..plane];
        for (tap, (u, v)) in taps(nf, z).enumerate() {
            let th = &theta.data()[(ci * nf * nf + tap) * plane..][..plane];
            let dst = &mut out.data_mut()[ci * plane..][..plane];
            for p in 0..h {
                let pi = p as isize + u;
                if pi < 0 || pi >= h as isize {
                    continue;
                }
                for q in 0..w {
                    let qi = q as isize + v;
                    if qi < 0 || qi >= w as isize {
                        continue;
                    }
                    dst[p * w + q] += th[p * w + q] * fc[pi as usize * w + qi as usize];
                }
            }
        }
    }
    out
}

pub fn similarity_backward<T: Scalar>(
    f: &Tensor<T>,
    theta: &Tensor<T>,
    gy: &Tensor<T>,
    nf: usize,
) -> (Tensor<T>, Tensor<T>) {
    let s = f.shape();
    let (c, h, w) = (s[0], s[2], s[3]);
    let z = (nf / 2) as isize;
    let plane = h * w;
    let mut df = Tensor::zeros(f.shape());
    let mut dtheta = Tensor::zeros(theta.shape());
    for ci in 0..c {
        let fc = &f.data()[ci * plane..][..plane];
        let gc = &gy.data()[ci * plane..][..plane];
        for (tap, (u, v)) in taps(nf, z).enumerate() {
            let toff = (ci * nf * nf + tap) * plane;
            for p in 0..h {
                let pi = p as isize + u;
                if pi < 0 || pi >= h as isize {
                    continue;
                }
                for q in 0..w {
                    let qi = q as isize + v;
                    if qi < 0 || qi >= w as isize {
                        continue;
                    }
                    let src = pi as usize * w + qi as usize;
                    let g = gc[p * w + q];
                    dtheta.data_mut()[toff + p * w + q] = g * fc[src];
                    df.data_mut()[ci * plane + src] += g * theta.data()[toff + p * w + q];
                }
            }
        }
    }
    (df, dtheta)
}

fn taps(nf: usize, z: isize) -> impl Iterator<Item = (isize, isize)> {
    (0..nf as isize).flat_map(move |a| (0..nf as isize).map(move |b| (a - z, b - z)))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// `out(c,t,p,q) = gate(c,0,p,q) * x(c,t,p,q)`
pub fn gate<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    assert_eq!(g.shape(), [c, 1, s[2], s[3]]);
    let mut out = x.clone();
    for ci in 0..c {
        let gc = &g.data()[ci * plane..][..plane];
        for ti in 0..t {
            let dst = &mut out.data_mut()[(ci * t + ti) * plane..][..plane];
            for (d, &gv) in dst.iter_mut().zip(gc) {
                *d *= gv;
            }
        }
    }
    out
}

pub fn gate_backward<T: Scalar>(g: &Tensor<T>, x: &Tensor<T>, gy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    let dx = gate(g, gy);
    let mut dg = Tensor::zeros(g.shape());
    for ci in 0..c {
        let dst = &mut dg.data_mut()[ci * plane..][..plane];
        for ti in 0..t {
            let off = (ci * t + ti) * plane;
            for ((d, &xv), &gv) in dst.iter_mut().zip(&x.data()[off..off + plane]).zip(&gy.data()[off..off + plane]) {
                *d += xv * gv;
            }
        }
    }
    (dg, dx)
}

/// Concatenate along the leading (channel) axis.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>]) -> Tensor<T> {
    let rest = &xs[0].shape()[1..];
    let mut c = 0;
    let mut data = Vec::with_capacity(xs.iter().map(|x| x.len()).sum());
    for x in xs {
        assert_eq!(&x.shape()[1..], rest, "concat operands disagree beyond the channel axis");
        c += x.dim(0);
        data.extend_from_slice(x.data());
    }
    let mut shape = vec![c];
    shape.extend_from_slice(rest);
    Tensor::from_vec(&shape, data).expect("concat shape")
}

pub fn split<T: Scalar>(gy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let rest = &gy.shape()[1..];
    let per: usize = rest.iter().product();
    let mut off = 0;
    channels
        .iter()
        .map(|&c| {
            let mut shape = vec![c];
            shape.extend_from_slice(rest);
            let t = Tensor::from_vec(&shape, gy.data()[off..off + c * per].to_vec()).expect("split shape");
            off += c * per;
            t
        })
        .collect()
}

/// Reflect-pad the last two axes on the bottom/right edges.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Tensor<T> {
    let s = x.shape();
    let n = s.len();
    let (h, w) = (s[n - 2], s[n - 1]);
    let (hp, wp) = (h + pad_h, w + pad_w);
    let lead: usize = s[..n - 2].iter().product();
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    let mut shape = s.to_vec();
    shape[n - 2] = hp;
    shape[n - 1] = wp;
    let mut out = Tensor::zeros(&shape);
    for p in 0..lead {
        for i in 0..hp {
            let si = reflect(i, h);
            for j in 0..wp {
                out.data_mut()[(p * hp + i) * wp + j] = x.data()[(p * h + si) * w + reflect(j, w)];
            }
        }
    }
    out
}

pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let n = s.len();
    let (hp, wp) = (s[n - 2], s[n - 1]);
    let lead: usize = s[..n - 2].iter().product();
    let mut shape = s.to_vec();
    shape[n - 2] = h;
    shape[n - 1] = w;
    let mut out = Tensor::zeros(&shape);
    for p in 0..lead {
        for i in 0..h {
            let src = &x.data()[(p * hp + i) * wp..][..w];
            out.data_mut()[(p * h + i) * w..][..w].copy_from_slice(src);
        }
    }
    out
}
