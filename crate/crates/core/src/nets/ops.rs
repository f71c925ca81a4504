//! Forward and backward kernels shared by every network.
//!
//! Convolutions are lowered to GEMM through im2col, processed in bands of
//! output rows so the column buffer stays bounded for large images.

use crate::scalar::Scalar;
use crate::tensor::{reflect_index, Tensor};

/// Upper bound on column-buffer elements per band.
const BAND_ELEMS: usize = 1 << 22;

pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub mode: PadMode,
}

impl Padding {
    pub fn uniform(p: usize, mode: PadMode) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
            mode,
        }
    }

    /// Size-preserving padding for an even kernel at stride 1 (one pixel less
    /// before than after).
    pub fn same_even(k: usize, mode: PadMode) -> Self {
        let total = k - 1;
        Padding {
            top: total / 2,
            bottom: total - total / 2,
            left: total / 2,
            right: total - total / 2,
            mode,
        }
    }
}

/// Geometry of a 2-D convolution over a `c × h × w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: Padding,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + self.pad.top + self.pad.bottom).saturating_sub(self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + self.pad.left + self.pad.right).saturating_sub(self.k) / self.stride + 1
    }
    pub fn valid(&self) -> bool {
        self.in_h + self.pad.top + self.pad.bottom >= self.k
            && self.in_w + self.pad.left + self.pad.right >= self.k
            && (self.pad.mode == PadMode::Zero
                || (self.pad.top.max(self.pad.bottom) < self.in_h.max(2)
                    && self.pad.left.max(self.pad.right) < self.in_w.max(2)))
    }
    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }
    fn band_rows(&self) -> usize {
        (BAND_ELEMS / (self.patch_len() * self.out_w()).max(1)).max(1)
    }

    /// Source index along one axis, or `None` for a zero-padded tap.
    #[inline]
    fn source(&self, pos: isize, n: usize) -> Option<usize> {
        if pos >= 0 && (pos as usize) < n {
            Some(pos as usize)
        } else {
            match self.pad.mode {
                PadMode::Zero => None,
                PadMode::Reflect => Some(reflect_index(pos, n)),
            }
        }
    }

    /// `taps[kx][ox]` = source column for kernel column `kx` at output column `ox`.
    fn column_taps(&self) -> Vec<Vec<Option<usize>>> {
        let ow = self.out_w();
        (0..self.k)
            .map(|kx| {
                (0..ow)
                    .map(|ox| {
                        let pos = (ox * self.stride + kx) as isize - self.pad.left as isize;
                        self.source(pos, self.in_w)
                    })
                    .collect()
            })
            .collect()
    }

    fn row_source(&self, r: usize, ky: usize) -> Option<usize> {
        let pos = (r * self.stride + ky) as isize - self.pad.top as isize;
        self.source(pos, self.in_h)
    }
}

/// Unfold output rows `[r0, r1)` into a `(in_c·k·k) × ((r1−r0)·out_w)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, taps: &[Vec<Option<usize>>], r0: usize, r1: usize, cols: &mut [T]) {
    let ow = g.out_w();
    let nc = (r1 - r0) * ow;
    let (h, w) = (g.in_h, g.in_w);
    for ci in 0..g.in_c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for (kx, tap) in taps.iter().enumerate() {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * nc..(row + 1) * nc];
                for r in r0..r1 {
                    let out = &mut dst[(r - r0) * ow..(r - r0 + 1) * ow];
                    match g.row_source(r, ky) {
                        None => out.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * w..(iy + 1) * w];
                            for (o, t) in out.iter_mut().zip(tap) {
                                *o = match t {
                                    Some(ix) => src[*ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back onto the input grid.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, taps: &[Vec<Option<usize>>], r0: usize, r1: usize, x: &mut [T]) {
    let ow = g.out_w();
    let nc = (r1 - r0) * ow;
    let (h, w) = (g.in_h, g.in_w);
    for ci in 0..g.in_c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.k {
            for (kx, tap) in taps.iter().enumerate() {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * nc..(row + 1) * nc];
                for r in r0..r1 {
                    if let Some(iy) = g.row_source(r, ky) {
                        let vals = &src[(r - r0) * ow..(r - r0 + 1) * ow];
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for (v, t) in vals.iter().zip(tap) {
                            if let Some(ix) = t {
                                dst[*ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn bands(rows: usize, band: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..rows).step_by(band).map(move |r0| (r0, (r0 + band).min(rows)))
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: Option<&[T]>) {
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            for v in y.plane_mut(c) {
                *v += bv;
            }
        }
    }
}

fn accumulate_bias_grad<T: Scalar>(gy: &Tensor<T>, gb: Option<&mut [T]>) {
    if let Some(gb) = gb {
        for (c, g) in gb.iter_mut().enumerate() {
            let mut s = T::zero();
            for &v in gy.plane(c) {
                s += v;
            }
            *g += s;
        }
    }
}

/// Cross-correlation with weight layout `(out_c, in_c, k, k)`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, out_c: usize, g: &ConvGeom) -> Tensor<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.patch_len();
    debug_assert_eq!(weight.len(), out_c * kk);
    let taps = g.column_taps();
    let mut y = Tensor::zeros(out_c, oh, ow);
    let band = g.band_rows();
    let mut cols = vec![T::zero(); kk * band.min(oh) * ow];
    for (r0, r1) in bands(oh, band) {
        let nc = (r1 - r0) * ow;
        im2col(x.data(), g, &taps, r0, r1, &mut cols[..kk * nc]);
        T::gemm(
            out_c,
            kk,
            nc,
            weight,
            (kk as isize, 1),
            &cols[..kk * nc],
            (nc as isize, 1),
            &mut y.data_mut()[r0 * ow..],
            ((oh * ow) as isize, 1),
            false,
        );
    }
    add_bias(&mut y, bias);
    y
}

/// Gradients of [`conv2d_forward`]. Weight/bias gradients are accumulated
/// into the provided buffers; returns the input gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    out_c: usize,
    g: &ConvGeom,
    gy: &Tensor<T>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) -> Tensor<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.patch_len();
    let taps = g.column_taps();
    let mut gx = Tensor::zeros(g.in_c, g.in_h, g.in_w);
    let band = g.band_rows();
    let mut cols = vec![T::zero(); kk * band.min(oh) * ow];
    let mut gcols = vec![T::zero(); kk * band.min(oh) * ow];
    let mut gw = gw;
    for (r0, r1) in bands(oh, band) {
        let nc = (r1 - r0) * ow;
        let gy_band = &gy.data()[r0 * ow..];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(x.data(), g, &taps, r0, r1, &mut cols[..kk * nc]);
            T::gemm(
                out_c,
                nc,
                kk,
                gy_band,
                ((oh * ow) as isize, 1),
                &cols[..kk * nc],
                (1, nc as isize),
                gw,
                (kk as isize, 1),
                true,
            );
        }
        T::gemm(
            kk,
            out_c,
            nc,
            weight,
            (1, kk as isize),
            gy_band,
            ((oh * ow) as isize, 1),
            &mut gcols[..kk * nc],
            (nc as isize, 1),
            false,
        );
        col2im(&gcols[..kk * nc], g, &taps, r0, r1, gx.data_mut());
    }
    accumulate_bias_grad(gy, gb);
    gx
}

/// Geometry of the convolution whose adjoint is a transposed convolution
/// mapping `in_c × h × w` to `out_c × ((h−1)·s − 2p + k) × ...`.
pub fn deconv_geom(out_c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<ConvGeom> {
    let oh = ((h - 1) * stride + k).checked_sub(2 * pad)?;
    let ow = ((w - 1) * stride + k).checked_sub(2 * pad)?;
    let g = ConvGeom {
        in_c: out_c,
        in_h: oh,
        in_w: ow,
        k,
        stride,
        pad: Padding::uniform(pad, PadMode::Zero),
    };
    (g.out_h() == h && g.out_w() == w).then_some(g)
}

/// Transposed convolution with weight layout `(in_c, out_c, k, k)`; `g` comes
/// from [`deconv_geom`].
pub fn deconv2d_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let (in_c, h, w) = x.shape();
    let kd = g.patch_len();
    debug_assert_eq!(weight.len(), in_c * kd);
    let taps = g.column_taps();
    let mut y = Tensor::zeros(g.in_c, g.in_h, g.in_w);
    let band = g.band_rows();
    let mut gcols = vec![T::zero(); kd * band.min(h) * w];
    for (r0, r1) in bands(h, band) {
        let nc = (r1 - r0) * w;
        T::gemm(
            kd,
            in_c,
            nc,
            weight,
            (1, kd as isize),
            &x.data()[r0 * w..],
            ((h * w) as isize, 1),
            &mut gcols[..kd * nc],
            (nc as isize, 1),
            false,
        );
        col2im(&gcols[..kd * nc], g, &taps, r0, r1, y.data_mut());
    }
    add_bias(&mut y, bias);
    y
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    g: &ConvGeom,
    gy: &Tensor<T>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) -> Tensor<T> {
    let (in_c, h, w) = x.shape();
    let kd = g.patch_len();
    let taps = g.column_taps();
    let mut gx = Tensor::zeros(in_c, h, w);
    let band = g.band_rows();
    let mut cols = vec![T::zero(); kd * band.min(h) * w];
    let mut gw = gw;
    for (r0, r1) in bands(h, band) {
        let nc = (r1 - r0) * w;
        im2col(gy.data(), g, &taps, r0, r1, &mut cols[..kd * nc]);
        T::gemm(
            in_c,
            kd,
            nc,
            weight,
            (kd as isize, 1),
            &cols[..kd * nc],
            (nc as isize, 1),
            &mut gx.data_mut()[r0 * w..],
            ((h * w) as isize, 1),
            false,
        );
        if let Some(gw) = gw.as_deref_mut() {
            T::gemm(
                in_c,
                nc,
                kd,
                &x.data()[r0 * w..],
                ((h * w) as isize, 1),
                &cols[..kd * nc],
                (1, nc as isize),
                gw,
                (kd as isize, 1),
                true,
            );
        }
    }
    accumulate_bias_grad(gy, gb);
    gx
}

struct PlaneStats<T> {
    mean: T,
    inv_std: T,
}

fn plane_stats<T: Scalar>(p: &[T], eps: f64) -> PlaneStats<T> {
    let n = T::from_f64(p.len() as f64);
    let mut s = T::zero();
    for &v in p {
        s += v;
    }
    let mean = s / n;
    let mut var = T::zero();
    for &v in p {
        let d = v - mean;
        var += d * d;
    }
    let var = var / n;
    PlaneStats {
        mean,
        inv_std: T::one() / (var + T::from_f64(eps)).sqrt(),
    }
}

/// Per-channel normalization over the spatial extent, followed by an affine map.
pub fn instance_norm_forward<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let mut y = x.clone();
    for c in 0..x.channels() {
        let st = plane_stats(x.plane(c), IN_EPS);
        let (g, b) = (gamma[c], beta[c]);
        for v in y.plane_mut(c) {
            *v = (*v - st.mean) * st.inv_std * g + b;
        }
    }
    y
}

pub fn instance_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    gy: &Tensor<T>,
    mut ggamma: Option<&mut [T]>,
    mut gbeta: Option<&mut [T]>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(x.channels(), x.height(), x.width());
    let n = T::from_f64(x.plane_len() as f64);
    for c in 0..x.channels() {
        let xp = x.plane(c);
        let gp = gy.plane(c);
        let st = plane_stats(xp, IN_EPS);
        let mut sum_g = T::zero();
        let mut sum_gxh = T::zero();
        for (&xv, &gv) in xp.iter().zip(gp) {
            let xh = (xv - st.mean) * st.inv_std;
            sum_g += gv;
            sum_gxh += gv * xh;
        }
        if let Some(gg) = ggamma.as_deref_mut() {
            gg[c] += sum_gxh;
        }
        if let Some(gb) = gbeta.as_deref_mut() {
            gb[c] += sum_g;
        }
        let scale = gamma[c] * st.inv_std;
        let mean_g = sum_g / n;
        let mean_gxh = sum_gxh / n;
        for ((o, &xv), &gv) in gx.plane_mut(c).iter_mut().zip(xp).zip(gp) {
            let xh = (xv - st.mean) * st.inv_std;
            *o = scale * (gv - mean_g - xh * mean_gxh);
        }
    }
    gx
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn forward<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu(s) => {
                let s = T::from_f64(s);
                x.map(|v| if v > T::zero() { v } else { v * s })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    pub fn backward<T: Scalar>(self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let mut gx = gy.clone();
        match self {
            Activation::Relu => {
                for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                    if !(v > T::zero()) {
                        *g = T::zero();
                    }
                }
            }
            Activation::LeakyRelu(s) => {
                let s = T::from_f64(s);
                for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                    if !(v > T::zero()) {
                        *g *= s;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
                    let t = v.tanh();
                    *g *= T::one() - t * t;
                }
            }
        }
        gx
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, h / 2, w / 2, |ch, y, xx| {
        let (iy, ix) = maxpool2_argmax(x, ch, y, xx);
        x.at(ch, iy, ix)
    })
}

fn maxpool2_argmax<T: Scalar>(x: &Tensor<T>, ch: usize, y: usize, xx: usize) -> (usize, usize) {
    let mut best = (2 * y, 2 * xx);
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let cand = (2 * y + dy, 2 * xx + dx);
        if x.at(ch, cand.0, cand.1) > x.at(ch, best.0, best.1) {
            best = cand;
        }
    }
    best
}

pub fn maxpool2_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let mut gx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let (iy, ix) = maxpool2_argmax(x, ch, y, xx);
                *gx.at_mut(ch, iy, ix) += gy.at(ch, y, xx);
            }
        }
    }
    gx
}
