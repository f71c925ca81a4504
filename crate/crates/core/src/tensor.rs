//! Planar `channels × height × width` tensor used by every network and loss.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::full(c, h, w, T::zero())
    }

    pub fn full(c: usize, h: usize, w: usize, v: T) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![v; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold {c}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }
    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.h + y) * self.w + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in &mut self.data {
            *a *= alpha;
        }
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.re()).sum()
    }

    pub fn mean_f64(&self) -> f64 {
        self.sum_f64() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (h, w) = (first.h, first.w);
        let mut c = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {h}x{w} vs {}x{}",
                    p.h, p.w
                )));
            }
            c += p.c;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { c, h, w, data })
    }

    /// Channels `[start, start + count)` as a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Self {
        let n = self.plane_len();
        Tensor {
            c: count,
            h: self.h,
            w: self.w,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    /// Replicate a single-channel tensor to `c` channels.
    pub fn repeat_channels(&self, c: usize) -> Self {
        assert_eq!(self.c, 1, "repeat_channels expects a single channel");
        let mut data = Vec::with_capacity(c * self.data.len());
        for _ in 0..c {
            data.extend_from_slice(&self.data);
        }
        Tensor {
            c,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Self {
        Tensor::from_fn(self.c, self.h, self.w, |c, y, x| self.at(c, y, self.w - 1 - x))
    }

    /// Spatial window `[top, top+h) × [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        assert!(top + h <= self.h && left + w <= self.w, "crop out of bounds");
        Tensor::from_fn(self.c, h, w, |c, y, x| self.at(c, top + y, left + x))
    }
}


/// Mirror an out-of-range index back into `[0, n)` without repeating the
/// border sample (`-1 → 1`, `n → n-2`). Folds repeatedly for large offsets.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}
