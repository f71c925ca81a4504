//! Scalar abstraction for the tensor engine.
//!
//! Every layer is written once against [`Scalar`]. Running a network with
//! [`Dual`] numbers propagates a directional derivative alongside the value,
//! which is how the critic's gradient-penalty parameter gradient (a mixed
//! second derivative) is computed exactly without a second-order tape.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;
    /// Real (primal) part as f64.
    fn re(self) -> f64;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn is_finite(self) -> bool {
        self.re().is_finite()
    }

    /// `C = A·B` (or `C += A·B` when `accumulate`), for an `m×k` matrix `A` and a
    /// `k×n` matrix `B` addressed through explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        c_strides: (isize, isize),
        accumulate: bool,
    );
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    c: &[T],
    sc: (isize, isize),
) {
    if m > 0 && k > 0 {
        assert!(max_offset(m, k, sa) < a.len(), "gemm: A out of bounds");
    }
    if k > 0 && n > 0 {
        assert!(max_offset(k, n, sb) < b.len(), "gemm: B out of bounds");
    }
    if m > 0 && n > 0 {
        assert!(max_offset(m, n, sc) < c.len(), "gemm: C out of bounds");
    }
}

macro_rules! impl_float_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn re(self) -> f64 {
                self as f64
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                sa: (isize, isize),
                b: &[Self],
                sb: (isize, isize),
                c: &mut [Self],
                sc: (isize, isize),
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every addressed element was bounds-checked above and
                // `c` does not alias `a` or `b` (distinct borrows).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        sa.0,
                        sa.1,
                        b.as_ptr(),
                        sb.0,
                        sb.1,
                        beta,
                        c.as_mut_ptr(),
                        sc.0,
                        sc.1,
                    );
                }
            }
        }
    };
}

impl_float_scalar!(f32, matrixmultiply::sgemm);
impl_float_scalar!(f64, matrixmultiply::dgemm);

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual<S> {
    pub re: S,
    pub eps: S,
}

impl<S: Scalar> Dual<S> {
    pub fn new(re: S, eps: S) -> Self {
        Dual { re, eps }
    }
    pub fn constant(re: S) -> Self {
        Dual { re, eps: S::zero() }
    }
}

impl<S: Scalar> PartialOrd for Dual<S> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}
impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}
impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}
impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = S::one() / o.re;
        Dual::new(self.re * inv, (self.eps - self.re * inv * o.eps) * inv)
    }
}
impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}
impl<S: Scalar> AddAssign for Dual<S> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}
impl<S: Scalar> SubAssign for Dual<S> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}
impl<S: Scalar> MulAssign for Dual<S> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn from_f64(v: f64) -> Self {
        Dual::constant(S::from_f64(v))
    }
    fn re(self) -> f64 {
        self.re.re()
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual::new(r, self.eps / (S::from_f64(2.0) * r))
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (S::one() - t * t))
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
        sc: (isize, isize),
        accumulate: bool,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
        let gather = |src: &[Self], rows: usize, cols: usize, (rs, cs): (isize, isize)| {
            let mut re = Vec::with_capacity(rows * cols);
            let mut eps = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = src[i * rs as usize + j * cs as usize];
                    re.push(v.re);
                    eps.push(v.eps);
                }
            }
            (re, eps)
        };
        let (a_re, a_eps) = gather(a, m, k, sa);
        let (b_re, b_eps) = gather(b, k, n, sb);
        let row_a = (k as isize, 1);
        let row_b = (n as isize, 1);
        let row_c = (n as isize, 1);
        let mut c_re = vec![S::zero(); m * n];
        let mut c_eps = vec![S::zero(); m * n];
        S::gemm(m, k, n, &a_re, row_a, &b_re, row_b, &mut c_re, row_c, false);
        S::gemm(m, k, n, &a_eps, row_a, &b_re, row_b, &mut c_eps, row_c, false);
        S::gemm(m, k, n, &a_re, row_a, &b_eps, row_b, &mut c_eps, row_c, true);
        for i in 0..m {
            for j in 0..n {
                let dst = &mut c[i * sc.0 as usize + j * sc.1 as usize];
                let v = Dual::new(c_re[i * n + j], c_eps[i * n + j]);
                if accumulate {
                    *dst += v;
                } else {
                    *dst = v;
                }
            }
        }
    }
}
